use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[corpus]
count = 4
families = 2
train = 40
words = 12
valid = 8
test = 8
min_len = 2
max_len = 6

[model]
allocation = "2-1"
dims = { model_dim = 16, heads = 2, ff_dim = 32, dropout = 0.0 }

[training]
total_steps = 12
warmup_steps = 2
valid_interval = 4
max_tokens = 64

[decode]
beam = 2
max_len = 8

[bench]
reps = 2
sentences = 3
"#;

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("exp.toml"), format!("{TINY}\n{extra}")).unwrap();
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn out(&self) -> PathBuf {
        self.path("out")
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_demsd"));
        c.arg("--config")
            .arg(self.path("exp.toml"))
            .arg("--out")
            .arg(self.out())
            .args(args)
            .env_remove("DEMSD_SEED")
            .env_remove("DEMSD_OUT");
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_is_idempotent() {
    let r = Run::new("");
    r.ok(&["gen-data"]);
    let first = read_tree(&r.out().join("data"));
    r.ok(&["gen-data"]);
    assert_eq!(first, read_tree(&r.out().join("data")));
    let tsv = first.iter().filter(|(n, _)| n.ends_with(".tsv")).count();
    assert_eq!(tsv, 4);
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(r.out().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["spec"]["seed"], 3);
    assert_eq!(manifest["counts"]["en-l0"][0], 40);
}

#[test]
fn train_evaluate_bench_translate() {
    let r = Run::new("");
    r.ok(&["gen-data"]);
    r.ok(&["train"]);
    let log = fs::read_to_string(r.out().join("model/train.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    r.ok(&["evaluate"]);
    let a = fs::read(r.out().join("eval.json")).unwrap();
    r.ok(&["evaluate"]);
    assert_eq!(a, fs::read(r.out().join("eval.json")).unwrap());
    r.ok(&["bench"]);
    let bench: serde_json::Value = serde_json::from_slice(&fs::read(r.out().join("bench.json")).unwrap()).unwrap();
    assert!(bench["ds_absolute"].as_f64().unwrap() > 0.0);
    assert_eq!(bench["ds_relative"].as_f64().unwrap(), 1.0);
    fs::write(r.path("in.txt"), "w1 w2 w3\nw4\n").unwrap();
    let out = r.ok(&["translate", "--lang", "l1", "--input", r.path("in.txt").to_str().unwrap()]);
    assert_eq!(out.lines().count(), 2);
    assert!(!out.contains("<pad>") && !out.contains("</s>"));
}

#[test]
fn interrupted_training_resumes() {
    let r = Run::new("");
    r.ok(&["gen-data"]);
    let first = r.ok(&["train", "--stop-after", "5"]);
    assert!(first.contains("stopped at step 5"), "{first}");
    let second = r.ok(&["train", "--resume"]);
    assert!(second.contains("stopped at step 12"), "{second}");
    let log = fs::read_to_string(r.out().join("model/train.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn router_log_carries_tau() {
    let r = Run::new("");
    r.ok(&["gen-data"]);
    r.ok(&["--method", "st", "train"]);
    let log = fs::read_to_string(r.out().join("model/train.log")).unwrap();
    let taus: Vec<f64> = log
        .lines()
        .map(|l| l.split('\t').nth(4).expect("tau column").parse().unwrap())
        .collect();
    assert!(taus.windows(2).all(|w| w[1] < w[0]));
    assert!(taus[0] <= 5.0 && *taus.last().unwrap() >= 0.5);
}

#[test]
fn assignment_methods() {
    let r = Run::new("[assignment]\nmetadata = \"ted8-related\"");
    let out = r.ok(&["--method", "fam", "assign"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("decoder")).count(), 4);
    let text = fs::read_to_string(r.out().join("assignment.txt")).unwrap();
    assert!(text.contains("method\tfam\n"));
    assert!(text.contains("\naz\t") && text.contains("decoders\t4\n"));

    let each = r.ok(&["--method", "each", "assign"]);
    assert_eq!(each.lines().filter(|l| l.starts_with("decoder")).count(), 8);

    r.ok(&["--method", "rand", "--seed", "1", "assign"]);
    let a = fs::read_to_string(r.out().join("assignment.txt")).unwrap();
    r.ok(&["--method", "rand", "--seed", "2", "assign"]);
    let b = fs::read_to_string(r.out().join("assignment.txt")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn emb_needs_a_checkpoint() {
    let r = Run::new("");
    let o = r.run(&["--method", "emb", "assign"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    r.ok(&["gen-data"]);
    r.ok(&["train"]);
    let with = Run::new(&format!(
        "[assignment]\ncheckpoint = \"{}\"",
        r.out().join("model/best.ckpt").display()
    ));
    let out = with.ok(&["--method", "emb", "assign"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("decoder")).count(), 2);
}

#[test]
fn exit_codes() {
    let bad = Run::new("typo = 1");
    let o = bad.run(&["gen-data"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("typo"));

    let r = Run::new("");
    assert_eq!(code(&r.run(&["train"])), 3);
    let o = r.run(&["evaluate"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("`2-1`"));

    r.ok(&["gen-data"]);
    r.ok(&["train"]);
    let o = r.run(&["translate", "--lang", "zz", "--input", r.path("exp.toml").to_str().unwrap()]);
    assert_eq!(code(&o), 4);
}

#[test]
fn environment_overrides() {
    let r = Run::new("");
    let env_out = r.path("env-out");
    let o = Command::new(env!("CARGO_BIN_EXE_demsd"))
        .arg("--config")
        .arg(r.path("exp.toml"))
        .arg("gen-data")
        .env("DEMSD_SEED", "11")
        .env("DEMSD_OUT", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success());
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(env_out.join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["spec"]["seed"], 11);

    // flags beat the environment
    let o = r.cmd(&["--seed", "5", "gen-data"]).env("DEMSD_SEED", "11").output().unwrap();
    assert!(o.status.success());
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(r.out().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["spec"]["seed"], 5);
}

#[test]
fn sweep_reports() {
    let r = Run::new(
        r#"
[[sweep]]
label = "2-2"
allocation = "2-2"

[[sweep]]
label = "3-1"
allocation = "3-1"

[[sweep]]
label = "3-1-FAM"
allocation = "3-1"
method = "fam"
"#,
    );
    r.ok(&["gen-data"]);
    r.ok(&["sweep"]);
    let csv = fs::read_to_string(r.out().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("model-label,enc-layers"));
    let cells: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(cells[0], "2-2");
    assert_eq!(cells[12], "1.00");
    assert!(lines[3].starts_with("3-1-FAM,3,1,FAM,2,"));
    assert!(lines.iter().all(|l| l.split(',').count() == 13));
    assert!(r.out().join("sweep.md").exists());

    let dup = Run::new("[[sweep]]\nlabel = \"a\"\nallocation = \"2-1\"\n[[sweep]]\nlabel = \"a\"\nallocation = \"1-1\"");
    assert_eq!(code(&dup.run(&["sweep"])), 2);
}
