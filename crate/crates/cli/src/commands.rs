use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use demsd::assignment::{assign_by_embedding, assign_each, assign_family, assign_random, bundled_metadata, load_metadata, AssignmentMap, LanguageMetadata, Method, BUNDLED};
use demsd::data::{generate_corpus, Split, SyntheticCorpus, MANIFEST_FILE};
use demsd::decoding::{strip_eos, translate as decode};
use demsd::evaluation::{evaluate_bleu, measure_ds, sweep as run_sweep, to_csv, to_markdown, SpeedReport, SweepSettings};
use demsd::model::{DemsdModel, ModelConfig, Routing, RoutingSpec};
use demsd::training::{train as run_train, TrainOptions, BEST_CHECKPOINT};
use serde::Serialize;

use crate::config::Experiment;
use crate::CliError;

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Runtime(demsd::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(demsd::Error::Input(format!("{}: {e}", path.display()))))?;
    write_file(path, &(text + "\n"))
}

fn load_corpus(exp: &Experiment) -> Result<SyntheticCorpus, CliError> {
    let dir = exp.data_dir();
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(CliError::Dependency(format!(
            "no corpus in {}; run `demsd gen-data` first",
            dir.display()
        )));
    }
    let corpus = SyntheticCorpus::load(&dir)?;
    if corpus.spec != exp.corpus {
        return Err(CliError::Config(format!(
            "corpus in {} was generated from a different corpus spec or seed",
            dir.display()
        )));
    }
    Ok(corpus)
}

fn load_model(exp: &Experiment) -> Result<DemsdModel, CliError> {
    let path = exp.model_dir().join(BEST_CHECKPOINT);
    if !path.exists() {
        return Err(CliError::Dependency(format!(
            "no checkpoint for `{}` at {}; run `demsd train` first",
            exp.label(),
            path.display()
        )));
    }
    Ok(DemsdModel::load(&path)?)
}

pub fn gen_data(exp: &Experiment) -> Result<(), CliError> {
    let corpus = generate_corpus(&exp.corpus)?;
    let dir = exp.data_dir();
    corpus.save(&dir)?;
    println!("wrote {} directions to {}", corpus.directions.len(), dir.display());
    for d in &corpus.directions {
        println!("{}\t{}\t{}\t{}", d.direction.name(), d.train.len(), d.valid.len(), d.test.len());
    }
    Ok(())
}

fn metadata(exp: &Experiment) -> Result<Vec<LanguageMetadata>, CliError> {
    match &exp.file.assignment.metadata {
        Some(name) if BUNDLED.contains(&name.as_str()) => Ok(bundled_metadata(name)?),
        Some(path) => {
            let p = exp.resolve_path(Path::new(path));
            if !p.exists() {
                return Err(CliError::Dependency(format!("metadata file {} not found", p.display())));
            }
            Ok(load_metadata(&p)?)
        }
        None => Ok(exp.corpus.target_metadata()),
    }
}

fn embedding_checkpoint(exp: &Experiment) -> Result<BTreeMap<String, Vec<f64>>, CliError> {
    let path = exp
        .file
        .assignment
        .checkpoint
        .as_ref()
        .map(|p| exp.resolve_path(p))
        .ok_or_else(|| CliError::Dependency("EMB needs `assignment.checkpoint` pointing at a trained model".into()))?;
    if !path.exists() {
        return Err(CliError::Dependency(format!("EMB checkpoint {} not found", path.display())));
    }
    Ok(DemsdModel::load(&path)?.language_embeddings())
}

fn build_map(exp: &Experiment, method: Method, meta: &[LanguageMetadata]) -> Result<AssignmentMap, CliError> {
    let codes: Vec<String> = meta.iter().map(|m| m.code.clone()).collect();
    let groups = exp.file.model.decoders.unwrap_or_else(|| {
        let mut fams: Vec<&str> = meta.iter().map(|m| m.family.as_str()).collect();
        fams.sort();
        fams.dedup();
        fams.len()
    });
    Ok(match method {
        Method::Each => assign_each(&codes)?,
        Method::Rand => assign_random(&codes, groups, exp.seed)?,
        Method::Fam => assign_family(meta)?,
        Method::Emb => {
            let all = embedding_checkpoint(exp)?;
            let chosen = codes
                .iter()
                .map(|c| {
                    all.get(c)
                        .map(|v| (c.clone(), v.clone()))
                        .ok_or_else(|| CliError::Config(format!("checkpoint has no embedding for `{c}`")))
                })
                .collect::<Result<BTreeMap<_, _>, _>>()?;
            assign_by_embedding(&chosen, groups, exp.seed)?
        }
        Method::St => {
            return Err(CliError::Config(
                "ST learns its assignment during training; use `demsd train --method st`".into(),
            ))
        }
    })
}

pub fn assign(exp: &Experiment) -> Result<(), CliError> {
    let method = exp
        .method
        .ok_or_else(|| CliError::Config("assign needs --method or model.method".into()))?;
    let map = build_map(exp, method, &metadata(exp)?)?;
    let path = exp.assignment_path();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    map.save(&path)?;
    for (i, g) in map.groups().iter().enumerate() {
        println!("decoder {i}: {}", g.join(" "));
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn routing(exp: &Experiment, corpus: &SyntheticCorpus) -> Result<RoutingSpec, CliError> {
    let targets = corpus.spec.target_metadata();
    let Some(method) = exp.method else {
        return Ok(RoutingSpec::build(None, &targets, 1, exp.seed, None)?);
    };
    if method == Method::St {
        return Ok(RoutingSpec::Router(exp.decoders()));
    }
    let saved = exp.assignment_path();
    if saved.exists() {
        let map = AssignmentMap::load(&saved)?;
        if map.method() == method {
            return Ok(RoutingSpec::Fixed(map));
        }
    }
    Ok(RoutingSpec::Fixed(build_map(exp, method, &targets)?))
}

pub fn train(exp: &Experiment, resume: bool, stop_after: Option<usize>) -> Result<(), CliError> {
    let corpus = load_corpus(exp)?;
    let config = ModelConfig {
        vocab: corpus.vocab.len(),
        allocation: exp.allocation,
        dims: exp.dims,
    };
    let spec = routing(exp, &corpus)?;
    let mut model = DemsdModel::new(config, &corpus.vocab, &corpus.spec.target_languages(), spec, exp.seed)?;
    let options = TrainOptions {
        out_dir: Some(exp.model_dir()),
        resume,
        stop_after,
    };
    let outcome = run_train(&mut model, &corpus, &exp.training, &options)?;
    for r in &outcome.log {
        println!("{}", r.to_line());
    }
    println!(
        "`{}` stopped at step {}; best validation loss {:.4} at step {}",
        exp.label(),
        outcome.step,
        outcome.best.valid_loss,
        outcome.best.step
    );
    if let Routing::Router(_) = model.routing() {
        for l in corpus.spec.target_languages() {
            println!("{l} -> decoder {}", model.select_decoder(&l)?);
        }
    }
    Ok(())
}

pub fn translate(exp: &Experiment, lang: &str, input: Option<&Path>) -> Result<(), CliError> {
    let model = load_model(exp)?;
    let vocab_path = exp.data_dir().join(demsd::data::VOCAB_FILE);
    if !vocab_path.exists() {
        return Err(CliError::Dependency(format!("no vocabulary at {}", vocab_path.display())));
    }
    let vocab = demsd::data::Vocabulary::load(&vocab_path)?;
    let lines: Vec<String> = match input {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| io_err(p, e))?
            .lines()
            .map(str::to_string)
            .collect(),
        None => io::stdin()
            .lock()
            .lines()
            .collect::<io::Result<_>>()
            .map_err(|e| io_err(Path::new("<stdin>"), e))?,
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for line in lines {
        let ids = decode(&model, &vocab.tokenize(&line), lang, &exp.file.decode)?;
        writeln!(out, "{}", vocab.detokenize(strip_eos(&ids))).map_err(|e| io_err(Path::new("<stdout>"), e))?;
    }
    Ok(())
}

pub fn evaluate(exp: &Experiment) -> Result<(), CliError> {
    let model = load_model(exp)?;
    let corpus = load_corpus(exp)?;
    let report = evaluate_bleu(&model, &corpus, Split::Test, &exp.file.decode, &exp.file.buckets, None)?;
    for d in &report.directions {
        println!("{}\t{:.2}\t{:?}", d.direction, d.bleu, d.bucket);
    }
    let show = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    println!(
        "BLEU {:.2}  H {}  M {}  L {}",
        report.average,
        show(report.high),
        show(report.mid),
        show(report.low)
    );
    write_json(&exp.out.join("eval.json"), &report)
}

#[derive(Serialize)]
struct BenchOutput<'a> {
    label: String,
    language: &'a str,
    ds_absolute: f64,
    ds_relative: f64,
    report: &'a SpeedReport,
    baseline: Option<&'a SpeedReport>,
}

pub fn bench(exp: &Experiment) -> Result<(), CliError> {
    let model = load_model(exp)?;
    let corpus = load_corpus(exp)?;
    let first = corpus.directions.first().ok_or_else(|| CliError::Config("corpus has no directions".into()))?;
    let sentences: Vec<Vec<usize>> = first.test.iter().take(exp.file.bench.sentences).map(|p| p.source.clone()).collect();
    let lang = first.direction.target.as_str();
    let b = &exp.file.bench;
    let baseline = match &b.baseline {
        Some(p) => {
            let path = exp.resolve_path(p);
            if !path.exists() {
                return Err(CliError::Dependency(format!("baseline checkpoint {} not found", path.display())));
            }
            let base = DemsdModel::load(&path)?;
            Some(measure_ds(&base, &sentences, lang, &exp.file.decode, b.warmup, b.reps)?)
        }
        None => None,
    };
    let report = measure_ds(&model, &sentences, lang, &exp.file.decode, b.warmup, b.reps)?;
    let relative = baseline.as_ref().map_or(1.0, |base| report.speedup_over(base));
    println!(
        "`{}`: {} tokens in {:.3}s median, {:.1} tokens/s, {:.2}x",
        exp.label(),
        report.tokens,
        report.elapsed,
        report.tokens_per_second,
        relative
    );
    if report.spread() > 0.1 {
        eprintln!("warning: timed passes spread {:.0}% around the median", 100.0 * report.spread());
    }
    write_json(
        &exp.out.join("bench.json"),
        &BenchOutput {
            label: exp.label(),
            language: lang,
            ds_absolute: report.tokens_per_second,
            ds_relative: relative,
            report: &report,
            baseline: baseline.as_ref(),
        },
    )
}

pub fn sweep(exp: &Experiment) -> Result<(), CliError> {
    if exp.file.sweep.is_empty() {
        return Err(CliError::Config("sweep needs at least one [[sweep]] entry".into()));
    }
    demsd::evaluation::check_labels(&exp.file.sweep)?;
    let corpus = load_corpus(exp)?;
    let settings = SweepSettings {
        dims: exp.dims,
        training: exp.training.clone(),
        decode: exp.file.decode,
        thresholds: exp.file.buckets,
        bleu_sentences: exp.file.bench.bleu_sentences,
        ds_sentences: exp.file.bench.sentences,
        warmup: exp.file.bench.warmup,
        reps: exp.file.bench.reps,
        out_dir: Some(exp.out.join("sweep")),
    };
    let rows = run_sweep(&exp.file.sweep, &corpus, &settings)?;
    let csv = to_csv(&rows);
    let md = to_markdown(&rows);
    write_file(&exp.out.join("sweep.csv"), &csv)?;
    write_file(&exp.out.join("sweep.md"), &md)?;
    write_json(&exp.out.join("sweep.json"), &rows)?;
    print!("{md}");
    Ok(())
}
