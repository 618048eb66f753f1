//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use demsd::assignment::Method;
use demsd::data::{CorpusSpec, LanguageSpec, Mode};
use demsd::decoding::DecodeConfig;
use demsd::evaluation::{BucketThresholds, SweepEntry};
use demsd::model::LayerAllocation;
use demsd::training::{preset, TrainingConfig};
use demsd::transformer::Dims;
use serde::Deserialize;

use crate::CliError;

pub const SEED_VAR: &str = "DEMSD_SEED";
pub const OUT_VAR: &str = "DEMSD_OUT";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub assignment: AssignmentSection,
    /// Overrides on top of the preset's training recipe.
    #[serde(default)]
    pub training: toml::Table,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub buckets: BucketThresholds,
    #[serde(default)]
    pub sweep: Vec<SweepEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub mode: Mode,
    pub pivot: String,
    /// Generated languages `l0..`, ignored when `languages` is set.
    pub count: usize,
    pub families: usize,
    pub train: usize,
    pub languages: Option<Vec<LanguageSpec>>,
    pub words: usize,
    pub valid: usize,
    pub test: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub zipf_exponent: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let s = CorpusSpec::synthetic(Mode::O2m, 6, 3, 1000, 0);
        Self {
            mode: s.mode,
            pivot: s.pivot,
            count: 6,
            families: 3,
            train: 1000,
            languages: None,
            words: s.words,
            valid: s.valid,
            test: s.test,
            min_len: s.min_len,
            max_len: s.max_len,
            zipf_exponent: s.zipf_exponent,
        }
    }
}

impl CorpusConfig {
    pub fn spec(&self, seed: u64) -> CorpusSpec {
        let mut s = CorpusSpec::synthetic(self.mode, self.count, self.families, self.train, seed);
        if let Some(langs) = &self.languages {
            s.languages = langs.clone();
        }
        s.pivot = self.pivot.clone();
        s.words = self.words;
        s.valid = self.valid;
        s.test = self.test;
        s.min_len = self.min_len;
        s.max_len = self.max_len;
        s.zipf_exponent = self.zipf_exponent;
        s
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: String,
    pub allocation: String,
    pub dims: Option<Dims>,
    pub method: Option<Method>,
    /// Decoder count for RAND, EMB and ST; defaults to the family count.
    pub decoders: Option<usize>,
    pub label: Option<String>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            allocation: "6-2".into(),
            dims: None,
            method: None,
            decoders: None,
            label: None,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignmentSection {
    /// Bundled metadata name (`ted8-related`, `ted8-diverse`, `ml50`) or a
    /// metadata file path.
    pub metadata: Option<String>,
    /// Trained checkpoint whose language embeddings EMB clusters.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub warmup: usize,
    pub reps: usize,
    /// Test sentences timed per pass.
    pub sentences: usize,
    /// Checkpoint timed as the DS-relative reference.
    pub baseline: Option<PathBuf>,
    /// Test sentences per direction for sweep BLEU; all when unset.
    pub bleu_sentences: Option<usize>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            warmup: 1,
            reps: 5,
            sentences: 32,
            baseline: None,
            bleu_sentences: None,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub method: Option<Method>,
}

/// A loaded config with every precedence rule applied.
#[derive(Debug)]
pub struct Experiment {
    pub file: ExperimentConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub method: Option<Method>,
    pub allocation: LayerAllocation,
    pub dims: Dims,
    pub training: TrainingConfig,
    pub corpus: CorpusSpec,
    /// Directory of the config file; relative paths inside it resolve here.
    pub base: PathBuf,
}

fn env_override<T: std::str::FromStr>(name: &str) -> Result<Option<T>, CliError> {
    match std::env::var(name) {
        Ok(v) if !v.is_empty() => v
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{name}: cannot parse `{v}`"))),
        _ => Ok(None),
    }
}

impl Experiment {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let (text, base) = match path {
            Some(p) => (
                fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
                p.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (String::new(), PathBuf::new()),
        };
        let file: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.map_or("<defaults>".into(), |p| p.display().to_string()))))?;
        Self::resolve(file, base, overrides)
    }

    fn resolve(file: ExperimentConfig, base: PathBuf, overrides: &Overrides) -> Result<Self, CliError> {
        let seed = match overrides.seed {
            Some(s) => s,
            None => env_override(SEED_VAR)?.or(file.seed).unwrap_or(1),
        };
        let out = match &overrides.out {
            Some(o) => o.clone(),
            None => env_override::<PathBuf>(OUT_VAR)?
                .or_else(|| file.out.clone())
                .unwrap_or_else(|| PathBuf::from("runs/default")),
        };
        let chosen = preset(&file.model.preset).map_err(|e| CliError::Config(format!("model.preset: {e}")))?;
        let dims = file.model.dims.unwrap_or(chosen.dims);
        dims.validate().map_err(|e| CliError::Config(format!("model.dims: {e}")))?;
        let allocation: LayerAllocation = file
            .model
            .allocation
            .parse()
            .map_err(|e| CliError::Config(format!("model.allocation: {e}")))?;
        let mut training_table = toml::Table::try_from(&chosen.training).map_err(|e| CliError::Config(format!("training: {e}")))?;
        for (k, v) in &file.training {
            training_table.insert(k.clone(), v.clone());
        }
        training_table.insert("seed".into(), toml::Value::Integer(seed as i64));
        let training: TrainingConfig = training_table
            .try_into()
            .map_err(|e| CliError::Config(format!("training: {e}")))?;
        training.validate().map_err(|e| CliError::Config(format!("training: {e}")))?;
        file.decode.validate().map_err(|e| CliError::Config(format!("decode: {e}")))?;
        let corpus = file.corpus.spec(seed);
        corpus.validate().map_err(|e| CliError::Config(format!("corpus: {e}")))?;
        let method = overrides.method.or(file.model.method);
        Ok(Self {
            seed,
            out,
            method,
            allocation,
            dims,
            training,
            corpus,
            base,
            file,
        })
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.out.join("model")
    }

    pub fn assignment_path(&self) -> PathBuf {
        self.out.join("assignment.txt")
    }

    /// Name used in reports and error messages.
    pub fn label(&self) -> String {
        self.file.model.label.clone().unwrap_or_else(|| {
            let mut l = self.allocation.to_string();
            if let Some(m) = self.method {
                l.push('-');
                l.push_str(m.tag());
            }
            l
        })
    }

    pub fn decoders(&self) -> usize {
        self.file.model.decoders.unwrap_or_else(|| self.corpus.families().max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Experiment, CliError> {
        let file: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Experiment::resolve(file, PathBuf::new(), &Overrides::default())
    }

    #[test]
    fn defaults_resolve() {
        let e = parse("").unwrap();
        assert_eq!(e.allocation, LayerAllocation::new(6, 2).unwrap());
        assert_eq!(e.corpus.languages.len(), 6);
        assert_eq!(e.training.seed, e.seed);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(matches!(parse("sede = 3"), Err(CliError::Config(_))));
        let err = parse("[training]\ntotal_step = 3").unwrap_err();
        assert!(err.to_string().contains("training"), "{err}");
        assert!(parse("[corpus]\nwordz = 3").is_err());
    }

    #[test]
    fn training_overrides_preset() {
        let e = parse("[model]\npreset = \"ted8-small\"\n[training]\ntotal_steps = 7\nwarmup_steps = 1").unwrap();
        assert_eq!(e.training.total_steps, 7);
        assert_eq!(e.training.peak_lr, preset("ted8-small").unwrap().training.peak_lr);
    }

    #[test]
    fn invalid_values_name_their_section() {
        let err = parse("[model]\nallocation = \"0-2\"").unwrap_err();
        assert!(err.to_string().contains("model.allocation"));
        let err = parse("[corpus]\nmin_len = 9\nmax_len = 3").unwrap_err();
        assert!(err.to_string().contains("corpus"));
    }

    #[test]
    fn flags_override_file() {
        let file: ExperimentConfig = toml::from_str("seed = 4\nout = \"a\"").unwrap();
        let o = Overrides {
            seed: Some(9),
            out: Some("b".into()),
            method: Some(Method::Fam),
        };
        let e = Experiment::resolve(file, PathBuf::new(), &o).unwrap();
        assert_eq!((e.seed, e.out.as_path(), e.method), (9, Path::new("b"), Some(Method::Fam)));
        assert_eq!(e.label(), "6-2-FAM");
    }
}
