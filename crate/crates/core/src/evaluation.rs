//! Corpus BLEU with resource buckets, the one-sentence-at-a-time decoding
//! speed benchmark, and layer-allocation sweeps.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::assignment::Method;
use crate::data::{Split, SyntheticCorpus};
use crate::decoding::{strip_eos, translate, translate_batch_for_eval, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::{DemsdModel, LayerAllocation, ModelConfig, RoutingSpec};
use crate::training::{train, TrainOptions, TrainingConfig};
use crate::transformer::Dims;

pub const MAX_ORDER: usize = 4;

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Unsmoothed corpus BLEU in [0, 100] with one reference per hypothesis.
pub fn bleu<T: Hash + Eq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::EmptyInput("reference set"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Input(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matches.contains(&0) {
        return Ok(0.0);
    }
    let log_precision: f64 = (0..MAX_ORDER)
        .map(|i| (matches[i] as f64 / totals[i] as f64).ln())
        .sum::<f64>()
        / MAX_ORDER as f64;
    let brevity = if hyp_len > ref_len {
        0.0
    } else {
        1.0 - ref_len as f64 / hyp_len as f64
    };
    Ok(100.0 * (log_precision + brevity).exp())
}

/// BLEU over whitespace tokens of text lines.
pub fn bleu_text(hypotheses: &[String], references: &[String]) -> Result<f64> {
    let split = |v: &[String]| -> Vec<Vec<String>> {
        v.iter().map(|l| l.split_whitespace().map(str::to_string).collect()).collect()
    };
    bleu(&split(hypotheses), &split(references))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resource {
    High,
    Mid,
    Low,
}

/// Training-size thresholds, multiplied by `scale` before comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BucketThresholds {
    pub high: f64,
    pub low: f64,
    pub scale: f64,
}

impl Default for BucketThresholds {
    fn default() -> Self {
        Self {
            high: 1_000_000.0,
            low: 100_000.0,
            scale: 1.0,
        }
    }
}

impl BucketThresholds {
    /// `> high` is high, `(low, high]` mid, anything else low.
    pub fn classify(&self, pairs: u64) -> Resource {
        let p = pairs as f64;
        if p > self.high * self.scale {
            Resource::High
        } else if p > self.low * self.scale {
            Resource::Mid
        } else {
            Resource::Low
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionBleu {
    pub direction: String,
    pub bleu: f64,
    pub pairs: u64,
    pub bucket: Resource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub directions: Vec<DirectionBleu>,
    pub average: f64,
    pub high: Option<f64>,
    pub mid: Option<f64>,
    pub low: Option<f64>,
}

impl BleuReport {
    /// `(direction, bleu, training pairs)` entries, macro-averaged.
    pub fn new(entries: Vec<(String, f64, u64)>, thresholds: &BucketThresholds) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyInput("BLEU directions"));
        }
        let directions: Vec<DirectionBleu> = entries
            .into_iter()
            .map(|(direction, bleu, pairs)| DirectionBleu {
                direction,
                bleu,
                pairs,
                bucket: thresholds.classify(pairs),
            })
            .collect();
        let mean = |bucket: Option<Resource>| {
            let v: Vec<f64> = directions
                .iter()
                .filter(|d| bucket.is_none_or(|b| d.bucket == b))
                .map(|d| d.bleu)
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Ok(Self {
            average: mean(None).unwrap_or(0.0),
            high: mean(Some(Resource::High)),
            mid: mean(Some(Resource::Mid)),
            low: mean(Some(Resource::Low)),
            directions,
        })
    }
}

/// Decodes the split of every direction and scores it.
pub fn evaluate_bleu(
    model: &DemsdModel,
    corpus: &SyntheticCorpus,
    split: Split,
    decode: &DecodeConfig,
    thresholds: &BucketThresholds,
    limit: Option<usize>,
) -> Result<BleuReport> {
    let mut entries = Vec::new();
    for data in &corpus.directions {
        let pairs = data.split(split);
        let pairs = &pairs[..limit.unwrap_or(pairs.len()).min(pairs.len())];
        if pairs.is_empty() {
            continue;
        }
        let sources: Vec<Vec<usize>> = pairs.iter().map(|p| p.source.clone()).collect();
        let hyps: Vec<Vec<usize>> = translate_batch_for_eval(model, &sources, &data.direction.target, decode)?
            .iter()
            .map(|h| strip_eos(h).to_vec())
            .collect();
        let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.target.clone()).collect();
        entries.push((data.direction.name(), bleu(&hyps, &refs)?, data.direction.pairs as u64));
    }
    BleuReport::new(entries, thresholds)
}

static TIMING: Mutex<()> = Mutex::new(());

/// Where a timing ran.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub optimized: bool,
    pub threads: usize,
}

impl Fingerprint {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            optimized: !cfg!(debug_assertions),
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    pub tokens: usize,
    /// Median wall seconds of one timed pass.
    pub elapsed: f64,
    pub tokens_per_second: f64,
    pub warmup: usize,
    pub reps: usize,
    /// Seconds of every timed pass in order.
    pub samples: Vec<f64>,
    pub fingerprint: Fingerprint,
}

impl SpeedReport {
    pub fn speedup_over(&self, baseline: &SpeedReport) -> f64 {
        self.tokens_per_second / baseline.tokens_per_second
    }

    /// Relative spread of the timed passes around their median.
    pub fn spread(&self) -> f64 {
        let lo = self.samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.samples.iter().copied().fold(0.0, f64::max);
        (hi - lo) / self.elapsed
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times decoding of `sentences` one at a time on the calling thread.
/// Generated tokens include the terminal `</s>`.
pub fn measure_ds(
    model: &DemsdModel,
    sentences: &[Vec<usize>],
    language: &str,
    config: &DecodeConfig,
    warmup: usize,
    reps: usize,
) -> Result<SpeedReport> {
    if sentences.is_empty() {
        return Err(Error::EmptyInput("benchmark sentences"));
    }
    if warmup == 0 || reps == 0 {
        return Err(Error::Parameter("warmup and repetitions must be at least 1".into()));
    }
    let _guard = TIMING.try_lock().map_err(|_| Error::ExclusiveAccess)?;
    model.select_decoder(language)?;
    let run = || -> Result<usize> {
        let mut tokens = 0;
        for s in sentences {
            tokens += translate(model, s, language, config)?.len();
        }
        Ok(tokens)
    };
    let mut tokens = 0;
    for _ in 0..warmup {
        tokens = run()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let t = run()?;
        samples.push(start.elapsed().as_secs_f64());
        if t != tokens {
            return Err(Error::Numeric("decoding is not deterministic across passes"));
        }
    }
    let elapsed = median(&samples).max(f64::MIN_POSITIVE);
    Ok(SpeedReport {
        tokens,
        elapsed,
        tokens_per_second: tokens as f64 / elapsed,
        warmup,
        reps,
        samples,
        fingerprint: Fingerprint::current(),
    })
}

/// One configuration of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub label: String,
    /// Written `"X-Y"`.
    #[serde(with = "allocation_text")]
    pub allocation: LayerAllocation,
    /// `None` trains a single shared decoder.
    #[serde(default)]
    pub method: Option<Method>,
    #[serde(default = "one")]
    pub decoders: usize,
}

fn one() -> usize {
    1
}

mod allocation_text {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    use crate::model::LayerAllocation;

    pub fn serialize<S: Serializer>(a: &LayerAllocation, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(a)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<LayerAllocation, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

#[derive(Clone, Debug)]
pub struct SweepSettings {
    pub dims: Dims,
    pub training: TrainingConfig,
    pub decode: DecodeConfig,
    pub thresholds: BucketThresholds,
    /// Test sentences per direction used for BLEU; `None` is all.
    pub bleu_sentences: Option<usize>,
    /// Test sentences of the first direction used for speed.
    pub ds_sentences: usize,
    pub warmup: usize,
    pub reps: usize,
    /// Per-label checkpoint directories when set.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub encoder: usize,
    pub decoder: usize,
    pub method: String,
    pub decoders: usize,
    pub training_params: usize,
    pub inference_params: usize,
    pub bleu: BleuReport,
    pub valid_loss: f64,
    pub speed: SpeedReport,
    pub ds_relative: f64,
}

pub const CSV_HEADER: &str =
    "model-label,enc-layers,dec-layers,method,#Dec,#TP,#DP,BLEU,BLEU_H,BLEU_M,BLEU_L,DS-absolute,DS-relative";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"))
}

impl SweepRow {
    fn cells(&self) -> Vec<String> {
        vec![
            self.label.clone(),
            self.encoder.to_string(),
            self.decoder.to_string(),
            self.method.clone(),
            self.decoders.to_string(),
            self.training_params.to_string(),
            self.inference_params.to_string(),
            format!("{:.2}", self.bleu.average),
            cell(self.bleu.high),
            cell(self.bleu.mid),
            cell(self.bleu.low),
            format!("{:.1}", self.speed.tokens_per_second),
            format!("{:.2}", self.ds_relative),
        ]
    }
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        out.push_str(&r.cells().join(","));
        out.push('\n');
    }
    out
}

pub fn to_markdown(rows: &[SweepRow]) -> String {
    let header: Vec<&str> = CSV_HEADER.split(',').collect();
    let mut out = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.cells().join(" | "));
    }
    out
}

/// Rejects duplicate labels before any training starts.
pub fn check_labels(entries: &[SweepEntry]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for e in entries {
        if !seen.insert(e.label.as_str()) {
            return Err(Error::Config(format!("duplicate sweep label `{}`", e.label)));
        }
    }
    if entries.is_empty() {
        return Err(Error::Config("sweep has no configurations".into()));
    }
    Ok(())
}

/// Trains, scores and times every entry in declaration order; speed is
/// relative to the first entry. EMB entries cluster the language
/// embeddings of the most recent earlier entry.
pub fn sweep(entries: &[SweepEntry], corpus: &SyntheticCorpus, settings: &SweepSettings) -> Result<Vec<SweepRow>> {
    check_labels(entries)?;
    let targets = corpus.spec.target_metadata();
    let target_codes: Vec<String> = targets.iter().map(|m| m.code.clone()).collect();
    let bench_direction = corpus
        .directions
        .first()
        .ok_or(Error::EmptyInput("corpus directions"))?;
    let bench: Vec<Vec<usize>> = bench_direction
        .test
        .iter()
        .take(settings.ds_sentences)
        .map(|p| p.source.clone())
        .collect();
    let mut rows: Vec<SweepRow> = Vec::new();
    let mut last_embeddings: Option<BTreeMap<String, Vec<f64>>> = None;
    for entry in entries {
        let routing = RoutingSpec::build(
            entry.method,
            &targets,
            entry.decoders,
            settings.training.seed,
            last_embeddings.as_ref(),
        )?;
        let config = ModelConfig {
            vocab: corpus.vocab.len(),
            allocation: entry.allocation,
            dims: settings.dims,
        };
        let mut model = DemsdModel::new(config, &corpus.vocab, &target_codes, routing, settings.training.seed)?;
        let options = TrainOptions {
            out_dir: settings.out_dir.as_ref().map(|d| d.join(&entry.label)),
            resume: false,
            stop_after: None,
        };
        let outcome = train(&mut model, corpus, &settings.training, &options)?;
        let bleu = evaluate_bleu(&model, corpus, Split::Test, &settings.decode, &settings.thresholds, settings.bleu_sentences)?;
        let speed = measure_ds(
            &model,
            &bench,
            &bench_direction.direction.target,
            &settings.decode,
            settings.warmup,
            settings.reps,
        )?;
        let ds_relative = rows.first().map_or(1.0, |b| speed.speedup_over(&b.speed));
        let counts = model.count_parameters();
        last_embeddings = Some(model.language_embeddings());
        rows.push(SweepRow {
            label: entry.label.clone(),
            encoder: entry.allocation.encoder,
            decoder: entry.allocation.decoder,
            method: entry.method.map_or_else(|| "-".to_string(), |m| m.tag().to_string()),
            decoders: model.decoder_count(),
            training_params: counts.training,
            inference_params: counts.inference,
            bleu,
            valid_loss: outcome.best.valid_loss,
            speed,
            ds_relative,
        });
    }
    Ok(rows)
}
