//! Optimization loop: Adam with warmup + inverse-square-root decay, global
//! gradient clipping, temperature-sampled directions, validation-based
//! checkpoint selection and router temperature annealing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, DirectionSampler, SyntheticCorpus};
use crate::error::{Error, Result};
use crate::model::{read_tensor_file, restore_store, write_tensor_file, DemsdModel, TrainBatch};
use crate::numerics::{ParamStore, Tape, Tensor};
use crate::transformer::Dims;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAINER_STATE: &str = "trainer.state";
pub const TRAIN_LOG: &str = "train.log";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub label_smoothing: f64,
    /// Target tokens per batch, padding included.
    pub max_tokens: usize,
    pub sampling_temperature: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Validate every this many steps; 0 validates only after the last step.
    pub valid_interval: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            warmup_steps: 200,
            peak_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-6,
            label_smoothing: 0.1,
            max_tokens: 512,
            sampling_temperature: 5.0,
            clip_norm: 1.0,
            seed: 1,
            valid_interval: 200,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Parameter("total steps must be positive".into()));
        }
        if self.warmup_steps == 0 || self.warmup_steps > self.total_steps {
            return Err(Error::Parameter(format!(
                "warmup {} must be in 1..={}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Parameter("peak learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Parameter(format!("label smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Parameter("Adam betas must be in [0, 1) and epsilon positive".into()));
        }
        if !(self.sampling_temperature > 0.0) {
            return Err(Error::Parameter("sampling temperature must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Parameter("clip norm must be positive".into()));
        }
        Ok(())
    }
}

/// Named full-size recipes.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub dims: Dims,
    pub training: TrainingConfig,
}

pub fn preset(name: &str) -> Result<Preset> {
    let base = TrainingConfig::default();
    match name {
        "ml50-base" => Ok(Preset {
            name: "ml50-base",
            dims: Dims {
                model_dim: 512,
                heads: 8,
                ff_dim: 2048,
                dropout: 0.1,
            },
            training: TrainingConfig {
                total_steps: 100_000,
                warmup_steps: 4000,
                peak_lr: 1e-3,
                max_tokens: 64_000,
                valid_interval: 1000,
                ..base
            },
        }),
        "ted8-small" => Ok(Preset {
            name: "ted8-small",
            dims: Dims {
                model_dim: 512,
                heads: 4,
                ff_dim: 1024,
                dropout: 0.3,
            },
            training: TrainingConfig {
                total_steps: 40_000,
                warmup_steps: 4000,
                peak_lr: 2e-4,
                max_tokens: 16_000,
                valid_interval: 1000,
                ..base
            },
        }),
        "desk" => Ok(Preset {
            name: "desk",
            dims: Dims {
                model_dim: 64,
                heads: 2,
                ff_dim: 128,
                dropout: 0.1,
            },
            training: base,
        }),
        other => Err(Error::Config(format!("unknown preset `{other}`"))),
    }
}

/// Linear warmup to `peak` at `warmup`, then `peak · sqrt(warmup / step)`.
pub fn lr_schedule(step: usize, warmup: usize, peak: f64) -> Result<f64> {
    if warmup == 0 {
        return Err(Error::Parameter("warmup must be at least one step".into()));
    }
    if step == 0 {
        return Err(Error::Parameter("steps are counted from 1".into()));
    }
    Ok(if step <= warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (warmup as f64 / step as f64).sqrt()
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainingConfig> for AdamConfig {
    fn from(c: &TrainingConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
        }
    }
}

/// First and second moments plus per-parameter update counts.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub steps: Vec<u64>,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            steps: vec![0; store.len()],
            m: store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect(),
            v: store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect(),
        }
    }
}

/// Bias-corrected Adam. Parameters whose gradient is `None` took no part in
/// the step and are left untouched, moments included.
pub fn adam_step(store: &mut ParamStore, grads: &[Option<Vec<f32>>], state: &mut AdamState, cfg: AdamConfig, lr: f64) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::dim("adam_step", &[store.len()], &[grads.len(), state.m.len()]));
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, g) in ids.iter().zip(grads) {
        if let Some(g) = g {
            if g.len() != store.get(*id).len() {
                return Err(Error::dim("adam_step", store.get(*id).shape(), &[g.len()]));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence(store.name(*id).to_string()));
            }
        }
    }
    for (id, g) in ids.into_iter().zip(grads) {
        let Some(g) = g else { continue };
        let i = id.index();
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = store.get_mut(id).data_mut();
        for j in 0..g.len() {
            let gj = g[j] as f64;
            let mj = cfg.beta1 * m[j] as f64 + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j] as f64 + (1.0 - cfg.beta2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.epsilon);
            p[j] = (p[j] as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Option<Vec<f32>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Validation loss recorded at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: usize,
    pub valid_loss: f64,
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub tau: Option<f64>,
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        let mut s = format!("{}\t{:.6e}\t{:.6}\t{:.6}", self.step, self.lr, self.train_loss, self.valid_loss);
        if let Some(t) = self.tau {
            s.push_str(&format!("\t{t:.4}"));
        }
        s
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where checkpoints, trainer state and the log go; `None` keeps
    /// everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir`'s last checkpoint when present.
    pub resume: bool,
    /// Stop after this global step, leaving a resumable state behind.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: CheckpointRecord,
    pub records: Vec<CheckpointRecord>,
    pub log: Vec<LogRecord>,
    /// Last step executed.
    pub step: usize,
    /// Steps routed to each decoder during this call.
    pub decoder_steps: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Cursor {
    epoch: u64,
    position: usize,
}

#[derive(Serialize, Deserialize)]
struct TrainerHeader {
    step: usize,
    config: TrainingConfig,
    cursors: Vec<Cursor>,
    records: Vec<CheckpointRecord>,
    log: Vec<LogRecord>,
    interval_loss: (f64, usize),
    tau: Option<f64>,
    adam_steps: Vec<u64>,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random source for global step `step`; depends on nothing else.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, step as u64))
}

/// Token-weighted validation cross entropy, averaged over directions.
pub fn validation_loss(model: &DemsdModel, corpus: &SyntheticCorpus, config: &TrainingConfig) -> Result<f64> {
    let mut per_direction = Vec::new();
    for (d, data) in corpus.directions.iter().enumerate() {
        let batches = make_batches(&data.valid, &data.direction.name(), config.max_tokens, mix(config.seed, 1000 + d as u64))?;
        let (mut total, mut tokens) = (0.0, 0usize);
        for b in &batches {
            let pairs: Vec<_> = b.iter().map(|&i| &data.valid[i]).collect();
            let batch = TrainBatch::new(&pairs, &data.direction.target, &corpus.vocab)?;
            let mut tape = Tape::inference(model.params());
            let out = model.forward_train(&mut tape, &batch, config.label_smoothing, None)?;
            let n = batch.target_tokens();
            total += tape.value(out.cross_entropy).item() as f64 * n as f64;
            tokens += n;
        }
        per_direction.push(total / tokens.max(1) as f64);
    }
    Ok(per_direction.iter().sum::<f64>() / per_direction.len() as f64)
}

/// Trains `model` on `corpus`; on return the model holds the parameters of
/// the best validation checkpoint.
pub fn train(model: &mut DemsdModel, corpus: &SyntheticCorpus, config: &TrainingConfig, options: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if model.config().vocab != corpus.vocab.len() {
        return Err(Error::Vocabulary(format!(
            "model vocabulary {} differs from corpus vocabulary {}",
            model.config().vocab,
            corpus.vocab.len()
        )));
    }
    for d in &corpus.directions {
        model.language_token(&d.direction.target)?;
    }
    let names: Vec<String> = corpus.directions.iter().map(|d| d.direction.name()).collect();
    let counts: Vec<usize> = corpus.directions.iter().map(|d| d.train.len()).collect();
    let sampler = DirectionSampler::new(&counts, config.sampling_temperature)?;
    let epoch_batches = |d: usize, epoch: u64| {
        make_batches(&corpus.directions[d].train, &names[d], config.max_tokens, mix(mix(config.seed, d as u64), epoch))
    };
    // fail fast on oversize pairs
    for d in 0..names.len() {
        epoch_batches(d, 0)?;
    }

    let mut adam = AdamState::new(model.params());
    let mut cursors = vec![Cursor::default(); names.len()];
    let mut records: Vec<CheckpointRecord> = Vec::new();
    let mut log: Vec<LogRecord> = Vec::new();
    let mut interval_loss = (0.0f64, 0usize);
    let mut best_params: Option<ParamStore> = None;
    let mut step = 0;

    if let (true, Some(dir)) = (options.resume, options.out_dir.as_ref()) {
        let state_path = dir.join(TRAINER_STATE);
        if state_path.exists() {
            let (header, tensors): (TrainerHeader, Vec<(String, Tensor)>) = read_tensor_file(&state_path)?;
            if header.config != *config {
                return Err(Error::Config("training config differs from the interrupted run".into()));
            }
            let last = DemsdModel::load(&dir.join(LAST_CHECKPOINT))?;
            *model.params_mut() = last.params().clone();
            if let (Some(r), Some(tau)) = (model.router_mut(), header.tau) {
                r.set_tau(tau)?;
            }
            let mut by_name: BTreeMap<String, Tensor> = tensors.into_iter().collect();
            let template = model.params().clone();
            for (id, name, _) in template.iter() {
                let i = id.index();
                let take = |key: String, by_name: &mut BTreeMap<String, Tensor>| {
                    by_name
                        .remove(&key)
                        .ok_or_else(|| Error::format(&state_path, format!("missing `{key}`")))
                };
                adam.m[i] = take(format!("m.{name}"), &mut by_name)?.into_data();
                adam.v[i] = take(format!("v.{name}"), &mut by_name)?.into_data();
            }
            adam.steps = header.adam_steps;
            let best: Vec<(String, Tensor)> = by_name
                .into_iter()
                .filter_map(|(k, t)| k.strip_prefix("best.").map(|n| (n.to_string(), t)))
                .collect();
            if !best.is_empty() {
                best_params = Some(restore_store(model.params(), best, &state_path)?);
            }
            step = header.step;
            cursors = header.cursors;
            records = header.records;
            log = header.log;
            interval_loss = header.interval_loss;
        }
    }
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut current: Vec<Option<(u64, Vec<Vec<usize>>)>> = vec![None; names.len()];
    let mut decoder_steps = vec![0usize; model.decoder_count()];
    let adam_cfg = AdamConfig::from(config);
    let stop = options.stop_after.unwrap_or(config.total_steps).min(config.total_steps);

    while step < stop {
        step += 1;
        let mut rng = step_rng(config.seed, step);
        let d = sampler.sample(&mut rng);
        let cursor = &mut cursors[d];
        if current[d].as_ref().is_none_or(|(e, _)| *e != cursor.epoch) {
            current[d] = Some((cursor.epoch, epoch_batches(d, cursor.epoch)?));
        }
        let (_, batches) = current[d].as_ref().expect("batches loaded");
        let indices = &batches[cursor.position];
        cursor.position += 1;
        if cursor.position == batches.len() {
            cursor.position = 0;
            cursor.epoch += 1;
        }
        let data = &corpus.directions[d];
        let pairs: Vec<_> = indices.iter().map(|&i| &data.train[i]).collect();
        let batch = TrainBatch::new(&pairs, &data.direction.target, &corpus.vocab)?;

        let (loss, grads, decoder) = {
            let mut tape = Tape::new(model.params());
            let out = model.forward_train(&mut tape, &batch, config.label_smoothing, Some(&mut rng))?;
            let loss = tape.value(out.loss).item() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    direction: names[d].clone(),
                });
            }
            (loss, tape.backward(out.loss)?.into_param_grads(), out.decoder)
        };
        decoder_steps[decoder] += 1;
        let mut grads = grads;
        clip_global_norm(&mut grads, config.clip_norm);
        let lr = lr_schedule(step, config.warmup_steps, config.peak_lr)?;
        adam_step(model.params_mut(), &grads, &mut adam, adam_cfg, lr)?;
        if let Some(r) = model.router_mut() {
            r.anneal(step, config.total_steps)?;
        }
        interval_loss.0 += loss;
        interval_loss.1 += 1;

        let at_interval = config.valid_interval > 0 && step % config.valid_interval == 0;
        if at_interval || step == config.total_steps {
            let valid_loss = validation_loss(model, corpus, config)?;
            let path = options.out_dir.as_ref().map(|d| d.join(BEST_CHECKPOINT));
            let tau = match model.routing() {
                crate::model::Routing::Router(r) => Some(r.tau()),
                crate::model::Routing::Fixed(_) => None,
            };
            let record = LogRecord {
                step,
                lr,
                train_loss: interval_loss.0 / interval_loss.1.max(1) as f64,
                valid_loss,
                tau,
            };
            interval_loss = (0.0, 0);
            if let Some(dir) = &options.out_dir {
                let p = dir.join(TRAIN_LOG);
                let mut f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(|e| Error::io(&p, e))?;
                writeln!(f, "{}", record.to_line()).map_err(|e| Error::io(&p, e))?;
            }
            log.push(record);
            let improved = records.iter().all(|r| valid_loss < r.valid_loss);
            records.push(CheckpointRecord { step, valid_loss, path: path.clone() });
            if improved {
                best_params = Some(model.params().clone());
                if let Some(p) = &path {
                    model.save(p)?;
                }
            }
            if let Some(dir) = &options.out_dir {
                save_state(dir, model, config, &adam, step, &cursors, &records, &log, interval_loss, best_params.as_ref())?;
            }
        }
    }
    if step < config.total_steps {
        if let Some(dir) = &options.out_dir {
            save_state(dir, model, config, &adam, step, &cursors, &records, &log, interval_loss, best_params.as_ref())?;
        }
    }

    let best = records
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.valid_loss.total_cmp(&b.1.valid_loss).then(a.0.cmp(&b.0)))
        .map(|(_, r)| r.clone())
        .unwrap_or(CheckpointRecord {
            step,
            valid_loss: f64::NAN,
            path: None,
        });
    if step == config.total_steps {
        if let Some(p) = best_params {
            *model.params_mut() = p;
        }
    }
    Ok(TrainOutcome {
        best,
        records,
        log,
        step,
        decoder_steps,
    })
}

#[allow(clippy::too_many_arguments)]
fn save_state(
    dir: &Path,
    model: &DemsdModel,
    config: &TrainingConfig,
    adam: &AdamState,
    step: usize,
    cursors: &[Cursor],
    records: &[CheckpointRecord],
    log: &[LogRecord],
    interval_loss: (f64, usize),
    best: Option<&ParamStore>,
) -> Result<()> {
    model.save(&dir.join(LAST_CHECKPOINT))?;
    let tau = match model.routing() {
        crate::model::Routing::Router(r) => Some(r.tau()),
        crate::model::Routing::Fixed(_) => None,
    };
    let header = TrainerHeader {
        step,
        config: config.clone(),
        cursors: cursors.to_vec(),
        records: records.to_vec(),
        log: log.to_vec(),
        interval_loss,
        tau,
        adam_steps: adam.steps.clone(),
    };
    let mut owned: Vec<(String, Tensor)> = Vec::new();
    for (id, name, t) in model.params().iter() {
        let i = id.index();
        owned.push((format!("m.{name}"), Tensor::new(t.shape().to_vec(), adam.m[i].clone())?));
        owned.push((format!("v.{name}"), Tensor::new(t.shape().to_vec(), adam.v[i].clone())?));
    }
    if let Some(b) = best {
        for (_, name, t) in b.iter() {
            owned.push((format!("best.{name}"), t.clone()));
        }
    }
    let refs: Vec<(&str, &Tensor)> = owned.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_tensor_file(&dir.join(TRAINER_STATE), &header, &refs)
}
