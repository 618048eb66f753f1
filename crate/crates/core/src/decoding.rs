//! Greedy and beam-search generation through the single decoder selected for
//! the target language.

use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::DemsdModel;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Exponent α of the length normalization `logprob / len^α`.
    pub length_penalty: f64,
    /// Maximum generated tokens, end-of-sentence included.
    pub max_len: usize,
    /// End-of-sentence is not allowed before this many tokens.
    pub min_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 5,
            length_penalty: 1.0,
            max_len: 64,
            min_len: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Parameter("beam size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Parameter("max length must be at least 1".into()));
        }
        if !(self.length_penalty >= 0.0) {
            return Err(Error::Parameter("length penalty must be non-negative".into()));
        }
        Ok(())
    }
}

/// Ranking score `logprob / len^α`.
pub fn normalized_score(logprob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        logprob
    } else {
        logprob / (len.max(1) as f64).powf(alpha)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Generated tokens; ends with `</s>` iff finished.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    pub fn score(&self, alpha: f64) -> f64 {
        normalized_score(self.logprob, self.tokens.len(), alpha)
    }
}

/// Log-probabilities of a logit row with non-output tokens masked to −∞.
pub fn output_log_probs(model: &DemsdModel, logits: &[f32], generated: usize, config: &DecodeConfig) -> Vec<f64> {
    let max = logits.iter().map(|&x| x as f64).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
    let mut out: Vec<f64> = logits.iter().map(|&x| x as f64 - lse).collect();
    out[PAD] = f64::NEG_INFINITY;
    out[BOS] = f64::NEG_INFINITY;
    for &id in model.language_ids() {
        out[id] = f64::NEG_INFINITY;
    }
    if generated + 1 < config.min_len {
        out[EOS] = f64::NEG_INFINITY;
    }
    out
}

fn tagged_source(model: &DemsdModel, source: &[usize], language: &str) -> Result<Vec<usize>> {
    let mut s = vec![model.language_token(language)?];
    s.extend_from_slice(source);
    Ok(s)
}

/// Full beam result: every finished hypothesis plus the surviving beam.
///
/// Each step keeps the `beam` best open prefixes and retires every
/// end-of-sentence extension of the current beam into the finished pool.
/// `translate` uses plain argmax decoding for beam 1 instead.
pub fn beam_search(model: &DemsdModel, source: &[usize], language: &str, config: &DecodeConfig) -> Result<Vec<BeamHypothesis>> {
    config.validate()?;
    let decoder = model.select_decoder(language)?;
    let memory = model.encode(&[tagged_source(model, source, language)?])?;
    let mut state = model.start_decoding(decoder, &memory, &[0])?;
    let alpha = config.length_penalty;
    let mut active = vec![BeamHypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for step in 0..config.max_len {
        let last: Vec<usize> = active.iter().map(|h| *h.tokens.last().unwrap_or(&BOS)).collect();
        let logits = model.decode_step(decoder, &last, &memory, &mut state)?;
        let v = logits.last_dim();
        // (total, token logprob, hypothesis, token)
        let mut cands: Vec<(f64, f64, usize, usize)> = Vec::new();
        for (h, hyp) in active.iter().enumerate() {
            let lp = output_log_probs(model, &logits.data()[h * v..(h + 1) * v], step, config);
            for (t, &x) in lp.iter().enumerate() {
                if x.is_finite() {
                    cands.push((hyp.logprob + x, x, h, t));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(b.1.total_cmp(&a.1))
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        let mut next = Vec::new();
        let mut picks = Vec::new();
        // every end-of-sentence extension is kept; `beam` open prefixes survive
        for &(total, _, h, t) in &cands {
            if t != EOS && next.len() == config.beam {
                continue;
            }
            let mut tokens = active[h].tokens.clone();
            tokens.push(t);
            let hyp = BeamHypothesis {
                tokens,
                logprob: total,
                finished: t == EOS,
            };
            if t == EOS {
                finished.push(hyp);
            } else {
                next.push(hyp);
                picks.push(h);
            }
        }
        active = next;
        if active.is_empty() {
            break;
        }
        // no extension of an active prefix can score above lp / max_len^α
        if let Some(best) = finished.iter().map(|h| h.score(alpha)).max_by(f64::total_cmp) {
            let bound = active
                .iter()
                .map(|h| normalized_score(h.logprob, config.max_len, alpha))
                .fold(f64::NEG_INFINITY, f64::max);
            if best >= bound {
                break;
            }
        }
        if step + 1 < config.max_len {
            state.reorder(&picks);
        }
    }
    finished.extend(active);
    Ok(finished)
}

/// Highest-scoring finished hypothesis, or the best unfinished one when no
/// hypothesis finished within `max_len`.
pub fn pick_best(hyps: &[BeamHypothesis], alpha: f64) -> Option<&BeamHypothesis> {
    let best_of = |finished: bool| {
        hyps.iter()
            .filter(|h| h.finished == finished)
            .fold(None::<&BeamHypothesis>, |best, h| match best {
                Some(b) if b.score(alpha) >= h.score(alpha) => Some(b),
                _ => Some(h),
            })
    };
    best_of(true).or_else(|| best_of(false))
}

/// Translates one untagged source sentence into `language`.
pub fn translate(model: &DemsdModel, source: &[usize], language: &str, config: &DecodeConfig) -> Result<Vec<usize>> {
    if config.beam == 1 {
        config.validate()?;
        return greedy(model, source, language, config);
    }
    let hyps = beam_search(model, source, language, config)?;
    Ok(pick_best(&hyps, config.length_penalty).map(|h| h.tokens.clone()).unwrap_or_default())
}

/// Argmax decoding through the incremental cache.
pub fn greedy(model: &DemsdModel, source: &[usize], language: &str, config: &DecodeConfig) -> Result<Vec<usize>> {
    let decoder = model.select_decoder(language)?;
    let memory = model.encode(&[tagged_source(model, source, language)?])?;
    let mut state = model.start_decoding(decoder, &memory, &[0])?;
    let mut out = Vec::new();
    let mut last = BOS;
    for step in 0..config.max_len {
        let logits = model.decode_step(decoder, &[last], &memory, &mut state)?;
        last = argmax_allowed(&output_log_probs(model, logits.data(), step, config));
        out.push(last);
        if last == EOS {
            break;
        }
    }
    Ok(out)
}

/// Greedy decoding that re-runs the decoder over the whole prefix at every
/// step instead of using the cache.
pub fn greedy_recompute(model: &DemsdModel, source: &[usize], language: &str, config: &DecodeConfig) -> Result<Vec<usize>> {
    let decoder = model.select_decoder(language)?;
    let memory = model.encode(&[tagged_source(model, source, language)?])?;
    let mut prefix = vec![BOS];
    for step in 0..config.max_len {
        let logits: Tensor = model.decode_full(decoder, &memory, &[prefix.clone()])?;
        let t = argmax_allowed(&output_log_probs(model, logits.data(), step, config));
        prefix.push(t);
        if t == EOS {
            break;
        }
    }
    Ok(prefix[1..].to_vec())
}

fn argmax_allowed(lp: &[f64]) -> usize {
    let mut best = None;
    for (i, &x) in lp.iter().enumerate() {
        if x.is_finite() && best.is_none_or(|b: usize| x > lp[b]) {
            best = Some(i);
        }
    }
    best.unwrap_or(EOS)
}

/// Decodes sentences strictly one at a time, preserving order.
pub fn translate_batch_for_eval(model: &DemsdModel, sentences: &[Vec<usize>], language: &str, config: &DecodeConfig) -> Result<Vec<Vec<usize>>> {
    sentences.iter().map(|s| translate(model, s, language, config)).collect()
}

/// Drops a terminal `</s>`.
pub fn strip_eos(tokens: &[usize]) -> &[usize] {
    match tokens.last() {
        Some(&EOS) => &tokens[..tokens.len() - 1],
        _ => tokens,
    }
}
