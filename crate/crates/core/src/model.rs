//! DESD and DEMSD model assembly: shared embeddings and encoder, one or more
//! shallow decoders, and routing by a fixed map or a learned router.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign_by_embedding, assign_each, assign_family, assign_random, AssignmentMap, LanguageMetadata, Method, RouterState};
use crate::data::{Pair, Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::transformer::{DecoderStack, Dims, EncoderStack, IncrementalState, Memory, Mode, TokenBatch, TokenEmbedding};

const MAGIC: &[u8; 8] = b"DEMSDTNS";
const FORMAT_VERSION: u32 = 1;

/// Encoder and decoder depths, written `X-Y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerAllocation {
    pub encoder: usize,
    pub decoder: usize,
}

impl LayerAllocation {
    pub fn new(encoder: usize, decoder: usize) -> Result<Self> {
        if encoder == 0 || decoder == 0 {
            return Err(Error::Parameter(format!("layer counts must be at least 1, got {encoder}-{decoder}")));
        }
        Ok(Self { encoder, decoder })
    }
}

impl fmt::Display for LayerAllocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.encoder, self.decoder)
    }
}

impl FromStr for LayerAllocation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parameter(format!("layer allocation `{s}` is not of the form X-Y"));
        let (e, d) = s.split_once('-').ok_or_else(bad)?;
        Self::new(e.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub allocation: LayerAllocation,
    pub dims: Dims,
}

/// How target languages reach decoders.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Routing {
    Fixed(AssignmentMap),
    Router(RouterState),
}

/// Requested routing when building a fresh model.
#[derive(Clone, Debug)]
pub enum RoutingSpec {
    Fixed(AssignmentMap),
    /// Learned router over this many decoders.
    Router(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCountReport {
    /// `#TP`: every trainable scalar, all decoders and the router included.
    pub training: usize,
    /// `#DP`: embeddings, encoder and a single decoder.
    pub inference: usize,
    /// `#Dec`.
    pub decoders: usize,
}

/// One homogeneous training batch: all pairs translate into `language`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub language: String,
    /// `<2xx>` followed by the source tokens.
    pub source: TokenBatch,
    /// `<s>` followed by the target tokens.
    pub target_in: TokenBatch,
    /// Target tokens followed by `</s>`, padded, flattened `[batch * len]`.
    pub target_out: Vec<usize>,
}

impl TrainBatch {
    pub fn new(pairs: &[&Pair], language: &str, vocab: &Vocabulary) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let sources: Vec<Vec<usize>> = pairs
            .iter()
            .map(|p| prepend_language_token(&p.source, language, vocab))
            .collect::<Result<_>>()?;
        let inputs: Vec<Vec<usize>> = pairs.iter().map(|p| [&[BOS][..], &p.target].concat()).collect();
        let outputs: Vec<Vec<usize>> = pairs.iter().map(|p| [&p.target[..], &[EOS]].concat()).collect();
        let target_in = TokenBatch::from_rows(&inputs, PAD);
        let target_out = TokenBatch::from_rows(&outputs, PAD).ids;
        Ok(Self {
            language: language.to_string(),
            source: TokenBatch::from_rows(&sources, PAD),
            target_in,
            target_out,
        })
    }

    pub fn target_tokens(&self) -> usize {
        self.target_out.iter().filter(|&&t| t != PAD).count()
    }
}

/// `[<2xx>, tokens...]`.
pub fn prepend_language_token(tokens: &[usize], language: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let id = vocab.language_id(language)?;
    let mut out = Vec::with_capacity(tokens.len() + 1);
    out.push(id);
    out.extend_from_slice(tokens);
    Ok(out)
}

impl RoutingSpec {
    /// Routing for `method` over the target languages; `None` is a single
    /// shared decoder. EMB needs language embeddings from a trained model.
    pub fn build(
        method: Option<Method>,
        targets: &[LanguageMetadata],
        decoders: usize,
        seed: u64,
        embeddings: Option<&BTreeMap<String, Vec<f64>>>,
    ) -> Result<Self> {
        let codes: Vec<String> = targets.iter().map(|m| m.code.clone()).collect();
        Ok(match method {
            None => RoutingSpec::Fixed(AssignmentMap::single(&codes)?),
            Some(Method::Each) => RoutingSpec::Fixed(assign_each(&codes)?),
            Some(Method::Rand) => RoutingSpec::Fixed(assign_random(&codes, decoders, seed)?),
            Some(Method::Fam) => RoutingSpec::Fixed(assign_family(targets)?),
            Some(Method::Emb) => {
                let all = embeddings.ok_or_else(|| {
                    Error::Dependency("EMB assignment needs language embeddings from a trained checkpoint".into())
                })?;
                let chosen = codes
                    .iter()
                    .map(|c| {
                        all.get(c)
                            .map(|v| (c.clone(), v.clone()))
                            .ok_or_else(|| Error::UnknownLanguage(c.clone()))
                    })
                    .collect::<Result<BTreeMap<_, _>>>()?;
                RoutingSpec::Fixed(assign_by_embedding(&chosen, decoders, seed)?)
            }
            Some(Method::St) => RoutingSpec::Router(decoders),
        })
    }
}

/// Result of one training forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TrainOutput {
    /// Objective to differentiate.
    pub loss: Var,
    /// Label-smoothed cross entropy of the decoder that ran.
    pub cross_entropy: Var,
    pub decoder: usize,
}

pub struct DemsdModel {
    config: ModelConfig,
    params: ParamStore,
    embed: TokenEmbedding,
    encoder: EncoderStack,
    decoders: Vec<DecoderStack>,
    routing: Routing,
    /// Target language to its `<2xx>` id.
    languages: BTreeMap<String, usize>,
    /// Every `<2xx>` id in the vocabulary, targets or not.
    language_ids: Vec<usize>,
    decoder_steps: Vec<AtomicU64>,
}

impl fmt::Debug for DemsdModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DemsdModel")
            .field("allocation", &self.config.allocation.to_string())
            .field("decoders", &self.decoders.len())
            .field("params", &self.params.total())
            .finish()
    }
}

impl Clone for DemsdModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            embed: self.embed,
            encoder: self.encoder.clone(),
            decoders: self.decoders.clone(),
            routing: self.routing.clone(),
            languages: self.languages.clone(),
            language_ids: self.language_ids.clone(),
            decoder_steps: self.decoder_steps.iter().map(|c| AtomicU64::new(c.load(Ordering::Relaxed))).collect(),
        }
    }
}

impl DemsdModel {
    /// Builds a freshly initialized model for the given target languages.
    pub fn new(config: ModelConfig, vocab: &Vocabulary, targets: &[String], routing: RoutingSpec, seed: u64) -> Result<Self> {
        if config.vocab != vocab.len() {
            return Err(Error::Vocabulary(format!(
                "model vocabulary {} differs from corpus vocabulary {}",
                config.vocab,
                vocab.len()
            )));
        }
        LayerAllocation::new(config.allocation.encoder, config.allocation.decoder)?;
        let languages: BTreeMap<String, usize> = targets
            .iter()
            .map(|l| Ok((l.clone(), vocab.language_id(l)?)))
            .collect::<Result<_>>()?;
        if languages.is_empty() {
            return Err(Error::Input("model needs at least one target language".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let dims = config.dims;
        let embed = TokenEmbedding::new(&mut params, "embed", config.vocab, dims.model_dim, &mut rng)?;
        let encoder = EncoderStack::new(&mut params, "encoder", config.allocation.encoder, dims, &mut rng)?;
        let n = match &routing {
            RoutingSpec::Fixed(map) => {
                if let Some(missing) = languages.keys().find(|l| map.decoder(l).is_err()) {
                    return Err(Error::UnknownLanguage(missing.clone()));
                }
                map.decoders()
            }
            RoutingSpec::Router(n) => *n,
        };
        if n == 0 {
            return Err(Error::Parameter("model needs at least one decoder".into()));
        }
        let decoders = (0..n)
            .map(|i| DecoderStack::new(&mut params, &format!("decoder.{i}"), config.allocation.decoder, dims, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let routing = match routing {
            RoutingSpec::Fixed(map) => Routing::Fixed(map),
            RoutingSpec::Router(n) => Routing::Router(RouterState::new(&mut params, embed.table, languages.clone(), n, &mut rng)?),
        };
        Ok(Self {
            config,
            params,
            embed,
            encoder,
            decoder_steps: (0..decoders.len()).map(|_| AtomicU64::new(0)).collect(),
            decoders,
            routing,
            languages,
            language_ids: (0..vocab.len()).filter(|&i| vocab.is_language_id(i)).collect(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn allocation(&self) -> LayerAllocation {
        self.config.allocation
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embedding(&self) -> &TokenEmbedding {
        &self.embed
    }

    pub fn encoder(&self) -> &EncoderStack {
        &self.encoder
    }

    pub fn decoder(&self, index: usize) -> &DecoderStack {
        &self.decoders[index]
    }

    pub fn decoder_count(&self) -> usize {
        self.decoders.len()
    }

    pub fn routing(&self) -> &Routing {
        &self.routing
    }

    pub fn router_mut(&mut self) -> Option<&mut RouterState> {
        match &mut self.routing {
            Routing::Router(r) => Some(r),
            Routing::Fixed(_) => None,
        }
    }

    pub fn target_languages(&self) -> impl Iterator<Item = &str> {
        self.languages.keys().map(String::as_str)
    }

    /// Ids of all language tokens; never produced by decoding.
    pub fn language_ids(&self) -> &[usize] {
        &self.language_ids
    }

    pub fn language_token(&self, language: &str) -> Result<usize> {
        self.languages
            .get(language)
            .copied()
            .ok_or_else(|| Error::UnknownLanguage(language.to_string()))
    }

    /// Parameters owned by decoder `index`.
    pub fn decoder_param_ids(&self, index: usize) -> Vec<ParamId> {
        self.decoders[index].param_ids()
    }

    /// Decoder that serves `language` at inference time.
    pub fn select_decoder(&self, language: &str) -> Result<usize> {
        self.language_token(language)?;
        match &self.routing {
            Routing::Fixed(map) => map.decoder(language),
            Routing::Router(r) => r.select(&self.params, language),
        }
    }

    pub fn count_parameters(&self) -> ParameterCountReport {
        let training = self.params.total();
        let router = match &self.routing {
            Routing::Router(r) => self.params.count(r.param_ids()),
            Routing::Fixed(_) => 0,
        };
        let per_decoder = self.params.count(self.decoders[0].param_ids());
        ParameterCountReport {
            training,
            inference: training - router - (self.decoders.len() - 1) * per_decoder,
            decoders: self.decoders.len(),
        }
    }

    /// Rows of the embedding table for each target language's token.
    pub fn language_embeddings(&self) -> BTreeMap<String, Vec<f64>> {
        let table = self.params.get(self.embed.table);
        let d = table.last_dim();
        self.languages
            .iter()
            .map(|(l, &id)| (l.clone(), table.data()[id * d..(id + 1) * d].iter().map(|&x| x as f64).collect()))
            .collect()
    }

    /// Loss of `batch` on `tape`. With `rng`, dropout is active and the router
    /// draws a straight-through sample; without it, evaluation mode routes to
    /// [`Self::select_decoder`].
    pub fn forward_train(&self, tape: &mut Tape<'_>, batch: &TrainBatch, smoothing: f64, rng: Option<&mut ChaCha8Rng>) -> Result<TrainOutput> {
        self.language_token(&batch.language)?;
        if batch.source.batch != batch.target_in.batch {
            return Err(Error::dim("forward_train", &[batch.source.batch], &[batch.target_in.batch]));
        }
        let mut rng = rng;
        let (decoder, gate) = match (&self.routing, rng.as_deref_mut()) {
            (Routing::Router(r), Some(rng)) => {
                let (hard, k) = r.straight_through_sample(tape, &batch.language, rng)?;
                (k, Some(tape.index(hard, k)?))
            }
            _ => (self.select_decoder(&batch.language)?, None),
        };
        let mut mode = match rng {
            Some(r) => Mode::Train(r),
            None => Mode::Eval,
        };
        let memory = self.encoder.encode(tape, &self.embed, &batch.source, &mut mode)?;
        let logits = self.decoders[decoder].decode_train(tape, &self.embed, &batch.target_in, memory, &batch.source.valid, &mut mode)?;
        let ce = tape.cross_entropy(logits, &batch.target_out, smoothing, PAD)?;
        self.decoder_steps[decoder].fetch_add(1, Ordering::Relaxed);
        let loss = match gate {
            Some(g) => tape.mul(g, ce)?,
            None => ce,
        };
        Ok(TrainOutput {
            loss,
            cross_entropy: ce,
            decoder,
        })
    }

    /// Per-sentence `log p_n(y|x)` for every decoder `n`, unsmoothed, no dropout.
    pub fn sentence_log_likelihoods(&self, batch: &TrainBatch) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::inference(&self.params);
        let memory = self.encoder.encode(&mut tape, &self.embed, &batch.source, &mut Mode::Eval)?;
        let (b, t, v) = (batch.target_in.batch, batch.target_in.len, self.config.vocab);
        let mut out = vec![vec![0.0; self.decoders.len()]; b];
        for (n, dec) in self.decoders.iter().enumerate() {
            let logits = dec.decode_train(&mut tape, &self.embed, &batch.target_in, memory, &batch.source.valid, &mut Mode::Eval)?;
            let data = tape.value(logits).data();
            for (row, slot) in out.iter_mut().enumerate() {
                let mut lp = 0.0;
                for pos in 0..t {
                    let gold = batch.target_out[row * t + pos];
                    if gold == PAD {
                        continue;
                    }
                    let logits = &data[(row * t + pos) * v..(row * t + pos + 1) * v];
                    let max = logits.iter().map(|&x| x as f64).fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + logits.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
                    lp += logits[gold] as f64 - lse;
                }
                slot[n] = lp;
            }
        }
        Ok(out)
    }

    /// Routing distribution `p(n | L_e)`: one-hot for fixed maps.
    pub fn routing_probs(&self, language: &str) -> Result<Vec<f64>> {
        match &self.routing {
            Routing::Fixed(map) => {
                let mut p = vec![0.0; self.decoders.len()];
                p[map.decoder(language)?] = 1.0;
                Ok(p)
            }
            Routing::Router(r) => r.probs(&self.params, language),
        }
    }

    /// Exact mixture likelihood `−log Σ_n p(n|L_e) p_n(y|x)`, summed over the
    /// batch's sentences.
    pub fn forward_mixture(&self, batch: &TrainBatch) -> Result<f64> {
        let probs = self.routing_probs(&batch.language)?;
        let ll = self.sentence_log_likelihoods(batch)?;
        Ok(ll
            .iter()
            .map(|row| {
                let terms: Vec<f64> = row.iter().zip(&probs).filter(|(_, &p)| p > 0.0).map(|(l, p)| l + p.ln()).collect();
                let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                -(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
            })
            .sum())
    }

    /// Encoder pass for inference over padded source rows (already tagged).
    pub fn encode(&self, sources: &[Vec<usize>]) -> Result<Memory> {
        let batch = TokenBatch::from_rows(sources, PAD);
        let mut tape = Tape::inference(&self.params);
        let m = self.encoder.encode(&mut tape, &self.embed, &batch, &mut Mode::Eval)?;
        Ok(Memory {
            states: tape.value(m).clone(),
            valid: batch.valid,
        })
    }

    pub fn start_decoding(&self, decoder: usize, memory: &Memory, sources: &[usize]) -> Result<IncrementalState> {
        self.decoders[decoder].start(&self.params, memory, sources)
    }

    /// One incremental step on decoder `decoder`; counted by
    /// [`Self::decoder_step_counts`].
    pub fn decode_step(&self, decoder: usize, last: &[usize], memory: &Memory, state: &mut IncrementalState) -> Result<Tensor> {
        self.decoder_steps[decoder].fetch_add(1, Ordering::Relaxed);
        self.decoders[decoder].decode_step(&self.params, &self.embed, last, memory, state)
    }

    /// Full-recompute logits of the last position for each prefix row.
    pub fn decode_full(&self, decoder: usize, memory: &Memory, prefixes: &[Vec<usize>]) -> Result<Tensor> {
        self.decoder_steps[decoder].fetch_add(1, Ordering::Relaxed);
        let mut tape = Tape::inference(&self.params);
        let m = tape.constant(memory.states.clone());
        let tgt = TokenBatch::from_rows(prefixes, PAD);
        let logits = self.decoders[decoder].decode_train(&mut tape, &self.embed, &tgt, m, &memory.valid, &mut Mode::Eval)?;
        let v = self.config.vocab;
        let data = tape.value(logits).data();
        let mut out = Vec::with_capacity(prefixes.len() * v);
        for (r, p) in prefixes.iter().enumerate() {
            let at = (r * tgt.len + p.len() - 1) * v;
            out.extend_from_slice(&data[at..at + v]);
        }
        Tensor::new(vec![prefixes.len(), v], out)
    }

    /// Training and decoding calls that reached each decoder.
    pub fn decoder_step_counts(&self) -> Vec<u64> {
        self.decoder_steps.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn reset_counters(&self) {
        for c in &self.decoder_steps {
            c.store(0, Ordering::Relaxed);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            languages: self.languages.clone(),
            routing: self.routing.clone(),
            language_ids: self.language_ids.clone(),
        };
        let tensors: Vec<(&str, &Tensor)> = self.params.iter().map(|(_, n, t)| (n, t)).collect();
        write_tensor_file(path, &header, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors): (CheckpointHeader, _) = read_tensor_file(path)?;
        let mut model = Self::skeleton(header)?;
        model.params = restore_store(&model.params, tensors, path)?;
        Ok(model)
    }

    /// Same structure as a saved model, values from fresh initialization.
    fn skeleton(header: CheckpointHeader) -> Result<Self> {
        let tokens: Vec<String> = vocab_stub(header.config.vocab, &header.languages)?;
        let vocab = Vocabulary::from_tokens(tokens)?;
        let targets: Vec<String> = header.languages.keys().cloned().collect();
        let spec = match &header.routing {
            Routing::Fixed(map) => RoutingSpec::Fixed(map.clone()),
            Routing::Router(r) => RoutingSpec::Router(r.decoders()),
        };
        let mut model = Self::new(header.config, &vocab, &targets, spec, 0)?;
        model.languages = header.languages;
        model.language_ids = header.language_ids;
        if let Routing::Router(mut r) = header.routing {
            r.attach(&model.params, model.embed.table)?;
            model.routing = Routing::Router(r);
        }
        Ok(model)
    }
}

/// Placeholder vocabulary that reserves the saved language ids.
fn vocab_stub(size: usize, languages: &BTreeMap<String, usize>) -> Result<Vec<String>> {
    let mut tokens: Vec<String> = ["<pad>", "<s>", "</s>", "<unk>"].iter().map(|s| s.to_string()).collect();
    tokens.extend((4..size).map(|i| format!("#{i}")));
    for (lang, &id) in languages {
        if id >= size || id < 4 {
            return Err(Error::Vocabulary(format!("language id {id} for `{lang}` outside vocabulary")));
        }
        tokens[id] = crate::data::language_token(lang);
    }
    Ok(tokens)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    languages: BTreeMap<String, usize>,
    routing: Routing,
    language_ids: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest<H> {
    version: u32,
    header: H,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f32 elements from the start of the data section.
    offset: usize,
}

/// Writes magic, version, manifest length, JSON manifest, then raw
/// little-endian f32 data for `tensors` in order.
pub fn write_tensor_file<H: Serialize>(path: &Path, header: &H, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let manifest = Manifest {
        version: FORMAT_VERSION,
        header,
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = Vec::with_capacity(20 + json.len() + offset * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in tensors {
        for &x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file<H: for<'de> Deserialize<'de>>(path: &Path) -> Result<(H, Vec<(String, Tensor)>)> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if buf.len() < 20 || &buf[..8] != MAGIC {
        return Err(Error::format(path, "not a tensor file"));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes")) as usize;
    let json = buf.get(20..20 + len).ok_or_else(|| Error::format(path, "truncated manifest"))?;
    let manifest: Manifest<H> = serde_json::from_slice(json).map_err(|e| Error::format(path, e.to_string()))?;
    let data = &buf[20 + len..];
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let bytes = data
            .get(e.offset * 4..(e.offset + n) * 4)
            .ok_or_else(|| Error::format(path, format!("tensor `{}` truncated", e.name)))?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((e.name, Tensor::new(e.shape, values)?));
    }
    Ok((manifest.header, out))
}

/// Replaces every tensor of `template` by the same-named loaded tensor.
pub fn restore_store(template: &ParamStore, tensors: Vec<(String, Tensor)>, path: &Path) -> Result<ParamStore> {
    let mut by_name: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let mut store = ParamStore::new();
    for (_, name, t) in template.iter() {
        let loaded = by_name
            .remove(name)
            .ok_or_else(|| Error::format(path, format!("missing tensor `{name}`")))?;
        if loaded.shape() != t.shape() {
            return Err(Error::format(path, format!("tensor `{name}` has shape {:?}, expected {:?}", loaded.shape(), t.shape())));
        }
        store.add(name, loaded)?;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::format(path, format!("unexpected tensor `{extra}`")));
    }
    Ok(store)
}
