//! Synthetic multilingual corpora, shared vocabulary, batching and
//! temperature-based direction sampling.
//!
//! The pivot language emits random Zipf-distributed word sequences. Every
//! other language is a deterministic cipher of the pivot: a word permutation
//! combined with one structural transform chosen by its family (plain
//! substitution, word-order reversal, or affix insertion). Languages of a
//! family share most of their permutation table; different families share
//! none of it.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::assignment::LanguageMetadata;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Swap probability for each adjacent pair of a family's base permutation.
const SWAP_PROB: f64 = 0.25;
const AFFIX_EVERY: usize = 3;

/// Vocabulary file name inside a corpus directory.
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Token strings and ids; ids are line numbers of the vocabulary file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Vocabulary(format!("id {i} must be `{s}`")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Vocabulary(format!("token {i} `{t}` is empty or contains whitespace")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Specials, then one `<2xx>` per language, then `words` word tokens and
    /// `affixes` affix tokens.
    pub fn build(languages: &[String], words: usize, affixes: usize) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(languages.iter().map(|l| language_token(l)));
        tokens.extend((0..words).map(|i| format!("w{i}")));
        tokens.extend((0..affixes).map(|i| format!("~a{i}")));
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of `<2xx>` for `language`.
    pub fn language_id(&self, language: &str) -> Result<usize> {
        self.id(&language_token(language))
            .ok_or_else(|| Error::Vocabulary(format!("no reserved token for language `{language}`")))
    }

    pub fn is_language_id(&self, id: usize) -> bool {
        self.token(id).is_some_and(|t| t.starts_with("<2") && t.ends_with('>'))
    }

    /// Whitespace split; out-of-vocabulary tokens become `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

pub fn language_token(language: &str) -> String {
    format!("<2{language}>")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Pivot source, many targets.
    #[serde(rename = "o2m")]
    O2m,
    /// Many sources, pivot target.
    #[serde(rename = "m2o")]
    M2o,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::O2m => "o2m",
            Mode::M2o => "m2o",
        })
    }
}

/// Structural part of a cipher, fixed per family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Substitute,
    Reverse,
    Affix,
}

impl TransformKind {
    pub fn for_family(family: usize) -> Self {
        match family % 3 {
            0 => TransformKind::Substitute,
            1 => TransformKind::Reverse,
            _ => TransformKind::Affix,
        }
    }
}

/// One non-pivot language of a corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub code: String,
    pub family: usize,
    pub train: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub pivot: String,
    pub mode: Mode,
    pub languages: Vec<LanguageSpec>,
    /// Word-token count of the shared vocabulary.
    pub words: usize,
    pub valid: usize,
    pub test: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl CorpusSpec {
    /// `count` languages `l0..` cycling through `families` families.
    pub fn synthetic(mode: Mode, count: usize, families: usize, train: usize, seed: u64) -> Self {
        Self {
            pivot: "en".into(),
            mode,
            languages: (0..count)
                .map(|i| LanguageSpec {
                    code: format!("l{i}"),
                    family: i % families.max(1),
                    train,
                })
                .collect(),
            words: 48,
            valid: 64,
            test: 64,
            min_len: 3,
            max_len: 20,
            zipf_exponent: 1.0,
            seed,
        }
    }

    pub fn families(&self) -> usize {
        self.languages.iter().map(|l| l.family + 1).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::Parameter("corpus needs at least one non-pivot language (two in total)".into()));
        }
        let mut seen = vec![self.pivot.as_str()];
        for l in &self.languages {
            if seen.contains(&l.code.as_str()) {
                return Err(Error::Parameter(format!("duplicate language `{}`", l.code)));
            }
            seen.push(&l.code);
            if l.train == 0 {
                return Err(Error::Parameter(format!("language `{}` has size 0", l.code)));
            }
        }
        if self.valid == 0 || self.test == 0 {
            return Err(Error::Parameter("valid and test sizes must be at least 1".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Parameter(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        if self.words < 2 * 3 * self.families().max(1) {
            return Err(Error::Parameter(format!(
                "{} words cannot keep {} families' tables disjoint",
                self.words,
                self.families()
            )));
        }
        if !(self.zipf_exponent > 0.0) {
            return Err(Error::Parameter("zipf exponent must be positive".into()));
        }
        Ok(())
    }

    pub fn all_languages(&self) -> Vec<String> {
        let mut v = vec![self.pivot.clone()];
        v.extend(self.languages.iter().map(|l| l.code.clone()));
        v
    }

    pub fn target_languages(&self) -> Vec<String> {
        match self.mode {
            Mode::O2m => self.languages.iter().map(|l| l.code.clone()).collect(),
            Mode::M2o => vec![self.pivot.clone()],
        }
    }

    /// Family and training size of each target language. The pivot target
    /// of a many-to-one corpus counts every training pair.
    pub fn target_metadata(&self) -> Vec<LanguageMetadata> {
        match self.mode {
            Mode::O2m => self
                .languages
                .iter()
                .map(|l| LanguageMetadata {
                    code: l.code.clone(),
                    family: format!("f{}", l.family),
                    pairs: l.train as u64,
                })
                .collect(),
            Mode::M2o => vec![LanguageMetadata {
                code: self.pivot.clone(),
                family: "pivot".into(),
                pairs: self.languages.iter().map(|l| l.train as u64).sum(),
            }],
        }
    }
}

/// Deterministic pivot-to-language transform.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cipher {
    pub kind: TransformKind,
    pub family: usize,
    /// Word index `i` of the pivot maps to word index `table[i]`.
    pub table: Vec<usize>,
    /// Affix token id inserted by [`TransformKind::Affix`].
    pub affix: usize,
}

impl Cipher {
    /// Maps pivot token ids to this language's ids.
    pub fn encrypt(&self, pivot: &[usize], word_base: usize) -> Vec<usize> {
        let mut out: Vec<usize> = pivot.iter().map(|&t| word_base + self.table[t - word_base]).collect();
        match self.kind {
            TransformKind::Substitute => {}
            TransformKind::Reverse => out.reverse(),
            TransformKind::Affix => {
                let mut with = Vec::with_capacity(out.len() + out.len() / AFFIX_EVERY);
                for (i, t) in out.into_iter().enumerate() {
                    with.push(t);
                    if (i + 1) % AFFIX_EVERY == 0 {
                        with.push(self.affix);
                    }
                }
                out = with;
            }
        }
        out
    }

    pub fn decrypt(&self, text: &[usize], word_base: usize) -> Vec<usize> {
        let mut inverse = vec![0; self.table.len()];
        for (i, &j) in self.table.iter().enumerate() {
            inverse[j] = i;
        }
        let mut words: Vec<usize> = text.iter().copied().filter(|&t| t != self.affix || self.kind != TransformKind::Affix).collect();
        if self.kind == TransformKind::Reverse {
            words.reverse();
        }
        words.into_iter().map(|t| word_base + inverse[t - word_base]).collect()
    }

    /// Number of table positions on which two ciphers agree.
    pub fn shared_entries(&self, other: &Cipher) -> usize {
        self.table.iter().zip(&other.table).filter(|(a, b)| a == b).count()
    }
}

/// `source → target` with its training-pair count.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Direction {
    pub source: String,
    pub target: String,
    pub pairs: usize,
}

impl Direction {
    pub fn name(&self) -> String {
        format!("{}-{}", self.source, self.target)
    }

    /// The language that is not the pivot.
    pub fn other<'a>(&'a self, pivot: &str) -> &'a str {
        if self.source == pivot {
            &self.target
        } else {
            &self.source
        }
    }
}

/// Source and target token ids, without language tag, bos or eos.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectionData {
    pub direction: Direction,
    pub train: Vec<Pair>,
    pub valid: Vec<Pair>,
    pub test: Vec<Pair>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl DirectionData {
    pub fn split(&self, split: Split) -> &[Pair] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: CorpusSpec,
    pub vocab: Vocabulary,
    pub ciphers: BTreeMap<String, Cipher>,
    pub directions: Vec<DirectionData>,
}

impl SyntheticCorpus {
    /// Id of the first word token.
    pub fn word_base(&self) -> usize {
        SPECIALS.len() + self.spec.languages.len() + 1
    }

    pub fn direction(&self, name: &str) -> Option<&DirectionData> {
        self.directions.iter().find(|d| d.direction.name() == name)
    }

    pub fn direction_list(&self) -> Vec<Direction> {
        self.directions.iter().map(|d| d.direction.clone()).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let mut counts = BTreeMap::new();
        for d in &self.directions {
            let name = d.direction.name();
            let mut text = String::new();
            for (tag, pairs) in [("train", &d.train), ("valid", &d.valid), ("test", &d.test)] {
                for p in pairs {
                    text.push_str(tag);
                    text.push('\t');
                    text.push_str(&join_ids(&p.source));
                    text.push('\t');
                    text.push_str(&join_ids(&p.target));
                    text.push('\n');
                }
            }
            let path = dir.join(format!("{name}.tsv"));
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            counts.insert(name, [d.train.len(), d.valid.len(), d.test.len()]);
        }
        let manifest = Manifest {
            version: 1,
            spec: self.spec.clone(),
            directions: self.direction_list(),
            counts,
        };
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.version != 1 {
            return Err(Error::format(&path, format!("unsupported version {}", manifest.version)));
        }
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let ciphers = ciphers_for(&manifest.spec, SPECIALS.len() + manifest.spec.languages.len() + 1 + manifest.spec.words);
        let mut directions = Vec::new();
        for dir_meta in manifest.directions {
            let name = dir_meta.name();
            let path = dir.join(format!("{name}.tsv"));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let mut data = DirectionData {
                direction: dir_meta,
                train: Vec::new(),
                valid: Vec::new(),
                test: Vec::new(),
            };
            for (n, line) in text.lines().enumerate() {
                let bad = |r: &str| Error::format(&path, format!("line {}: {r}", n + 1));
                let mut f = line.split('\t');
                let (tag, src, tgt) = match (f.next(), f.next(), f.next()) {
                    (Some(a), Some(b), Some(c)) => (a, b, c),
                    _ => return Err(bad("expected three tab-separated fields")),
                };
                let pair = Pair {
                    source: parse_ids(src, vocab.len()).map_err(|r| bad(&r))?,
                    target: parse_ids(tgt, vocab.len()).map_err(|r| bad(&r))?,
                };
                match tag {
                    "train" => data.train.push(pair),
                    "valid" => data.valid.push(pair),
                    "test" => data.test.push(pair),
                    other => return Err(bad(&format!("unknown split `{other}`"))),
                }
            }
            let expected = manifest.counts.get(&name).copied().unwrap_or_default();
            if expected != [data.train.len(), data.valid.len(), data.test.len()] {
                return Err(Error::format(&path, "pair counts disagree with manifest"));
            }
            directions.push(data);
        }
        Ok(Self {
            spec: manifest.spec,
            vocab,
            ciphers,
            directions,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    spec: CorpusSpec,
    directions: Vec<Direction>,
    counts: BTreeMap<String, [usize; 3]>,
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn parse_ids(text: &str, vocab: usize) -> std::result::Result<Vec<usize>, String> {
    text.split_whitespace()
        .map(|t| match t.parse::<usize>() {
            Ok(id) if id < vocab => Ok(id),
            Ok(id) => Err(format!("token id {id} outside vocabulary of {vocab}")),
            Err(_) => Err(format!("bad token id `{t}`")),
        })
        .collect()
}

/// Family base permutation `σ((i + 3f) mod W)` composed with a per-language
/// random set of adjacent-pair swaps (never the first pair).
fn ciphers_for(spec: &CorpusSpec, affix_base: usize) -> BTreeMap<String, Cipher> {
    let w = spec.words;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_c1fe);
    let mut sigma: Vec<usize> = (0..w).collect();
    sigma.shuffle(&mut rng);
    let mut out = BTreeMap::new();
    for lang in &spec.languages {
        let f = lang.family;
        let mut swap = (0..w).collect::<Vec<usize>>();
        for pair in 1..w / 2 {
            if rng.random_bool(SWAP_PROB) {
                swap.swap(2 * pair, 2 * pair + 1);
            }
        }
        let table = (0..w).map(|i| sigma[(swap[i] + 3 * f) % w]).collect();
        out.insert(
            lang.code.clone(),
            Cipher {
                kind: TransformKind::for_family(f),
                family: f,
                table,
                affix: affix_base + f,
            },
        );
    }
    out
}

/// Builds the corpus described by `spec`; identical specs give identical corpora.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let families = spec.families();
    let vocab = Vocabulary::build(&spec.all_languages(), spec.words, families)?;
    let word_base = SPECIALS.len() + spec.all_languages().len();
    let ciphers = ciphers_for(spec, word_base + spec.words);
    let zipf = Zipf::new(spec.words as f64, spec.zipf_exponent).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut directions = Vec::new();
    for (li, lang) in spec.languages.iter().enumerate() {
        let cipher = &ciphers[&lang.code];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(li as u64 + 1));
        let mut sample = |n: usize| -> Vec<Pair> {
            (0..n)
                .map(|_| {
                    let len = rng.random_range(spec.min_len..=spec.max_len);
                    let pivot: Vec<usize> = (0..len).map(|_| word_base + zipf.sample(&mut rng) as usize - 1).collect();
                    let other = cipher.encrypt(&pivot, word_base);
                    match spec.mode {
                        Mode::O2m => Pair {
                            source: pivot,
                            target: other,
                        },
                        Mode::M2o => Pair {
                            source: other,
                            target: pivot,
                        },
                    }
                })
                .collect()
        };
        let train = sample(lang.train);
        let valid = sample(spec.valid);
        let test = sample(spec.test);
        let (source, target) = match spec.mode {
            Mode::O2m => (spec.pivot.clone(), lang.code.clone()),
            Mode::M2o => (lang.code.clone(), spec.pivot.clone()),
        };
        directions.push(DirectionData {
            direction: Direction {
                source,
                target,
                pairs: lang.train,
            },
            train,
            valid,
            test,
        });
    }
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        vocab,
        ciphers,
        directions,
    })
}

/// `P(d) ∝ (n_d / Σn)^{1/T}`.
pub fn temperature_probs(counts: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!("sampling temperature {temperature} must be positive")));
    }
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::Parameter("direction counts must be positive".into()));
    }
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    let w: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64 / total).powf(1.0 / temperature))
        .collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

/// Draws direction indices with temperature-scaled probabilities.
#[derive(Clone, Debug)]
pub struct DirectionSampler {
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl DirectionSampler {
    pub fn new(counts: &[usize], temperature: f64) -> Result<Self> {
        let probs = temperature_probs(counts, temperature)?;
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self { probs, cumulative })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let r = rng.random::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
        self.cumulative
            .iter()
            .position(|&c| r < c)
            .unwrap_or(self.cumulative.len() - 1)
    }
}

/// One-shot form of [`DirectionSampler::sample`].
pub fn sample_direction<'a, R: Rng + ?Sized>(directions: &'a [Direction], temperature: f64, rng: &mut R) -> Result<&'a Direction> {
    let counts: Vec<usize> = directions.iter().map(|d| d.pairs).collect();
    let sampler = DirectionSampler::new(&counts, temperature)?;
    Ok(&directions[sampler.sample(rng)])
}

/// Target-side cost of a pair: its tokens plus the end-of-sentence marker.
pub fn target_cost(pair: &Pair) -> usize {
    pair.target.len() + 1
}

/// Length-bucketed batches of pair indices, each costing at most
/// `max_tokens` target tokens including padding. Batch order is shuffled
/// with `seed`.
pub fn make_batches(pairs: &[Pair], direction: &str, max_tokens: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if let Some((index, p)) = pairs.iter().enumerate().find(|(_, p)| target_cost(p) > max_tokens) {
        return Err(Error::Oversize {
            direction: direction.to_string(),
            index,
            tokens: target_cost(p),
            budget: max_tokens,
        });
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (target_cost(&pairs[i]), pairs[i].source.len(), i));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let cost = target_cost(&pairs[i]);
        let widened = longest.max(cost);
        if !current.is_empty() && widened * (current.len() + 1) > max_tokens {
            batches.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(cost);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(batches)
}

/// Fraction of padded target slots over a batch list.
pub fn padding_fraction(pairs: &[Pair], batches: &[Vec<usize>]) -> f64 {
    let (mut real, mut slots) = (0usize, 0usize);
    for b in batches {
        let longest = b.iter().map(|&i| target_cost(&pairs[i])).max().unwrap_or(0);
        real += b.iter().map(|&i| target_cost(&pairs[i])).sum::<usize>();
        slots += longest * b.len();
    }
    if slots == 0 {
        0.0
    } else {
        1.0 - real as f64 / slots as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec(mode: Mode) -> CorpusSpec {
        let mut s = CorpusSpec::synthetic(mode, 6, 3, 200, 42);
        s.valid = 10;
        s.test = 10;
        s
    }

    #[test]
    fn generation_is_deterministic_and_in_vocabulary() {
        let spec = small_spec(Mode::O2m);
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a, b);
        let v = a.vocab.len();
        for d in &a.directions {
            for p in d.train.iter().chain(&d.valid).chain(&d.test) {
                assert!(p.source.iter().chain(&p.target).all(|&t| t < v));
                assert!((3..=20).contains(&p.source.len()));
            }
        }
        let other = generate_corpus(&CorpusSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.directions[0].train, other.directions[0].train);
    }

    #[test]
    fn ciphers_invert() {
        for mode in [Mode::O2m, Mode::M2o] {
            let c = generate_corpus(&small_spec(mode)).unwrap();
            let base = c.word_base();
            for d in &c.directions {
                let cipher = &c.ciphers[d.direction.other("en")];
                for p in &d.train {
                    let (pivot, other) = match mode {
                        Mode::O2m => (&p.source, &p.target),
                        Mode::M2o => (&p.target, &p.source),
                    };
                    assert_eq!(&cipher.decrypt(other, base), pivot);
                }
            }
        }
    }

    #[test]
    fn family_members_share_table_structure_and_strangers_do_not() {
        let c = generate_corpus(&small_spec(Mode::O2m)).unwrap();
        let codes: Vec<&String> = c.ciphers.keys().collect();
        for a in &codes {
            for b in &codes {
                if a == b {
                    continue;
                }
                let (ca, cb) = (&c.ciphers[*a], &c.ciphers[*b]);
                let shared = ca.shared_entries(cb);
                // structure comparison straight from the tables
                let direct = (0..ca.table.len()).filter(|&i| ca.table[i] == cb.table[i]).count();
                assert_eq!(shared, direct);
                if ca.family == cb.family {
                    assert!(direct > 0, "{a} {b}");
                    assert_eq!(ca.kind, cb.kind);
                } else {
                    assert_eq!(direct, 0, "{a} {b}");
                }
            }
        }
    }

    #[test]
    fn generation_rejects_bad_specs() {
        let mut s = small_spec(Mode::O2m);
        s.languages[0].train = 0;
        assert!(matches!(generate_corpus(&s), Err(Error::Parameter(_))));
        let mut s = small_spec(Mode::O2m);
        s.languages.clear();
        assert!(generate_corpus(&s).is_err());
    }

    #[test]
    fn vocabulary_reserved_ids_and_round_trip() {
        let langs = vec!["en".to_string(), "fr".to_string()];
        let v = Vocabulary::build(&langs, 5, 1).unwrap();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<s>"), Some(BOS));
        assert_eq!(v.id("</s>"), Some(EOS));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.language_id("fr").unwrap(), 5);
        assert!(matches!(v.language_id("de"), Err(Error::Vocabulary(_))));
        let text = "w0 w4 <2fr> ~a0 w2";
        assert_eq!(v.detokenize(&v.tokenize(text)), text);
        assert_eq!(v.tokenize("w0 zz"), vec![v.id("w0").unwrap(), UNK]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    #[test]
    fn corpus_disk_round_trip() {
        let c = generate_corpus(&small_spec(Mode::M2o)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        assert_eq!(SyntheticCorpus::load(dir.path()).unwrap(), c);
        let files = fs::read_dir(dir.path()).unwrap().filter(|e| {
            e.as_ref().unwrap().path().extension().is_some_and(|x| x == "tsv")
        });
        assert_eq!(files.count(), 6);
    }

    #[test]
    fn temperature_examples() {
        let p = temperature_probs(&[100, 300], 1.0).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        let p = temperature_probs(&[1, 1_000_000], 1e9).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-6);
        // reference values evaluated in 50-digit arithmetic
        let p = temperature_probs(&[100_000, 100], 5.0).unwrap();
        assert!((p[0] - 0.799_239_99).abs() < 1e-7, "{p:?}");
        assert!((p[1] - 0.200_760_01).abs() < 1e-7, "{p:?}");
        assert!(temperature_probs(&[1, 2], 0.0).is_err());
    }

    #[test]
    fn sampler_frequencies_within_three_sigma() {
        let counts = [5000, 800, 120, 40];
        let s = DirectionSampler::new(&counts, 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 100_000;
        let mut hits = [0usize; 4];
        for _ in 0..n {
            hits[s.sample(&mut rng)] += 1;
        }
        for (h, p) in hits.iter().zip(s.probs()) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*h as f64 - n as f64 * p).abs() < 3.0 * sigma, "{h} vs {p}");
        }
    }

    #[test]
    fn batches_partition_and_respect_budget() {
        let c = generate_corpus(&small_spec(Mode::O2m)).unwrap();
        let pairs = &c.directions[0].train;
        let batches = make_batches(pairs, "en-l0", 128, 1).unwrap();
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        assert_eq!(all, (0..pairs.len()).collect::<Vec<_>>());
        for b in &batches {
            let longest = b.iter().map(|&i| target_cost(&pairs[i])).max().unwrap();
            assert!(longest * b.len() <= 128);
        }
        assert!(padding_fraction(pairs, &batches) < 0.5);
        assert_eq!(batches, make_batches(pairs, "en-l0", 128, 1).unwrap());
    }

    #[test]
    fn tight_budget_gives_singletons_and_oversize_errors() {
        let pairs: Vec<Pair> = (0..5)
            .map(|i| Pair {
                source: vec![9; 3],
                target: vec![9; 6 + i % 2],
            })
            .collect();
        let longest = pairs.iter().map(target_cost).max().unwrap();
        let batches = make_batches(&pairs, "x-y", longest, 0).unwrap();
        assert!(batches.iter().all(|b| b.len() == 1));
        let err = make_batches(&pairs, "x-y", longest - 1, 0).unwrap_err();
        assert!(matches!(err, Error::Oversize { index: 1, .. }), "{err}");
        assert!(err.to_string().contains("x-y"));
    }

    proptest! {
        #[test]
        fn tokenize_detokenize_identity(ids in prop::collection::vec(0usize..20, 0..30)) {
            let v = Vocabulary::build(&["en".to_string(), "de".to_string()], 12, 2).unwrap();
            let ids: Vec<usize> = ids.into_iter().filter(|&i| i < v.len()).collect();
            let text = v.detokenize(&ids);
            prop_assert_eq!(v.tokenize(&text), ids);
            prop_assert_eq!(v.detokenize(&v.tokenize(&text)), text);
        }

        #[test]
        fn batches_conserve_pairs(lens in prop::collection::vec(1usize..30, 1..80), budget in 31usize..200, seed in 0u64..50) {
            let pairs: Vec<Pair> = lens.iter().map(|&n| Pair { source: vec![5; n], target: vec![5; n] }).collect();
            let batches = make_batches(&pairs, "a-b", budget, seed).unwrap();
            let mut all = batches.concat();
            all.sort();
            prop_assert_eq!(all, (0..pairs.len()).collect::<Vec<_>>());
            for b in &batches {
                let longest = b.iter().map(|&i| target_cost(&pairs[i])).max().unwrap();
                prop_assert!(longest * b.len() <= budget);
            }
        }
    }
}
