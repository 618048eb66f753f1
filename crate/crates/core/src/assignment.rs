//! Language-to-decoder assignment: fixed maps (EACH, RAND, FAM, EMB) and the
//! trainable straight-through Gumbel-Softmax router (ST).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const TAU_START: f64 = 5.0;
pub const TAU_END: f64 = 0.5;
const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_ITERS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Each,
    Rand,
    Fam,
    Emb,
    St,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Each => "each",
            Method::Rand => "rand",
            Method::Fam => "fam",
            Method::Emb => "emb",
            Method::St => "st",
        }
    }

    /// Upper-case tag used in report labels, e.g. `10-2-FAM`.
    pub fn tag(self) -> &'static str {
        match self {
            Method::Each => "EACH",
            Method::Rand => "RAND",
            Method::Fam => "FAM",
            Method::Emb => "EMB",
            Method::St => "ST",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "each" => Ok(Method::Each),
            "rand" => Ok(Method::Rand),
            "fam" => Ok(Method::Fam),
            "emb" => Ok(Method::Emb),
            "st" => Ok(Method::St),
            other => Err(Error::Parameter(format!("unknown assignment method `{other}`"))),
        }
    }
}

/// Total function from target language to decoder index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentMap {
    method: Method,
    decoders: usize,
    seed: Option<u64>,
    map: BTreeMap<String, usize>,
}

impl AssignmentMap {
    /// Validates that indices lie in `[0, decoders)` and every decoder is used.
    pub fn new(method: Method, decoders: usize, seed: Option<u64>, map: BTreeMap<String, usize>) -> Result<Self> {
        if decoders == 0 {
            return Err(Error::Parameter("decoder count must be positive".into()));
        }
        let mut used = vec![false; decoders];
        for (lang, &d) in &map {
            if d >= decoders {
                return Err(Error::Parameter(format!("`{lang}` mapped to {d}, only {decoders} decoders")));
            }
            used[d] = true;
        }
        if let Some(dead) = used.iter().position(|u| !u) {
            return Err(Error::Parameter(format!("decoder {dead} has no languages")));
        }
        Ok(Self {
            method,
            decoders,
            seed,
            map,
        })
    }

    /// Routes every language to decoder 0.
    pub fn single(languages: &[String]) -> Result<Self> {
        check_languages(languages)?;
        Self::new(Method::Each, 1, None, languages.iter().map(|l| (l.clone(), 0)).collect())
    }

    pub fn decoder(&self, language: &str) -> Result<usize> {
        self.map
            .get(language)
            .copied()
            .ok_or_else(|| Error::UnknownLanguage(language.to_string()))
    }

    pub fn decoders(&self) -> usize {
        self.decoders
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.map.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Languages of each decoder, sorted by code.
    pub fn groups(&self) -> Vec<Vec<String>> {
        let mut groups = vec![Vec::new(); self.decoders];
        for (lang, &d) in &self.map {
            groups[d].push(lang.clone());
        }
        groups
    }

    /// Groups as sets of sets, for comparing partitions regardless of labels.
    pub fn partition(&self) -> Vec<Vec<String>> {
        let mut groups = self.groups();
        groups.sort();
        groups
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# assignment-map v1\n");
        out.push_str(&format!("method\t{}\n", self.method));
        match self.seed {
            Some(s) => out.push_str(&format!("seed\t{s}\n")),
            None => out.push_str("seed\t-\n"),
        }
        out.push_str(&format!("decoders\t{}\n", self.decoders));
        for (lang, d) in &self.map {
            out.push_str(&format!("{lang}\t{d}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::Input(format!("assignment map: {reason}"));
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("# assignment-map v1") {
            return Err(bad("missing `# assignment-map v1` header".into()));
        }
        let (mut method, mut seed, mut decoders) = (None, None, None);
        let mut map = BTreeMap::new();
        for (n, line) in lines.enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("line {}: expected two tab-separated fields", n + 2)))?;
            match key {
                "method" => method = Some(value.parse::<Method>()?),
                "seed" => {
                    seed = Some(match value {
                        "-" => None,
                        v => Some(v.parse().map_err(|_| bad(format!("bad seed `{v}`")))?),
                    })
                }
                "decoders" => decoders = Some(value.parse().map_err(|_| bad(format!("bad decoder count `{value}`")))?),
                lang => {
                    let d = value.parse().map_err(|_| bad(format!("bad index for `{lang}`")))?;
                    if map.insert(lang.to_string(), d).is_some() {
                        return Err(bad(format!("duplicate language `{lang}`")));
                    }
                }
            }
        }
        Self::new(
            method.ok_or_else(|| bad("missing method".into()))?,
            decoders.ok_or_else(|| bad("missing decoder count".into()))?,
            seed.flatten(),
            map,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn check_languages(languages: &[String]) -> Result<()> {
    if languages.is_empty() {
        return Err(Error::Input("no languages to assign".into()));
    }
    let mut seen = HashSet::new();
    for l in languages {
        if !seen.insert(l.as_str()) {
            return Err(Error::Input(format!("duplicate language code `{l}`")));
        }
    }
    Ok(())
}

/// One decoder per language, in the given order.
pub fn assign_each(languages: &[String]) -> Result<AssignmentMap> {
    check_languages(languages)?;
    let map = languages.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
    AssignmentMap::new(Method::Each, languages.len(), None, map)
}

/// Seeded shuffle dealt round-robin into `groups` nearly equal groups.
pub fn assign_random(languages: &[String], groups: usize, seed: u64) -> Result<AssignmentMap> {
    check_languages(languages)?;
    if groups == 0 || groups > languages.len() {
        return Err(Error::Parameter(format!(
            "group count {groups} must be in 1..={}",
            languages.len()
        )));
    }
    let mut order = languages.to_vec();
    order.sort();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let map = order.into_iter().enumerate().map(|(i, l)| (l, i % groups)).collect();
    AssignmentMap::new(Method::Rand, groups, Some(seed), map)
}

/// One decoder per family, numbered in order of first appearance.
pub fn assign_family(metadata: &[LanguageMetadata]) -> Result<AssignmentMap> {
    let codes: Vec<String> = metadata.iter().map(|m| m.code.clone()).collect();
    check_languages(&codes)?;
    let mut families: Vec<&str> = Vec::new();
    let mut map = BTreeMap::new();
    for m in metadata {
        if m.family.trim().is_empty() {
            return Err(Error::Metadata(format!("language `{}` has no family", m.code)));
        }
        let idx = match families.iter().position(|&f| f == m.family) {
            Some(i) => i,
            None => {
                families.push(&m.family);
                families.len() - 1
            }
        };
        map.insert(m.code.clone(), idx);
    }
    AssignmentMap::new(Method::Fam, families.len(), None, map)
}

/// Spherical k-means over language embeddings (cosine distance), best of
/// several seeded restarts.
///
/// Languages are processed in an order fixed by their vectors, so renaming
/// languages renames the result and nothing else.
pub fn assign_by_embedding(embeddings: &BTreeMap<String, Vec<f64>>, groups: usize, seed: u64) -> Result<AssignmentMap> {
    let n = embeddings.len();
    if groups == 0 || groups > n {
        return Err(Error::Clustering(format!("group count {groups} must be in 1..={n}")));
    }
    let dim = embeddings.values().next().map_or(0, Vec::len);
    let mut points = Vec::with_capacity(n);
    for (lang, v) in embeddings {
        if v.len() != dim || dim == 0 {
            return Err(Error::Clustering(format!("embedding of `{lang}` has dimension {}, expected {dim}", v.len())));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::Clustering(format!("embedding of `{lang}` has no direction")));
        }
        points.push((v.iter().map(|x| x / norm).collect::<Vec<f64>>(), lang.clone()));
    }
    points.sort_by(|a, b| {
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.1.cmp(&b.1))
    });
    let distinct = points.windows(2).any(|w| w[0].0 != w[1].0);
    if groups > 1 && !distinct {
        return Err(Error::Clustering("all embeddings point in the same direction".into()));
    }
    let vectors: Vec<Vec<f64>> = points.iter().map(|p| p.0.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let (cost, labels) = spherical_kmeans(&vectors, groups, &mut rng);
        if best.as_ref().is_none_or(|(c, _)| cost < *c - 1e-12) {
            best = Some((cost, labels));
        }
    }
    let (_, labels) = best.expect("at least one restart");
    // relabel by first appearance in canonical order
    let mut relabel = vec![usize::MAX; groups];
    let mut next = 0;
    let mut map = BTreeMap::new();
    for (label, (_, lang)) in labels.iter().zip(&points) {
        if relabel[*label] == usize::MAX {
            relabel[*label] = next;
            next += 1;
        }
        map.insert(lang.clone(), relabel[*label]);
    }
    AssignmentMap::new(Method::Emb, groups, Some(seed), map)
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nb == 0.0 {
        1.0
    } else {
        1.0 - dot / nb
    }
}

/// Within-cluster cosine cost of `labels`, centroids being normalized means.
pub fn clustering_cost(unit_points: &[Vec<f64>], labels: &[usize], groups: usize) -> f64 {
    let centroids = centroids(unit_points, labels, groups);
    unit_points
        .iter()
        .zip(labels)
        .map(|(p, &l)| cosine_distance(p, &centroids[l]))
        .sum()
}

fn centroids(points: &[Vec<f64>], labels: &[usize], groups: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut c = vec![vec![0.0; dim]; groups];
    for (p, &l) in points.iter().zip(labels) {
        for (a, b) in c[l].iter_mut().zip(p) {
            *a += b;
        }
    }
    c
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = cosine_distance(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn spherical_kmeans(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> (f64, Vec<usize>) {
    let n = points.len();
    // k-means++ seeding
    let mut seeds = vec![rng.random_range(0..n)];
    while seeds.len() < k {
        let cs: Vec<Vec<f64>> = seeds.iter().map(|&i| points[i].clone()).collect();
        let weights: Vec<f64> = points.iter().map(|p| nearest(p, &cs).1.max(0.0)).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total <= 0.0 {
            (0..n).find(|i| !seeds.contains(i)).expect("k <= n")
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in weights.iter().enumerate() {
                if r < *w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        };
        seeds.push(pick);
    }
    let mut cs: Vec<Vec<f64>> = seeds.iter().map(|&i| points[i].clone()).collect();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let new: Vec<usize> = points.iter().map(|p| nearest(p, &cs).0).collect();
        let mut new = new;
        repair_empty(points, &mut new, k);
        if new == labels {
            break;
        }
        labels = new;
        cs = centroids(points, &labels, k);
    }
    (clustering_cost(points, &labels, k), labels)
}

/// Moves the point farthest from its centroid in the largest cluster into
/// each empty cluster.
fn repair_empty(points: &[Vec<f64>], labels: &mut [usize], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))).expect("k > 0");
        let cs = centroids(points, labels, k);
        let far = (0..points.len())
            .filter(|&i| labels[i] == largest)
            .max_by(|&a, &b| {
                cosine_distance(&points[a], &cs[largest])
                    .total_cmp(&cosine_distance(&points[b], &cs[largest]))
                    .then(b.cmp(&a))
            })
            .expect("largest cluster is nonempty");
        labels[far] = empty;
    }
}

/// One row of a language metadata file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageMetadata {
    pub code: String,
    pub family: String,
    pub pairs: u64,
}

/// Parses `code<TAB>family<TAB>pair-count` lines; `#` starts a comment.
pub fn parse_metadata(text: &str) -> Result<Vec<LanguageMetadata>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        let code = fields[0];
        if code.is_empty() {
            return Err(Error::Metadata(format!("line {}: empty language code", n + 1)));
        }
        let family = fields.get(1).copied().unwrap_or("");
        if family.is_empty() {
            return Err(Error::Metadata(format!("line {}: `{code}` has no family", n + 1)));
        }
        let pairs = match fields.get(2) {
            Some(p) => p
                .parse()
                .map_err(|_| Error::Metadata(format!("line {}: bad pair count `{p}`", n + 1)))?,
            None => return Err(Error::Metadata(format!("line {}: `{code}` has no pair count", n + 1))),
        };
        out.push(LanguageMetadata {
            code: code.to_string(),
            family: family.to_string(),
            pairs,
        });
    }
    Ok(out)
}

pub fn load_metadata(path: &Path) -> Result<Vec<LanguageMetadata>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metadata(&text)
}

/// Names accepted by [`bundled_metadata`].
pub const BUNDLED: [&str; 3] = ["ted8-related", "ted8-diverse", "ml50"];

/// Family tables shipped with the library.
pub fn bundled_metadata(name: &str) -> Result<Vec<LanguageMetadata>> {
    let text = match name {
        "ted8-related" => include_str!("../data/ted8-related.tsv"),
        "ted8-diverse" => include_str!("../data/ted8-diverse.tsv"),
        "ml50" => include_str!("../data/ml50.tsv"),
        other => return Err(Error::Metadata(format!("no bundled metadata named `{other}`"))),
    };
    parse_metadata(text)
}

/// `-log(-log(u))`.
pub fn gumbel_noise(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Uniform draws in the open interval (0, 1).
pub fn draw_uniforms<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(f64::MIN_POSITIVE..1.0)).collect()
}

/// `softmax((l + g) / tau)` with `g = -log(-log(u))`.
pub fn gumbel_probs(logits: &[f64], uniforms: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature {tau} must be positive")));
    }
    if logits.len() != uniforms.len() {
        return Err(Error::dim("gumbel_probs", &[logits.len()], &[uniforms.len()]));
    }
    let z: Vec<f64> = logits
        .iter()
        .zip(uniforms)
        .map(|(l, &u)| (l + gumbel_noise(u)) / tau)
        .collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / total).collect())
}

/// Index of the largest Gumbel-perturbed logit; ties go to the lowest index.
pub fn gumbel_argmax(logits: &[f64], uniforms: &[f64]) -> usize {
    let perturbed: Vec<f64> = logits.iter().zip(uniforms).map(|(l, &u)| l + gumbel_noise(u)).collect();
    crate::numerics::argmax(&perturbed)
}

/// Temperature after `step` of `total` steps, linear from 5 to 0.5.
pub fn anneal_tau(step: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::Parameter("anneal needs a positive step total".into()));
    }
    if step > total {
        return Err(Error::Parameter(format!("step {step} beyond total {total}")));
    }
    Ok(TAU_START - (TAU_START - TAU_END) * step as f64 / total as f64)
}

/// Straight-through Gumbel-Softmax on a tape: returns `(hard, soft)` where
/// `hard` is the one-hot forward value and carries `soft`'s gradient.
pub fn straight_through_graph<T: Real>(
    tape: &mut Tape<'_, T>,
    logits: Var,
    uniforms: &[f64],
    tau: f64,
) -> Result<(Var, Var)> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature {tau} must be positive")));
    }
    let shape = tape.shape(logits).to_vec();
    let noise = Tensor::new(shape, uniforms.iter().map(|&u| T::of(gumbel_noise(u))).collect())?;
    let g = tape.constant(noise);
    let z = tape.add(logits, g)?;
    let z = tape.scale(z, T::of(1.0 / tau));
    let axis = tape.shape(z).len() - 1;
    let soft = tape.softmax(z, axis)?;
    Ok((tape.straight_through(soft), soft))
}

/// Learned router: logits `l = L_e · W + b` from the target-language token's
/// embedding row, plus the annealed Gumbel temperature.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RouterState {
    /// Target language to its language-token id (row of the embedding table).
    languages: BTreeMap<String, usize>,
    decoders: usize,
    tau: f64,
    #[serde(skip)]
    params: Option<RouterParams>,
}

#[derive(Clone, Copy, Debug)]
struct RouterParams {
    embedding: ParamId,
    weight: ParamId,
    bias: ParamId,
}

impl RouterState {
    /// Registers `router.weight` `[dim, decoders]` and `router.bias` in `store`.
    pub fn new(
        store: &mut ParamStore,
        embedding: ParamId,
        languages: BTreeMap<String, usize>,
        decoders: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if decoders == 0 {
            return Err(Error::Parameter("router needs at least one decoder".into()));
        }
        if languages.is_empty() {
            return Err(Error::Input("router needs at least one language".into()));
        }
        let dim = store.get(embedding).last_dim();
        let bound = 1.0 / (dim as f32).sqrt();
        let w = (0..dim * decoders).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = store.add("router.weight", Tensor::new(vec![dim, decoders], w)?)?;
        let bias = store.add("router.bias", Tensor::zeros(&[decoders]))?;
        Ok(Self {
            languages,
            decoders,
            tau: TAU_START,
            params: Some(RouterParams {
                embedding,
                weight,
                bias,
            }),
        })
    }

    /// Rebinds parameter handles after deserialization.
    pub fn attach(&mut self, store: &ParamStore, embedding: ParamId) -> Result<()> {
        let find = |n: &str| store.id(n).ok_or_else(|| Error::Parameter(format!("missing parameter `{n}`")));
        self.params = Some(RouterParams {
            embedding,
            weight: find("router.weight")?,
            bias: find("router.bias")?,
        });
        Ok(())
    }

    fn handles(&self) -> Result<RouterParams> {
        self.params
            .ok_or_else(|| Error::Parameter("router parameters not attached".into()))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.params.map_or_else(Vec::new, |p| vec![p.weight, p.bias])
    }

    pub fn decoders(&self) -> usize {
        self.decoders
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        if !(TAU_END..=TAU_START).contains(&tau) {
            return Err(Error::Parameter(format!("temperature {tau} outside [{TAU_END}, {TAU_START}]")));
        }
        self.tau = tau;
        Ok(())
    }

    pub fn anneal(&mut self, step: usize, total: usize) -> Result<()> {
        self.tau = anneal_tau(step, total)?;
        Ok(())
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.languages.keys().map(String::as_str)
    }

    fn token(&self, language: &str) -> Result<usize> {
        self.languages
            .get(language)
            .copied()
            .ok_or_else(|| Error::UnknownLanguage(language.to_string()))
    }

    /// Logits `l` on a tape, shape `[decoders]`.
    pub fn logits_on(&self, tape: &mut Tape<'_>, language: &str) -> Result<Var> {
        let p = self.handles()?;
        let token = self.token(language)?;
        let table = tape.param(p.embedding);
        let le = tape.select_row(table, token)?;
        let d = tape.shape(le)[0];
        let le = tape.reshape(le, &[1, d])?;
        let (w, b) = (tape.param(p.weight), tape.param(p.bias));
        let l = tape.linear(le, w, b)?;
        tape.reshape(l, &[self.decoders])
    }

    pub fn logits(&self, params: &ParamStore, language: &str) -> Result<Vec<f64>> {
        let mut tape = Tape::inference(params);
        let l = self.logits_on(&mut tape, language)?;
        Ok(tape.value(l).data().iter().map(|&x| x as f64).collect())
    }

    /// Noise-free routing distribution `softmax(l)`.
    pub fn probs(&self, params: &ParamStore, language: &str) -> Result<Vec<f64>> {
        let u = vec![(-1.0f64).exp(); self.decoders];
        gumbel_probs(&self.logits(params, language)?, &u, 1.0)
    }

    /// One relaxed sample at the current temperature.
    pub fn gumbel_probs<R: Rng + ?Sized>(&self, params: &ParamStore, language: &str, rng: &mut R) -> Result<Vec<f64>> {
        let u = draw_uniforms(rng, self.decoders);
        gumbel_probs(&self.logits(params, language)?, &u, self.tau)
    }

    /// Highest-probability decoder; ties go to the lowest index.
    pub fn select(&self, params: &ParamStore, language: &str) -> Result<usize> {
        Ok(crate::numerics::argmax(&self.logits(params, language)?))
    }

    /// Straight-through sample on a training tape: `(one-hot, chosen index)`.
    /// A single decoder is a certain outcome and draws nothing from `rng`.
    pub fn straight_through_sample<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        language: &str,
        rng: &mut R,
    ) -> Result<(Var, usize)> {
        let l = self.logits_on(tape, language)?;
        let u = if self.decoders == 1 {
            vec![0.5]
        } else {
            draw_uniforms(rng, self.decoders)
        };
        let (hard, _) = straight_through_graph(tape, l, &u, self.tau)?;
        let chosen = crate::numerics::argmax(tape.value(hard).data());
        Ok((hard, chosen))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck;
    use proptest::prelude::*;

    fn langs(codes: &[&str]) -> Vec<String> {
        codes.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn each_is_a_bijection_in_order() {
        let m = assign_each(&langs(&["az", "tr"])).unwrap();
        assert_eq!(m.decoder("az").unwrap(), 0);
        assert_eq!(m.decoder("tr").unwrap(), 1);
        assert_eq!(m.decoders(), 2);
        assert!(matches!(assign_each(&langs(&["az", "az"])), Err(Error::Input(_))));
        assert!(matches!(m.decoder("xx"), Err(Error::UnknownLanguage(_))));
    }

    #[test]
    fn each_on_bundled_corpora() {
        let related: Vec<String> = bundled_metadata("ted8-related").unwrap().into_iter().map(|m| m.code).collect();
        assert_eq!(assign_each(&related).unwrap().decoders(), 8);
        let ml50: Vec<String> = bundled_metadata("ml50").unwrap().into_iter().map(|m| m.code).collect();
        assert_eq!(assign_each(&ml50).unwrap().decoders(), 49);
    }

    #[test]
    fn random_groups_are_even_and_seeded() {
        let l = langs(&["az", "be", "cs", "gl", "pt", "ru", "sk", "tr"]);
        let a = assign_random(&l, 4, 7).unwrap();
        assert!(a.groups().iter().all(|g| g.len() == 2));
        assert_eq!(a, assign_random(&l, 4, 7).unwrap());
        let full = assign_random(&l, 8, 1).unwrap();
        assert!(full.groups().iter().all(|g| g.len() == 1));
        assert!(matches!(assign_random(&l, 0, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn random_maps_differ_across_seeds() {
        let l = langs(&["az", "be", "cs", "gl", "pt", "ru", "sk", "tr"]);
        let maps: HashSet<Vec<Vec<String>>> = (0..5).map(|s| assign_random(&l, 4, s).unwrap().partition()).collect();
        assert!(maps.len() > 1);
    }

    #[test]
    fn family_partition_of_bundled_tables() {
        let related = assign_family(&bundled_metadata("ted8-related").unwrap()).unwrap();
        assert_eq!(
            related.partition(),
            vec![
                langs(&["az", "tr"]),
                langs(&["be", "ru"]),
                langs(&["cs", "sk"]),
                langs(&["gl", "pt"])
            ]
        );
        let diverse = assign_family(&bundled_metadata("ted8-diverse").unwrap()).unwrap();
        assert_eq!(diverse.decoders(), 5);
        for single in ["ko", "el", "fr"] {
            assert!(diverse.groups().contains(&vec![single.to_string()]));
        }
        assert_eq!(assign_family(&bundled_metadata("ml50").unwrap()).unwrap().decoders(), 15);
    }

    #[test]
    fn metadata_parser_errors() {
        assert!(matches!(parse_metadata("az\n"), Err(Error::Metadata(_))));
        assert!(matches!(parse_metadata("az\t\t3\n"), Err(Error::Metadata(_))));
        assert!(matches!(parse_metadata("az\tTurkic\t-1\n"), Err(Error::Metadata(_))));
        let ok = parse_metadata("# comment\naz\tTurkic\t5 # trailing\n\n").unwrap();
        assert_eq!(ok[0].pairs, 5);
        let missing = [LanguageMetadata {
            code: "az".into(),
            family: " ".into(),
            pairs: 0,
        }];
        assert!(matches!(assign_family(&missing), Err(Error::Metadata(_))));
    }

    #[test]
    fn map_text_round_trip() {
        let m = assign_random(&langs(&["tr", "az", "ru"]), 2, 3).unwrap();
        let text = m.to_text();
        assert!(text.starts_with("# assignment-map v1\n"));
        let body: Vec<&str> = text.lines().skip(4).collect();
        assert_eq!(body.iter().map(|l| &l[..2]).collect::<Vec<_>>(), ["az", "ru", "tr"]);
        assert_eq!(AssignmentMap::from_text(&text).unwrap(), m);
        assert!(AssignmentMap::from_text("method\teach\n").is_err());
    }

    #[test]
    fn dead_decoders_are_rejected() {
        let map = [("a".to_string(), 0)].into_iter().collect();
        assert!(AssignmentMap::new(Method::Each, 2, None, map).is_err());
    }

    fn blobs(seed: u64, sizes: [usize; 2]) -> BTreeMap<String, Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[1.0, 0.2, 0.0, 0.1], [-0.1, 0.0, 1.0, 0.3]];
        let mut out = BTreeMap::new();
        let mut i = 0;
        for (c, &n) in centers.iter().zip(&sizes) {
            for _ in 0..n {
                let v = c.iter().map(|x| x + rng.random_range(-0.05..0.05)).collect();
                out.insert(format!("l{i:02}"), v);
                i += 1;
            }
        }
        out
    }

    fn exhaustive_two_partition(points: &[Vec<f64>]) -> Vec<usize> {
        // independent cost: 1 - cos(x, mean of its cluster)
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let n = points.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..(1 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut cost = 0.0;
            for g in 0..2 {
                let members: Vec<&Vec<f64>> = (0..n).filter(|&i| labels[i] == g).map(|i| &points[i]).collect();
                let mut mean = vec![0.0; points[0].len()];
                for m in &members {
                    for (a, b) in mean.iter_mut().zip(m.iter()) {
                        *a += b / m.iter().map(|x| x * x).sum::<f64>().sqrt();
                    }
                }
                cost += members.iter().map(|m| 1.0 - cos(m, &mean)).sum::<f64>();
            }
            if cost < best.0 {
                best = (cost, labels);
            }
        }
        best.1
    }

    #[test]
    fn embedding_clusters_match_exhaustive_oracle() {
        for seed in 0..5 {
            let e = blobs(seed, [4, 5]);
            let m = assign_by_embedding(&e, 2, seed).unwrap();
            let points: Vec<Vec<f64>> = e.values().cloned().collect();
            let oracle = exhaustive_two_partition(&points);
            let ours: Vec<usize> = e.keys().map(|k| m.decoder(k).unwrap()).collect();
            let same = ours == oracle || ours.iter().zip(&oracle).all(|(a, b)| a != b);
            assert!(same, "seed {seed}: {ours:?} vs {oracle:?}");
            // recovered blobs exactly
            assert!(ours[..4].iter().all(|&x| x == ours[0]) && ours[4..].iter().all(|&x| x != ours[0]));
        }
    }

    #[test]
    fn embedding_edge_cases() {
        let e = blobs(1, [3, 3]);
        let m = assign_by_embedding(&e, 6, 0).unwrap();
        assert!(m.groups().iter().all(|g| g.len() == 1));
        assert!(matches!(assign_by_embedding(&e, 0, 0), Err(Error::Clustering(_))));
        let same: BTreeMap<String, Vec<f64>> = (0..4).map(|i| (format!("x{i}"), vec![1.0, 2.0])).collect();
        assert!(matches!(assign_by_embedding(&same, 2, 0), Err(Error::Clustering(_))));
        let zero: BTreeMap<String, Vec<f64>> = [("a".into(), vec![0.0, 0.0]), ("b".into(), vec![1.0, 0.0])].into();
        assert!(matches!(assign_by_embedding(&zero, 2, 0), Err(Error::Clustering(_))));
    }

    #[test]
    fn gumbel_noise_vanishes_at_inverse_e() {
        assert!(gumbel_noise((-1.0f64).exp()).abs() < 1e-15);
        let u = vec![(-1.0f64).exp(); 3];
        let p = gumbel_probs(&[1.0, 2.0, 3.0], &u, 2.0).unwrap();
        let z: f64 = [0.5f64, 1.0, 1.5].iter().map(|v| v.exp()).sum();
        assert!((p[2] - 1.5f64.exp() / z).abs() < 1e-12);
        let p = gumbel_probs(&[0.7; 4], &[0.3; 4], 1.3).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-12));
        assert!(gumbel_probs(&[1.0], &[0.5], 0.0).is_err());
    }

    #[test]
    fn anneal_schedule() {
        assert_eq!(anneal_tau(0, 100).unwrap(), 5.0);
        assert_eq!(anneal_tau(100, 100).unwrap(), 0.5);
        assert_eq!(anneal_tau(50, 100).unwrap(), 2.75);
        assert!(anneal_tau(0, 0).is_err());
    }

    #[test]
    fn straight_through_forward_hard_backward_soft() {
        let logits = Tensor::vector(vec![0.3f64, -0.2, 1.1]);
        let u = [0.4, 0.7, 0.2];
        let mut tape = Tape::<f64>::detached();
        let l = tape.input(logits.clone());
        let (hard, soft) = straight_through_graph(&mut tape, l, &u, 0.8).unwrap();
        let hv = tape.value(hard).data().to_vec();
        assert_eq!(hv.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(hv.iter().sum::<f64>(), 1.0);
        let w = tape.constant(Tensor::vector(vec![0.5, -1.5, 2.0]));
        let y = tape.mul(hard, w).unwrap();
        let y = tape.sum(y);
        let g_hard = tape.backward(y).unwrap().get(l).unwrap().to_vec();

        let ys = tape.mul(soft, w).unwrap();
        let ys = tape.sum(ys);
        let g_soft = tape.backward(ys).unwrap().get(l).unwrap().to_vec();
        assert_eq!(g_hard, g_soft);

        let fd = gradcheck::check(&[logits], 1e-4, |t, v| {
            let (_, soft) = straight_through_graph(t, v[0], &u, 0.8)?;
            let w = t.constant(Tensor::vector(vec![0.5, -1.5, 2.0]));
            let y = t.mul(soft, w)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(fd.max_rel_error < 1e-3, "{fd:?}");
    }

    #[test]
    fn low_temperature_samples_are_nearly_hard() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = [4.0, 0.0];
        let draws = 10_000;
        let sharp = (0..draws)
            .filter(|_| {
                let u = draw_uniforms(&mut rng, 2);
                gumbel_probs(&logits, &u, 0.5).unwrap().iter().any(|&p| p > 0.9)
            })
            .count();
        assert!(sharp as f64 >= 0.9 * draws as f64, "{sharp}");
    }

    #[test]
    fn router_select_and_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let emb = store.add("embed", Tensor::new(vec![4, 3], (0..12).map(|i| i as f32 * 0.1).collect()).unwrap()).unwrap();
        let langs: BTreeMap<String, usize> = [("de".to_string(), 2), ("fr".to_string(), 3)].into();
        let mut router = RouterState::new(&mut store, emb, langs, 3, &mut rng).unwrap();
        let p = router.probs(&store, "fr").unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let l = router.logits(&store, "fr").unwrap();
        assert_eq!(router.select(&store, "fr").unwrap(), crate::numerics::argmax(&l));
        assert!(router.select(&store, "xx").is_err());
        // tie-break: zero weights give equal logits
        let w = store.id("router.weight").unwrap();
        store.get_mut(w).data_mut().fill(0.0);
        assert_eq!(router.select(&store, "de").unwrap(), 0);
        router.anneal(10, 20).unwrap();
        assert_eq!(router.tau(), 2.75);
        assert!(router.set_tau(0.1).is_err());
    }

    proptest! {
        #[test]
        fn every_method_builds_a_total_partition(n in 1usize..12, groups_seed in 0u64..1000) {
            let l: Vec<String> = (0..n).map(|i| format!("q{i}")).collect();
            let groups = 1 + (groups_seed as usize) % n;
            let meta: Vec<LanguageMetadata> = l.iter().enumerate().map(|(i, c)| LanguageMetadata {
                code: c.clone(), family: format!("f{}", i % groups), pairs: 1,
            }).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(groups_seed);
            let emb: BTreeMap<String, Vec<f64>> = l.iter().map(|c| {
                (c.clone(), (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            }).collect();
            let maps = [
                assign_each(&l).unwrap(),
                assign_random(&l, groups, groups_seed).unwrap(),
                assign_family(&meta).unwrap(),
                assign_by_embedding(&emb, groups, groups_seed).unwrap(),
            ];
            for m in &maps {
                let mut seen = 0;
                for g in m.groups() {
                    prop_assert!(!g.is_empty());
                    seen += g.len();
                }
                prop_assert_eq!(seen, n);
                for c in &l {
                    prop_assert!(m.decoder(c).unwrap() < m.decoders());
                }
            }
            let sizes: Vec<usize> = maps[1].groups().iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn embedding_assignment_is_permutation_equivariant(seed in 0u64..500, n in 3usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vectors: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let names: Vec<String> = (0..n).map(|i| format!("a{i}")).collect();
            let mut renamed = names.clone();
            renamed.shuffle(&mut rng);
            let e1: BTreeMap<String, Vec<f64>> = names.iter().cloned().zip(vectors.clone()).collect();
            let e2: BTreeMap<String, Vec<f64>> = renamed.iter().cloned().zip(vectors).collect();
            let k = 1 + (seed as usize) % n;
            let m1 = assign_by_embedding(&e1, k, 9).unwrap();
            let m2 = assign_by_embedding(&e2, k, 9).unwrap();
            for (a, b) in names.iter().zip(&renamed) {
                prop_assert_eq!(m1.decoder(a).unwrap(), m2.decoder(b).unwrap());
            }
        }

        #[test]
        fn gumbel_probs_are_a_distribution(
            logits in prop::collection::vec(-20.0f64..20.0, 1..8),
            tau in 0.5f64..5.0,
            seed in 0u64..1000,
        ) {
            let u = draw_uniforms(&mut ChaCha8Rng::seed_from_u64(seed), logits.len());
            let p = gumbel_probs(&logits, &u, tau).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn straight_through_argmax_is_shift_invariant(
            logits in prop::collection::vec(-5.0f64..5.0, 2..6),
            shift in -50.0f64..50.0,
            seed in 0u64..1000,
        ) {
            let u = draw_uniforms(&mut ChaCha8Rng::seed_from_u64(seed), logits.len());
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            prop_assert_eq!(gumbel_argmax(&logits, &u), gumbel_argmax(&shifted, &u));
        }
    }
}
