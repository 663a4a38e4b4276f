//! Pseudo-glosses: content-word lemmas from tagged sentences, a prototype
//! bank scored against sign representations by cosine similarity, and the
//! presence / localisation objective trained with binary cross-entropy.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::Linear;
use crate::error::{Error, Result};
use crate::numerics::{softplus_inverse, Graph, ParamId, ParamKind, ParamStore, Tensor, Var};

/// Universal POS tags kept as pseudo-glosses.
pub const CONTENT_TAGS: [&str; 7] = ["NOUN", "NUM", "ADV", "PRON", "PROPN", "ADJ", "VERB"];

pub const UPOS_TAGS: [&str; 17] = [
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM", "PART", "PRON", "PROPN", "PUNCT", "SCONJ",
    "SYM", "VERB", "X",
];

pub const COSINE_EPS: f64 = 1e-6;
pub const PROB_CLIP: f64 = 1e-7;
pub const DEFAULT_THRESHOLD: f64 = 0.2;
pub const TAU_INIT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaggedToken {
    pub surface: String,
    pub lemma: String,
    pub upos: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaggedSentence {
    pub id: String,
    pub sentence: String,
    pub tokens: Vec<TaggedToken>,
}

impl TaggedSentence {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Format(format!("sentence {} has no tokens", self.id)));
        }
        if let Some(t) = self.tokens.iter().find(|t| !UPOS_TAGS.contains(&t.upos.as_str())) {
            return Err(Error::Format(format!("sentence {}: unknown UPOS tag '{}'", self.id, t.upos)));
        }
        Ok(())
    }
}

/// Parses a line-delimited JSON tagged corpus. Blank lines are skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<TaggedSentence>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: TaggedSentence = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("corpus line {}: {e}", n + 1)))?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_corpus(corpus: &[TaggedSentence]) -> String {
    corpus
        .iter()
        .map(|s| serde_json::to_string(s).expect("tagged sentence serialises") + "\n")
        .collect()
}

pub fn load_corpus(path: &Path) -> Result<Vec<TaggedSentence>> {
    parse_corpus(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Content-word lemmas in sentence order, duplicates kept.
pub fn extract_pseudo_glosses(s: &TaggedSentence) -> Vec<String> {
    s.tokens
        .iter()
        .filter(|t| CONTENT_TAGS.contains(&t.upos.as_str()))
        .map(|t| t.lemma.clone())
        .collect()
}

/// Dense gloss indices `0..U-1`; index `U-1` is the zero prototype.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PseudoGlossVocab {
    glosses: Vec<String>,
    index: HashMap<String, usize>,
}

impl PseudoGlossVocab {
    pub fn from_glosses<I: IntoIterator<Item = S>, S: Into<String>>(glosses: I) -> Self {
        let mut v = Self::default();
        for g in glosses {
            let g = g.into();
            if !v.index.contains_key(&g) {
                v.index.insert(g.clone(), v.glosses.len());
                v.glosses.push(g);
            }
        }
        v
    }

    /// Number of gloss prototypes, excluding the zero prototype.
    pub fn len(&self) -> usize {
        self.glosses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glosses.is_empty()
    }

    /// Total prototype count `U`, including the zero prototype.
    pub fn prototypes(&self) -> usize {
        self.glosses.len() + 1
    }

    pub fn zero_index(&self) -> usize {
        self.glosses.len()
    }

    pub fn get(&self, gloss: &str) -> Option<usize> {
        self.index.get(gloss).copied()
    }

    pub fn gloss(&self, i: usize) -> Option<&str> {
        self.glosses.get(i).map(String::as_str)
    }

    pub fn glosses(&self) -> &[String] {
        &self.glosses
    }

    /// Set of known gloss indices present in `glosses`.
    pub fn index_set(&self, glosses: &[String]) -> BTreeSet<usize> {
        glosses.iter().filter_map(|g| self.get(g)).collect()
    }

    /// 0/1 presence targets over the gloss prototypes (length `U-1`).
    pub fn targets(&self, glosses: &[String]) -> Vec<f64> {
        let mut t = vec![0.0; self.len()];
        for i in self.index_set(glosses) {
            t[i] = 1.0;
        }
        t
    }

    pub fn to_text(&self) -> String {
        self.glosses.iter().map(|g| format!("{g}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut v = Self::default();
        for (n, line) in text.lines().enumerate() {
            let g = line.trim();
            if g.is_empty() {
                continue;
            }
            if v.index.contains_key(g) {
                return Err(Error::Vocabulary(format!("duplicate gloss '{g}' on line {}", n + 1)));
            }
            v.index.insert(g.to_string(), v.glosses.len());
            v.glosses.push(g.to_string());
        }
        Ok(v)
    }
}

/// Unique glosses in first-occurrence order over the corpus.
pub fn build_vocab(corpus: &[TaggedSentence]) -> Result<PseudoGlossVocab> {
    if corpus.is_empty() {
        return Err(Error::Domain("cannot build a gloss vocabulary from an empty corpus".into()));
    }
    Ok(PseudoGlossVocab::from_glosses(corpus.iter().flat_map(extract_pseudo_glosses)))
}

/// Word vectors keyed by token: a header `count dim`, then one token followed
/// by `dim` floats per line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub words: Vec<String>,
    pub vectors: HashMap<String, Vec<f64>>,
}

pub const EMBEDDING_DIM: usize = 300;

impl EmbeddingTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Format("empty embedding table".into()))?;
        let mut h = header.split_whitespace();
        let parse_usize = |s: Option<&str>| -> Result<usize> {
            s.and_then(|x| x.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad embedding header '{header}'")))
        };
        let count = parse_usize(h.next())?;
        let dim = parse_usize(h.next())?;
        if dim == 0 || h.next().is_some() {
            return Err(Error::Format(format!("bad embedding header '{header}'")));
        }
        let mut table = Self { dim, ..Self::default() };
        for (n, line) in lines {
            let mut parts = line.split_whitespace();
            let word = parts.next().expect("non-empty line").to_string();
            let vec = parts
                .map(|p| p.parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| Error::Format(format!("embedding line {}: non-numeric value", n + 1)))?;
            if vec.len() != dim {
                return Err(Error::Format(format!(
                    "embedding line {}: {} values, header declares {dim}",
                    n + 1,
                    vec.len()
                )));
            }
            if table.vectors.insert(word.clone(), vec).is_some() {
                return Err(Error::Format(format!("embedding line {}: duplicate token '{word}'", n + 1)));
            }
            table.words.push(word);
        }
        if table.words.len() != count {
            return Err(Error::Format(format!(
                "embedding table has {} rows, header declares {count}",
                table.words.len()
            )));
        }
        Ok(table)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.words.len(), self.dim);
        for w in &self.words {
            s.push_str(w);
            for v in &self.vectors[w] {
                s.push_str(&format!(" {v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// `D × (U-1)` matrix whose columns are the vectors of the vocab glosses.
    pub fn prototype_columns(&self, vocab: &PseudoGlossVocab) -> Result<Tensor> {
        let n = vocab.len();
        let mut p = Tensor::zeros(&[self.dim, n]);
        for (j, g) in vocab.glosses().iter().enumerate() {
            let v = self
                .vectors
                .get(g)
                .ok_or_else(|| Error::Vocabulary(format!("gloss '{g}' missing from the embedding table")))?;
            for (k, &x) in v.iter().enumerate() {
                p.set(k, j, x);
            }
        }
        Ok(p)
    }
}

/// Prototype matrix `P` (gloss columns plus a fixed zero column), the
/// projection from sign features into embedding space, and the two
/// softmax temperatures stored pre-softplus.
#[derive(Clone, Debug)]
pub struct PrototypeBank {
    pub projection: Linear,
    pub prototypes: ParamId,
    pub tau_t: ParamId,
    pub tau_u: ParamId,
    pub dim: usize,
    pub glosses: usize,
}

pub const PRETRAIN_PREFIX: &str = "pretrain.";

impl PrototypeBank {
    /// `columns` is `D × (U-1)`, usually from [`EmbeddingTable::prototype_columns`].
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        in_dim: usize,
        columns: Tensor,
        learnable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if columns.rank() != 2 || columns.cols() == 0 {
            return Err(Error::Config(format!("prototype columns must be D×(U-1), got {:?}", columns.shape())));
        }
        let (dim, glosses) = (columns.rows(), columns.cols());
        let projection = Linear::new(store, "pretrain.projection", in_dim, dim, true, true, rng);
        let prototypes = store.add("pretrain.prototypes", columns, ParamKind::Weight, learnable);
        let raw = Tensor::scalar(softplus_inverse(TAU_INIT));
        let tau_t = store.add("pretrain.tau_t", raw.clone(), ParamKind::Temperature, true);
        let tau_u = store.add("pretrain.tau_u", raw, ParamKind::Temperature, true);
        Ok(Self { projection, prototypes, tau_t, tau_u, dim, glosses })
    }

    pub fn prototypes_total(&self) -> usize {
        self.glosses + 1
    }

    /// Full `D × U` prototype matrix including the zero column.
    pub fn matrix(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let p = g.param(store, self.prototypes);
        let zero = g.input(Tensor::zeros(&[self.dim, 1]));
        g.concat_cols(&[p, zero])
    }

    pub fn temperatures(&self, g: &mut Graph, store: &ParamStore) -> (Var, Var) {
        let t = g.param(store, self.tau_t);
        let u = g.param(store, self.tau_u);
        (g.softplus(t), g.softplus(u))
    }

    /// `S`: cosine scores of projected sign features against every prototype.
    pub fn score(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let zp = self.projection.forward(g, store, z)?;
        let p = self.matrix(g, store)?;
        g.cosine(zp, p, COSINE_EPS)
    }

    /// Localisation map and presence scores for one sign representation.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<PresenceVars> {
        let s = self.score(g, store, z)?;
        let (tt, tu) = self.temperatures(g, store);
        presence(g, s, tt, tu)
    }

    pub fn localization(&self, store: &ParamStore, z: &Tensor) -> Result<LocalizationMap> {
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let out = self.forward(&mut g, store, zv)?;
        Ok(LocalizationMap { e: g.value(out.e).clone(), e_hat: g.value(out.e_hat).data().to_vec() })
    }
}

pub struct PresenceVars {
    pub e: Var,
    pub e_hat: Var,
}

/// `E = softmax_T(S/τ_T) ⊙ softmax_U(S/τ_U)` and `Ê_j = Σ_i E_ij`.
pub fn presence(g: &mut Graph, s: Var, tau_t: Var, tau_u: Var) -> Result<PresenceVars> {
    let st = g.softmax_temp(s, 0, tau_t)?;
    let su = g.softmax_temp(s, 1, tau_u)?;
    let e = g.mul(st, su)?;
    let e_hat = g.sum_rows(e)?;
    Ok(PresenceVars { e, e_hat })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationMap {
    /// `T × U` occurrence scores.
    pub e: Tensor,
    /// Per-prototype presence, length `U`.
    pub e_hat: Vec<f64>,
}

pub fn presence_tensor(s: &Tensor, tau_t: f64, tau_u: f64) -> Result<LocalizationMap> {
    let mut g = Graph::new();
    let sv = g.input(s.clone());
    let tt = g.input(Tensor::scalar(tau_t));
    let tu = g.input(Tensor::scalar(tau_u));
    let out = presence(&mut g, sv, tt, tu)?;
    Ok(LocalizationMap { e: g.value(out.e).clone(), e_hat: g.value(out.e_hat).data().to_vec() })
}

/// Mean BCE over the gloss prototypes; `targets` has length `U-1` and the
/// trailing zero prototype is excluded. Presence is clipped away from 0/1.
pub fn bce_presence_loss(g: &mut Graph, e_hat: Var, targets: &[f64]) -> Result<Var> {
    let u = g.value(e_hat).len();
    if targets.len() + 1 != u {
        return Err(Error::dim("bce_presence_loss", &[u], &[targets.len() + 1]));
    }
    let clipped = g.clamp(e_hat, PROB_CLIP, 1.0 - PROB_CLIP);
    let mut t = targets.to_vec();
    t.push(0.0);
    let mut include = vec![true; u];
    include[u - 1] = false;
    g.bce(clipped, &t, &include)
}

pub fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} must lie in (0, 1)")));
    }
    Ok(())
}

/// Inclusive time span `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn iou(&self, other: &Span) -> f64 {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        if lo > hi {
            return 0.0;
        }
        let inter = (hi - lo + 1) as f64;
        inter / ((self.len() + other.len()) as f64 - inter)
    }
}

/// Maximal runs of consecutive timesteps with `E[i, j] >= threshold`, one
/// list per prototype column.
pub fn localize(e: &Tensor, threshold: f64) -> Result<Vec<Vec<Span>>> {
    check_threshold(threshold)?;
    if e.rank() != 2 {
        return Err(Error::dim("localize", e.shape(), &[0, 0]));
    }
    let (t, u) = (e.rows(), e.cols());
    let mut out = vec![Vec::new(); u];
    for (j, spans) in out.iter_mut().enumerate() {
        let mut start = None;
        for i in 0..t {
            match (e.at(i, j) >= threshold, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    spans.push(Span { start: s, end: i - 1 });
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            spans.push(Span { start: s, end: t - 1 });
        }
    }
    Ok(out)
}

/// Gloss indices whose presence reaches `threshold`; the zero prototype
/// (last entry) is never predicted.
pub fn predicted_set(e_hat: &[f64], threshold: f64) -> BTreeSet<usize> {
    let n = e_hat.len().saturating_sub(1);
    (0..n).filter(|&j| e_hat[j] >= threshold).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged precision, recall and F1 over per-sample sets.
pub fn presence_prf1(predicted: &[BTreeSet<usize>], truth: &[BTreeSet<usize>]) -> Result<Prf1> {
    if predicted.len() != truth.len() {
        return Err(Error::dim("presence_prf1", &[predicted.len()], &[truth.len()]));
    }
    let (mut tp, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (p, t) in predicted.iter().zip(truth) {
        tp += p.intersection(t).count();
        np += p.len();
        nt += t.len();
    }
    let precision = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
    let recall = if nt == 0 { 0.0 } else { tp as f64 / nt as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(Prf1 { precision, recall, f1 })
}
