//! Seeded synthetic sign videos: feature sequences built from planted gloss
//! segments, paired with tagged sentences that realise the same glosses in
//! a different order with function-word filler.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pseudo_gloss::{self, EmbeddingTable, Span, TaggedSentence, TaggedToken, EMBEDDING_DIM};
use crate::spatial::feature_file;

/// How sign order maps to spoken word order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grammar {
    Identity,
    Reverse,
    /// Verbs move to the second slot, everything else keeps sign order.
    VerbSecond,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub glosses: usize,
    pub feature_dim: usize,
    pub segment_len: (usize, usize),
    pub transition_len: (usize, usize),
    pub glosses_per_sample: (usize, usize),
    pub noise: f64,
    pub grammar: Grammar,
    pub train_samples: usize,
    pub test_samples: usize,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            glosses: 20,
            feature_dim: 32,
            segment_len: (4, 8),
            transition_len: (1, 3),
            glosses_per_sample: (2, 4),
            noise: 0.05,
            grammar: Grammar::VerbSecond,
            train_samples: 500,
            test_samples: 100,
            embedding_dim: EMBEDDING_DIM,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.glosses < 2 {
            return bad(format!("need at least 2 glosses, got {}", self.glosses));
        }
        if self.feature_dim == 0 || self.embedding_dim == 0 {
            return bad("feature and embedding dims must be positive".into());
        }
        let (s0, s1) = self.segment_len;
        if s0 == 0 || s0 > s1 {
            return bad(format!("segment length range {s0}..={s1} is infeasible"));
        }
        if self.transition_len.0 > self.transition_len.1 {
            return bad("transition length range is inverted".into());
        }
        let (g0, g1) = self.glosses_per_sample;
        if g0 == 0 || g0 > g1 || g1 > self.glosses {
            return bad(format!("glosses per sample {g0}..={g1} infeasible for {} glosses", self.glosses));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be a finite non-negative number", self.noise));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldSpan {
    pub gloss: String,
    pub start: usize,
    pub end: usize,
}

impl GoldSpan {
    pub fn span(&self) -> Span {
        Span { start: self.start, end: self.end }
    }

    /// Span on the encoder's downsampled time axis (indices halved).
    pub fn downsampled(&self) -> Span {
        Span { start: self.start / 2, end: self.end / 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub features: Tensor,
    pub sentence: TaggedSentence,
    /// Glosses in signing order.
    pub sign_glosses: Vec<String>,
    pub spans: Vec<GoldSpan>,
}

impl SynthSample {
    /// Glosses in spoken order, as recovered from the sentence.
    pub fn gold_glosses(&self) -> Vec<String> {
        pseudo_gloss::extract_pseudo_glosses(&self.sentence)
    }

    pub fn text(&self) -> &str {
        &self.sentence.sentence
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pos {
    Noun,
    Verb,
    Adj,
    Adv,
}

impl Pos {
    fn upos(self) -> &'static str {
        match self {
            Pos::Noun => "NOUN",
            Pos::Verb => "VERB",
            Pos::Adj => "ADJ",
            Pos::Adv => "ADV",
        }
    }
}

const LEXICON: [(&str, Pos); 24] = [
    ("regen", Pos::Noun),
    ("kommen", Pos::Verb),
    ("sonne", Pos::Noun),
    ("kalt", Pos::Adj),
    ("wind", Pos::Noun),
    ("scheinen", Pos::Verb),
    ("schnee", Pos::Noun),
    ("heute", Pos::Adv),
    ("wolke", Pos::Noun),
    ("warm", Pos::Adj),
    ("nebel", Pos::Noun),
    ("ziehen", Pos::Verb),
    ("norden", Pos::Noun),
    ("stark", Pos::Adj),
    ("sueden", Pos::Noun),
    ("bleiben", Pos::Verb),
    ("nacht", Pos::Noun),
    ("morgen", Pos::Adv),
    ("kueste", Pos::Noun),
    ("mild", Pos::Adj),
    ("gewitter", Pos::Noun),
    ("fallen", Pos::Verb),
    ("frost", Pos::Noun),
    ("klar", Pos::Adj),
];

/// The gloss inventory: lemma, part of speech and feature signature.
#[derive(Clone, Debug)]
pub struct GlossInventory {
    pub lemmas: Vec<String>,
    pos: Vec<Pos>,
    pub signatures: Vec<Vec<f64>>,
}

impl GlossInventory {
    fn new(config: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX);
        let mut lemmas = Vec::new();
        let mut pos = Vec::new();
        for i in 0..config.glosses {
            let (lemma, p) = if i < LEXICON.len() {
                (LEXICON[i].0.to_string(), LEXICON[i].1)
            } else {
                (format!("wort{i}"), Pos::Noun)
            };
            lemmas.push(lemma);
            pos.push(p);
        }
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let signatures = (0..config.glosses)
            .map(|_| {
                let v: Vec<f64> = (0..config.feature_dim).map(|_| normal.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| f64::from((x / n) as f32)).collect()
            })
            .collect();
        Self { lemmas, pos, signatures }
    }

    /// Seeded stand-in word vectors for every gloss lemma.
    pub fn embeddings(&self, dim: usize, seed: u64) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX - 1);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let mut t = EmbeddingTable { dim, ..EmbeddingTable::default() };
        for l in &self.lemmas {
            let v = (0..dim).map(|_| f64::from(normal.sample(&mut rng) as f32)).collect();
            t.vectors.insert(l.clone(), v);
            t.words.push(l.clone());
        }
        t
    }
}

fn inflect(lemma: &str, pos: Pos) -> String {
    match pos {
        Pos::Verb => format!("{}t", lemma.strip_suffix("en").unwrap_or(lemma)),
        Pos::Adj => format!("{lemma}e"),
        _ => lemma.to_string(),
    }
}

fn token(surface: &str, lemma: &str, upos: &str) -> TaggedToken {
    TaggedToken { surface: surface.into(), lemma: lemma.into(), upos: upos.into() }
}

fn realise(inv: &GlossInventory, grammar: Grammar, sign_order: &[usize], id: &str) -> TaggedSentence {
    let mut order: Vec<usize> = sign_order.to_vec();
    match grammar {
        Grammar::Identity => {}
        Grammar::Reverse => order.reverse(),
        Grammar::VerbSecond => {
            if let Some(k) = order.iter().position(|&g| inv.pos[g] == Pos::Verb) {
                let v = order.remove(k);
                order.insert(1.min(order.len()), v);
            }
        }
    }
    let mut tokens = Vec::new();
    for (n, &g) in order.iter().enumerate() {
        let (lemma, pos) = (&inv.lemmas[g], inv.pos[g]);
        if n > 0 && n + 1 == order.len() && order.len() > 2 {
            tokens.push(token("und", "und", "CCONJ"));
        }
        if pos == Pos::Noun {
            if g % 3 == 0 {
                tokens.push(token("im", "in", "ADP"));
            } else {
                tokens.push(token("der", "der", "DET"));
            }
        }
        tokens.push(token(&inflect(lemma, pos), lemma, pos.upos()));
    }
    tokens.push(token(".", ".", "PUNCT"));
    let sentence = tokens.iter().map(|t| t.surface.as_str()).collect::<Vec<_>>().join(" ");
    TaggedSentence { id: id.to_string(), sentence, tokens }
}

fn sample_one(config: &SynthConfig, inv: &GlossInventory, split: u64, index: usize, id: String) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream((split << 32) | index as u64);
    let k = rng.random_range(config.glosses_per_sample.0..=config.glosses_per_sample.1);
    let mut pool: Vec<usize> = (0..config.glosses).collect();
    pool.shuffle(&mut rng);
    let sign_order: Vec<usize> = pool[..k].to_vec();

    let c = config.feature_dim;
    let noise = (config.noise > 0.0).then(|| Normal::new(0.0, config.noise).expect("checked noise"));
    let frame = |base: Option<&[f64]>, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..c)
            .map(|j| {
                let v = base.map_or(0.0, |b| b[j]) + noise.as_ref().map_or(0.0, |n| n.sample(rng));
                f64::from(v as f32)
            })
            .collect::<Vec<f64>>()
    };
    let mut rows: Vec<f64> = Vec::new();
    let mut t = 0;
    let mut spans = Vec::with_capacity(k);
    let (tr0, tr1) = config.transition_len;
    let transition = |rows: &mut Vec<f64>, t: &mut usize, rng: &mut ChaCha8Rng| {
        for _ in 0..rng.random_range(tr0..=tr1) {
            rows.extend(frame(None, rng));
            *t += 1;
        }
    };
    transition(&mut rows, &mut t, &mut rng);
    for (n, &g) in sign_order.iter().enumerate() {
        if n > 0 {
            transition(&mut rows, &mut t, &mut rng);
        }
        let len = rng.random_range(config.segment_len.0..=config.segment_len.1);
        spans.push(GoldSpan { gloss: inv.lemmas[g].clone(), start: t, end: t + len - 1 });
        for _ in 0..len {
            rows.extend(frame(Some(&inv.signatures[g]), &mut rng));
        }
        t += len;
    }
    transition(&mut rows, &mut t, &mut rng);
    SynthSample {
        features: Tensor::matrix(t, c, rows).expect("row count matches"),
        sentence: realise(inv, config.grammar, &sign_order, &id),
        sign_glosses: sign_order.iter().map(|&g| inv.lemmas[g].clone()).collect(),
        spans,
        id,
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<SynthSample>,
    pub embeddings: EmbeddingTable,
}

#[derive(Clone, Debug)]
pub struct SynthSplits {
    pub train: Dataset,
    pub test: Dataset,
    pub inventory: GlossInventory,
}

pub fn generate(config: &SynthConfig) -> Result<SynthSplits> {
    config.validate()?;
    let inventory = GlossInventory::new(config);
    let embeddings = inventory.embeddings(config.embedding_dim, config.seed);
    let make = |split: u64, n: usize, prefix: &str| Dataset {
        samples: (0..n)
            .map(|i| sample_one(config, &inventory, split, i, format!("{prefix}{i:05}")))
            .collect(),
        embeddings: embeddings.clone(),
    };
    Ok(SynthSplits {
        train: make(0, config.train_samples, "train"),
        test: make(1, config.test_samples, "test"),
        inventory,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpanRecord {
    id: String,
    spans: Vec<GoldSpan>,
}

pub fn write_spans(samples: &[SynthSample]) -> String {
    samples
        .iter()
        .map(|s| {
            let r = SpanRecord { id: s.id.clone(), spans: s.spans.clone() };
            serde_json::to_string(&r).expect("span record serialises") + "\n"
        })
        .collect()
}

/// Parses the gold-span sidecar into `(id, spans)` pairs.
pub fn parse_spans(text: &str) -> Result<Vec<(String, Vec<GoldSpan>)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: SpanRecord =
            serde_json::from_str(line).map_err(|e| Error::Format(format!("span line {}: {e}", n + 1)))?;
        if let Some(s) = r.spans.iter().find(|s| s.start > s.end) {
            return Err(Error::Format(format!("span line {}: start {} after end {}", n + 1, s.start, s.end)));
        }
        out.push((r.id, r.spans));
    }
    Ok(out)
}

pub const FEATURE_DIR: &str = "features";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const SPANS_FILE: &str = "spans.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";

pub fn feature_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(FEATURE_DIR).join(format!("{id}.s2gf"))
}

fn write(path: PathBuf, contents: String) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

/// Writes features, tagged corpus, span sidecar and embedding table into
/// `dir`, which must already exist.
pub fn export(dataset: &Dataset, dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist")));
    }
    let fdir = dir.join(FEATURE_DIR);
    fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    for s in &dataset.samples {
        feature_file::save(&feature_path(dir, &s.id), &s.features)?;
    }
    let sentences: Vec<TaggedSentence> = dataset.samples.iter().map(|s| s.sentence.clone()).collect();
    write(dir.join(CORPUS_FILE), pseudo_gloss::write_corpus(&sentences))?;
    write(dir.join(SPANS_FILE), write_spans(&dataset.samples))?;
    write(dir.join(EMBEDDINGS_FILE), dataset.embeddings.to_text())
}

/// Reads a directory written by [`export`].
pub fn load(dir: &Path) -> Result<Dataset> {
    let corpus = pseudo_gloss::load_corpus(&dir.join(CORPUS_FILE))?;
    let spans_path = dir.join(SPANS_FILE);
    let spans = parse_spans(&fs::read_to_string(&spans_path).map_err(|e| Error::io(&spans_path, e))?)?;
    if spans.len() != corpus.len() {
        return Err(Error::Format(format!("{} span records for {} sentences", spans.len(), corpus.len())));
    }
    let embeddings = EmbeddingTable::load(&dir.join(EMBEDDINGS_FILE))?;
    let mut samples = Vec::with_capacity(corpus.len());
    for (sentence, (id, spans)) in corpus.into_iter().zip(spans) {
        if sentence.id != id {
            return Err(Error::Format(format!("span record {id} does not match sentence {}", sentence.id)));
        }
        let features = feature_file::load(&feature_path(dir, &id))?;
        let sign_glosses = spans.iter().map(|s| s.gloss.clone()).collect();
        samples.push(SynthSample { id, features, sentence, sign_glosses, spans });
    }
    Ok(Dataset { samples, embeddings })
}

/// Renders frames as images for the pixel path: each gloss paints a block
/// whose position and colour derive from its signature; transitions are
/// blank.
pub fn render_frames(sample: &SynthSample, inventory: &GlossInventory, image_size: usize, channels: usize) -> Tensor {
    let t = sample.features.rows();
    let mut out = Tensor::zeros(&[t, image_size, image_size, channels]);
    let frame_len = image_size * image_size * channels;
    let half = (image_size / 2).max(1);
    for span in &sample.spans {
        let g = inventory.lemmas.iter().position(|l| *l == span.gloss).unwrap_or(0);
        let sig = &inventory.signatures[g];
        let (oy, ox) = ((g / 2) % 2 * (image_size - half), g % 2 * (image_size - half));
        for f in span.start..=span.end.min(t - 1) {
            let frame = &mut out.data_mut()[f * frame_len..(f + 1) * frame_len];
            for y in oy..oy + half {
                for x in ox..ox + half {
                    for c in 0..channels {
                        frame[(y * image_size + x) * channels + c] = 0.5 + 0.5 * sig[c % sig.len()].tanh();
                    }
                }
            }
        }
    }
    out
}
