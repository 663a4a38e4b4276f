//! Two-stage training: pseudo-gloss pretraining of the sign encoder, then
//! translation through the adapted frozen language model. Also covers the
//! text-only LM pretraining that produces the frozen decoder.

pub mod checkpoint;
pub mod log;
pub mod optim;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, Manifest, ParamEntry, Stage};
pub use log::{parse_log, LogRecord, TrainLog};
pub use optim::{clip_grad_norm, lr_at, Adam};

use crate::decoder::{AdaptedDecoder, DecoderConfig, FrozenLM, LmConfig, Tokenizer};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::pseudo_gloss::{
    self, bce_presence_loss, predicted_set, presence_prf1, EmbeddingTable, LocalizationMap, Prf1, PrototypeBank,
    PseudoGlossVocab, Span, DEFAULT_THRESHOLD,
};
use crate::sign_encoder::{EncoderConfig, SignEncoder};
use crate::spatial::{BatchNorm, BatchStats, SpatialConfig, SpatialModel};
use crate::synthdata::{self, GlossInventory, SynthConfig, SynthSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub warmup_epochs: f64,
    pub batch: usize,
    pub label_smoothing: f64,
    /// Keep every n-th input frame.
    pub frame_subsample_stride: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.001,
            clip_norm: 1.0,
            epochs: 100,
            warmup_epochs: 5.0,
            batch: 8,
            label_smoothing: 0.1,
            frame_subsample_stride: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.epochs == 0 || self.batch == 0 || self.frame_subsample_stride == 0 {
            return bad("epochs, batch and frame_subsample_stride must be at least 1".into());
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.epochs as f64) {
            return bad(format!(
                "warmup_epochs {} must be non-negative and below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0,1)", self.label_smoothing));
        }
        Ok(())
    }
}

/// Everything needed to rebuild and retrain a model, serialised as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    /// When set, inputs are rendered frames passed through the adapted
    /// spatial backbone; otherwise they are precomputed feature sequences.
    pub spatial: Option<SpatialConfig>,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub learnable_prototypes: bool,
    pub threshold: f64,
    pub beam_width: usize,
    pub max_len: usize,
    pub lm_pretrain: TrainConfig,
    pub pretrain: TrainConfig,
    pub translate: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let stage = |epochs, lr| TrainConfig { epochs, lr, frame_subsample_stride: 1, ..TrainConfig::default() };
        Self {
            encoder: EncoderConfig {
                layers: 2,
                hidden: synth.feature_dim,
                heads: 4,
                ffn: 64,
                downsample_after_layer: 1,
                ..EncoderConfig::default()
            },
            // Eight heads means eight independent gates per layer; with
            // fewer, every gate can close for good in the first steps.
            decoder: DecoderConfig {
                lm: LmConfig { d_model: 32, heads: 8, layers: 2, ffn: 64 },
                ..DecoderConfig::default()
            },
            synth,
            spatial: None,
            learnable_prototypes: true,
            threshold: DEFAULT_THRESHOLD,
            beam_width: 4,
            max_len: 16,
            lm_pretrain: TrainConfig { label_smoothing: 0.0, ..stage(10, 3e-3) },
            pretrain: stage(30, 3e-4),
            translate: stage(30, 5e-3),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.encoder.validate()?;
        for c in [&self.lm_pretrain, &self.pretrain, &self.translate] {
            c.validate()?;
        }
        pseudo_gloss::check_threshold(self.threshold)?;
        if self.beam_width == 0 || self.max_len == 0 {
            return Err(Error::Config("beam_width and max_len must be at least 1".into()));
        }
        let input_dim = match &self.spatial {
            Some(s) => {
                s.validate()?;
                s.out_dim
            }
            None => self.synth.feature_dim,
        };
        if input_dim != self.encoder.hidden {
            return Err(Error::Config(format!(
                "sign features have {input_dim} channels but the encoder width is {}",
                self.encoder.hidden
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

/// One training pair: the sign input (features `T×C` or frames `T×H×W×ch`),
/// its pseudo-glosses and the target sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub input: Tensor,
    pub glosses: Vec<String>,
    pub text: String,
}

impl Example {
    pub fn from_synth(s: &SynthSample) -> Self {
        Self {
            id: s.id.clone(),
            input: s.features.clone(),
            glosses: pseudo_gloss::extract_pseudo_glosses(&s.sentence),
            text: s.text().to_string(),
        }
    }

    /// Uses rendered frames instead of the feature sequence.
    pub fn from_synth_frames(s: &SynthSample, inventory: &GlossInventory, cfg: &SpatialConfig) -> Self {
        Self { input: synthdata::render_frames(s, inventory, cfg.image_size, cfg.channels), ..Self::from_synth(s) }
    }
}

/// Keeps every `stride`-th entry along the leading (time) axis.
pub fn subsample(input: &Tensor, stride: usize) -> Result<Tensor> {
    if stride == 0 || input.rank() == 0 {
        return Err(Error::Config("subsampling needs a positive stride and a time axis".into()));
    }
    if stride == 1 {
        return Ok(input.clone());
    }
    let t = input.shape()[0];
    let inner = input.len() / t.max(1);
    let keep: Vec<usize> = (0..t).step_by(stride).collect();
    let mut data = Vec::with_capacity(keep.len() * inner);
    for i in keep.iter() {
        data.extend_from_slice(&input.data()[i * inner..(i + 1) * inner]);
    }
    let mut shape = input.shape().to_vec();
    shape[0] = keep.len();
    Tensor::new(shape, data)
}

/// Maps an input-frame span onto the encoder's output time axis.
pub fn span_on_output(span: Span, frame_stride: usize, encoder: &EncoderConfig) -> Span {
    let k = frame_stride * if encoder.downsample { encoder.stride } else { 1 };
    Span { start: span.start / k, end: span.end / k }
}

/// Optional spatial front-end followed by the sign encoder.
#[derive(Clone, Debug)]
pub struct SignModel {
    pub spatial: Option<SpatialModel>,
    pub encoder: SignEncoder,
    pub frame_stride: usize,
}

impl SignModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &ExperimentConfig,
        frame_stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let spatial = match &config.spatial {
            Some(c) => {
                let mut m = SpatialModel::new(store, c.clone(), rng)?;
                m.inject_adapters(store, rng)?;
                Some(m)
            }
            None => None,
        };
        let encoder = SignEncoder::new(store, config.encoder.clone(), rng)?;
        Ok(Self { spatial, encoder, frame_stride })
    }

    fn spatial_trains(&self, store: &ParamStore) -> Option<&BatchNorm> {
        self.spatial.as_ref().filter(|s| store.get(s.bn.gain).trainable).map(|s| &s.bn)
    }

    /// Sign representations `Z` for a batch. With `train` set and trainable
    /// spatial adapters, normalisation uses batch statistics, which are
    /// returned for the running averages.
    pub fn encode_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[&Tensor],
        train: bool,
    ) -> Result<(Vec<Var>, Option<BatchStats>)> {
        let inputs = inputs.iter().map(|x| subsample(x, self.frame_stride)).collect::<Result<Vec<_>>>()?;
        let (z_star, stats) = match &self.spatial {
            Some(sp) if train && self.spatial_trains(store).is_some() => {
                let refs: Vec<&Tensor> = inputs.iter().collect();
                let (vars, stats) = sp.forward_train(g, store, &refs)?;
                (vars, Some(stats))
            }
            Some(sp) => (inputs.iter().map(|x| sp.forward_eval(g, store, x)).collect::<Result<Vec<_>>>()?, None),
            None => {
                if let Some(x) = inputs.iter().find(|x| x.rank() != 2) {
                    return Err(Error::dim("sign features", x.shape(), &[0, self.encoder.config.hidden]));
                }
                (inputs.into_iter().map(|x| g.input(x)).collect(), None)
            }
        };
        let z = z_star.into_iter().map(|x| self.encoder.encode(g, store, x)).collect::<Result<Vec<_>>>()?;
        Ok((z, stats))
    }

    /// Eval-mode `Z` for one input.
    pub fn encode(&self, store: &ParamStore, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (z, _) = self.encode_batch(&mut g, store, &[input], false)?;
        Ok(g.value(z[0]).clone())
    }

    /// Freezes the spatial adapters, readout, normalisation and encoder.
    pub fn freeze(&self, store: &mut ParamStore) {
        store.set_trainable_prefix("spatial.", false);
        self.encoder.freeze(store);
    }
}

/// Per-epoch numbers gathered by the training loops.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub metric: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub adam: Adam,
    pub epochs: Vec<EpochSummary>,
    /// Largest global gradient norm seen after clipping.
    pub max_clipped_norm: f64,
    /// Largest norm before clipping; shows whether clipping engaged.
    pub max_raw_norm: f64,
    /// First epoch (1-based) whose evaluation loss met the target.
    pub reached_target: Option<usize>,
}

/// Shared mini-batch loop: shuffling, backward, clipping, schedule, AdamW.
struct Loop<'a> {
    cfg: &'a TrainConfig,
    adam: Adam,
    step: usize,
    total_steps: usize,
    rng: ChaCha8Rng,
    max_clipped: f64,
    max_raw: f64,
}

impl<'a> Loop<'a> {
    fn new(cfg: &'a TrainConfig, samples: usize) -> Result<Self> {
        cfg.validate()?;
        if samples == 0 {
            return Err(Error::Domain("training set is empty".into()));
        }
        Ok(Self {
            cfg,
            adam: Adam::new(),
            step: 0,
            total_steps: cfg.epochs * samples.div_ceil(cfg.batch),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            max_clipped: 0.0,
            max_raw: 0.0,
        })
    }

    fn lr(&self) -> f64 {
        let f = (self.step + 1) as f64 / self.total_steps as f64;
        lr_at(f, self.cfg.lr, self.cfg.warmup_epochs, self.cfg.epochs as f64)
    }

    /// One pass over `n` samples; `batch_loss` builds the mean loss of the
    /// given sample indices. Returns the sample-weighted mean loss and the
    /// last learning rate used.
    fn epoch<F>(&mut self, store: &mut ParamStore, n: usize, bn: Option<&BatchNorm>, mut batch_loss: F) -> Result<(f64, f64)>
    where
        F: FnMut(&mut Graph, &ParamStore, &[usize]) -> Result<(Var, Option<BatchStats>)>,
    {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let (mut total, mut lr) = (0.0, 0.0);
        for chunk in order.chunks(self.cfg.batch) {
            let mut g = Graph::new();
            let (loss, stats) = batch_loss(&mut g, store, chunk)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss is {value} at step {}", self.step + 1)));
            }
            g.backward(loss)?;
            store.zero_grads();
            g.accumulate_into(store, 1.0);
            let raw = clip_grad_norm(store, self.cfg.clip_norm);
            self.max_raw = self.max_raw.max(raw);
            self.max_clipped = self.max_clipped.max(store.grad_norm());
            lr = self.lr();
            self.adam.step(store, lr, self.cfg.weight_decay)?;
            if let (Some(bn), Some(stats)) = (bn, stats) {
                bn.update_running(store, &stats);
            }
            self.step += 1;
            total += value * chunk.len() as f64;
        }
        Ok((total / n as f64, lr))
    }

    fn finish(self, epochs: Vec<EpochSummary>, reached_target: Option<usize>) -> TrainOutcome {
        TrainOutcome {
            adam: self.adam,
            epochs,
            max_clipped_norm: self.max_clipped,
            max_raw_norm: self.max_raw,
            reached_target,
        }
    }
}

fn mean_of(g: &mut Graph, losses: Vec<Var>) -> Result<Var> {
    let n = losses.len() as f64;
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = g.add(acc, l)?;
    }
    Ok(g.scale(acc, 1.0 / n))
}

// ---- pseudo-gloss pretraining ---------------------------------------------

/// Sign model plus the prototype head used only during pretraining.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub sign: SignModel,
    pub bank: PrototypeBank,
    pub vocab: PseudoGlossVocab,
}

impl PretrainModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &ExperimentConfig,
        vocab: PseudoGlossVocab,
        embeddings: &EmbeddingTable,
        rng: &mut R,
    ) -> Result<Self> {
        let sign = SignModel::new(store, config, config.pretrain.frame_subsample_stride, rng)?;
        let columns = embeddings.prototype_columns(&vocab)?;
        let bank = PrototypeBank::new(store, config.encoder.hidden, columns, config.learnable_prototypes, rng)?;
        Ok(Self { sign, bank, vocab })
    }

    fn batch_loss(&self, g: &mut Graph, store: &ParamStore, batch: &[&Example], train: bool) -> Result<(Var, Option<BatchStats>)> {
        let inputs: Vec<&Tensor> = batch.iter().map(|e| &e.input).collect();
        let (zs, stats) = self.sign.encode_batch(g, store, &inputs, train)?;
        let mut losses = Vec::with_capacity(zs.len());
        for (z, e) in zs.into_iter().zip(batch) {
            let p = self.bank.forward(g, store, z)?;
            losses.push(bce_presence_loss(g, p.e_hat, &self.vocab.targets(&e.glosses))?);
        }
        Ok((mean_of(g, losses)?, stats))
    }

    pub fn localization(&self, store: &ParamStore, input: &Tensor) -> Result<LocalizationMap> {
        self.bank.localization(store, &self.sign.encode(store, input)?)
    }

    /// Mean loss and micro-averaged presence P/R/F1 at `threshold`.
    pub fn evaluate(&self, store: &ParamStore, samples: &[Example], threshold: f64) -> Result<(f64, Prf1)> {
        pseudo_gloss::check_threshold(threshold)?;
        if samples.is_empty() {
            return Err(Error::Domain("evaluation set is empty".into()));
        }
        let (mut loss, mut pred, mut truth) = (0.0, Vec::new(), Vec::new());
        for e in samples {
            let mut g = Graph::new();
            let (zs, _) = self.sign.encode_batch(&mut g, store, &[&e.input], false)?;
            let p = self.bank.forward(&mut g, store, zs[0])?;
            let l = bce_presence_loss(&mut g, p.e_hat, &self.vocab.targets(&e.glosses))?;
            loss += g.value(l).item();
            pred.push(predicted_set(g.value(p.e_hat).data(), threshold));
            truth.push(self.vocab.index_set(&e.glosses));
        }
        Ok((loss / samples.len() as f64, presence_prf1(&pred, &truth)?))
    }
}

/// Minimises the presence BCE; logs train loss and eval loss with F1.
pub fn pretrain(
    store: &mut ParamStore,
    model: &PretrainModel,
    train: &[Example],
    eval: &[Example],
    cfg: &TrainConfig,
    threshold: f64,
    log: &mut TrainLog,
) -> Result<TrainOutcome> {
    let mut lp = Loop::new(cfg, train.len())?;
    let bn = model.sign.spatial_trains(store).cloned();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (train_loss, lr) = lp.epoch(store, train.len(), bn.as_ref(), |g, s, idx| {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            model.batch_loss(g, s, &batch, true)
        })?;
        log.push(LogRecord { epoch, split: "train".into(), loss: train_loss, lr, metric: None })?;
        let mut summary = EpochSummary { epoch, train_loss, eval_loss: None, metric: None, lr };
        if !eval.is_empty() {
            let (l, prf) = model.evaluate(store, eval, threshold)?;
            log.push(LogRecord { epoch, split: "val".into(), loss: l, lr, metric: Some(prf.f1) })?;
            summary.eval_loss = Some(l);
            summary.metric = Some(prf.f1);
        }
        epochs.push(summary);
    }
    Ok(lp.finish(epochs, None))
}

// ---- translation ------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TranslationModel {
    pub sign: SignModel,
    pub decoder: AdaptedDecoder,
    pub tokenizer: Tokenizer,
}

impl TranslationModel {
    /// `lm` must already hold its pretrained weights; it is frozen here.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &ExperimentConfig,
        lm: FrozenLM,
        tokenizer: Tokenizer,
        rng: &mut R,
    ) -> Result<Self> {
        if lm.vocab(store) != tokenizer.len() {
            return Err(Error::Vocabulary(format!(
                "LM vocabulary {} differs from tokenizer size {}",
                lm.vocab(store),
                tokenizer.len()
            )));
        }
        let sign = SignModel::new(store, config, config.translate.frame_subsample_stride, rng)?;
        let decoder = AdaptedDecoder::new(store, lm, config.decoder.clone(), config.encoder.hidden, rng)?;
        Ok(Self { sign, decoder, tokenizer })
    }

    fn sentence_loss(&self, g: &mut Graph, store: &ParamStore, z: Var, text: &str, eps: f64) -> Result<Var> {
        let ids = self.tokenizer.encode_sentence(text);
        let sign = self.decoder.condition(g, store, z)?;
        let logits = self.decoder.forward_logits(g, store, &ids[..ids.len() - 1], sign)?;
        let targets: Vec<Option<usize>> = ids[1..].iter().map(|&t| Some(t)).collect();
        g.smoothed_cross_entropy(logits, &targets, eps)
    }

    fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &[&Example],
        eps: f64,
        train: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let inputs: Vec<&Tensor> = batch.iter().map(|e| &e.input).collect();
        let (zs, stats) = self.sign.encode_batch(g, store, &inputs, train)?;
        let losses = zs
            .into_iter()
            .zip(batch)
            .map(|(z, e)| self.sentence_loss(g, store, z, &e.text, eps))
            .collect::<Result<Vec<_>>>()?;
        Ok((mean_of(g, losses)?, stats))
    }

    /// Mean per-sentence label-smoothed cross-entropy in eval mode.
    pub fn loss(&self, store: &ParamStore, samples: &[Example], eps: f64) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Domain("evaluation set is empty".into()));
        }
        let mut total = 0.0;
        for e in samples {
            let mut g = Graph::new();
            let (l, _) = self.batch_loss(&mut g, store, &[e], eps, false)?;
            total += g.value(l).item();
        }
        Ok(total / samples.len() as f64)
    }

    pub fn translate(&self, store: &ParamStore, input: &Tensor, width: usize, max_len: usize) -> Result<String> {
        let z = self.sign.encode(store, input)?;
        let ids = self.decoder.generate(store, &z, &self.tokenizer, width, max_len)?;
        Ok(self.tokenizer.decode(&ids))
    }

    pub fn translate_all(&self, store: &ParamStore, samples: &[Example], width: usize, max_len: usize) -> Result<Vec<String>> {
        samples.iter().map(|e| self.translate(store, &e.input, width, max_len)).collect()
    }
}

/// Copies the sign encoder (and spatial adapters) from a pretraining
/// checkpoint. The prototype head is not carried over.
pub fn init_from_pretrain(store: &mut ParamStore, ckpt: &Checkpoint) -> Result<usize> {
    ckpt.require_stage(Stage::Pretrain)?;
    ckpt.restore_filtered(store, |n| n.starts_with("encoder.") || n.starts_with("spatial."))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TranslateOptions {
    /// Freeze spatial and encoder parameters; only decoder-side adapters and
    /// `FC_m` train.
    pub frozen_features: bool,
    /// Validation loss to record the first epoch reaching.
    pub target_loss: Option<f64>,
    /// Stop once the target is reached.
    pub stop_at_target: bool,
}

pub fn train_translation(
    store: &mut ParamStore,
    model: &TranslationModel,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    opts: &TranslateOptions,
    log: &mut TrainLog,
) -> Result<TrainOutcome> {
    if opts.frozen_features {
        model.sign.freeze(store);
    }
    let mut lp = Loop::new(cfg, train.len())?;
    let bn = model.sign.spatial_trains(store).cloned();
    let eps = cfg.label_smoothing;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut reached = None;
    for epoch in 1..=cfg.epochs {
        let (train_loss, lr) = lp.epoch(store, train.len(), bn.as_ref(), |g, s, idx| {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            model.batch_loss(g, s, &batch, eps, true)
        })?;
        log.push(LogRecord { epoch, split: "train".into(), loss: train_loss, lr, metric: None })?;
        let mut summary = EpochSummary { epoch, train_loss, eval_loss: None, metric: None, lr };
        if !val.is_empty() {
            let l = model.loss(store, val, eps)?;
            log.push(LogRecord { epoch, split: "val".into(), loss: l, lr, metric: None })?;
            summary.eval_loss = Some(l);
            if reached.is_none() && opts.target_loss.is_some_and(|t| l <= t) {
                reached = Some(epoch);
            }
        }
        epochs.push(summary);
        if reached.is_some() && opts.stop_at_target {
            break;
        }
    }
    Ok(lp.finish(epochs, reached))
}

// ---- language-model pretraining ----------------------------------------------

/// Next-token training of a fresh LM on plain sentences.
pub fn pretrain_lm(
    store: &mut ParamStore,
    lm: &FrozenLM,
    tokenizer: &Tokenizer,
    sentences: &[String],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<TrainOutcome> {
    let mut lp = Loop::new(cfg, sentences.len())?;
    let encoded: Vec<Vec<usize>> = sentences.iter().map(|s| tokenizer.encode_sentence(s)).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (train_loss, lr) = lp.epoch(store, encoded.len(), None, |g, s, idx| {
            let mut losses = Vec::with_capacity(idx.len());
            for &i in idx {
                let ids = &encoded[i];
                let logits = lm.forward_text(g, s, &ids[..ids.len() - 1])?;
                let targets: Vec<Option<usize>> = ids[1..].iter().map(|&t| Some(t)).collect();
                losses.push(g.smoothed_cross_entropy(logits, &targets, cfg.label_smoothing)?);
            }
            Ok((mean_of(g, losses)?, None))
        })?;
        log.push(LogRecord { epoch, split: "train".into(), loss: train_loss, lr, metric: None })?;
        epochs.push(EpochSummary { epoch, train_loss, eval_loss: None, metric: None, lr });
    }
    Ok(lp.finish(epochs, None))
}

/// Label-smoothed cross-entropy over a `positions × V` logit matrix.
pub fn label_smoothed_ce(g: &mut Graph, logits: Var, targets: &[Option<usize>], eps: f64) -> Result<Var> {
    g.smoothed_cross_entropy(logits, targets, eps)
}

// ---- artifact bundles ----------------------------------------------------------

pub const EXTRA_CONFIG: &str = "config.toml";
pub const EXTRA_VOCAB: &str = "gloss_vocab.txt";
pub const EXTRA_TOKENIZER: &str = "tokenizer.txt";

pub fn pretrain_checkpoint(
    store: &ParamStore,
    adam: Option<&Adam>,
    config: &ExperimentConfig,
    vocab: &PseudoGlossVocab,
) -> Checkpoint {
    let mut extra = BTreeMap::new();
    extra.insert(EXTRA_CONFIG.to_string(), config.to_toml());
    extra.insert(EXTRA_VOCAB.to_string(), vocab.to_text());
    Checkpoint::capture(store, adam, Stage::Pretrain, &config.hash(), extra)
}

pub fn text_checkpoint(
    store: &ParamStore,
    adam: Option<&Adam>,
    stage: Stage,
    config: &ExperimentConfig,
    tokenizer: &Tokenizer,
) -> Checkpoint {
    let mut extra = BTreeMap::new();
    extra.insert(EXTRA_CONFIG.to_string(), config.to_toml());
    extra.insert(EXTRA_TOKENIZER.to_string(), tokenizer.to_text());
    Checkpoint::capture(store, adam, stage, &config.hash(), extra)
}

/// Rebuilds a pretraining model and store from its checkpoint.
pub fn load_pretrain(ckpt: &Checkpoint) -> Result<(ExperimentConfig, ParamStore, PretrainModel)> {
    ckpt.require_stage(Stage::Pretrain)?;
    let config = ExperimentConfig::from_toml(ckpt.extra(EXTRA_CONFIG)?)?;
    let vocab = PseudoGlossVocab::parse(ckpt.extra(EXTRA_VOCAB)?)?;
    let mut store = ParamStore::new();
    let columns = ckpt
        .get("pretrain.prototypes")
        .ok_or_else(|| Error::Format("pretrain checkpoint lacks prototypes".into()))?;
    let mut table = EmbeddingTable { dim: columns.rows(), words: Vec::new(), vectors: Default::default() };
    for (j, gl) in vocab.glosses().iter().enumerate().take(columns.cols()) {
        table.words.push(gl.clone());
        table.vectors.insert(gl.clone(), (0..columns.rows()).map(|i| columns.at(i, j)).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = PretrainModel::new(&mut store, &config, vocab, &table, &mut rng)?;
    ckpt.restore(&mut store)?;
    Ok((config, store, model))
}

/// Rebuilds a translation model and store from its checkpoint.
pub fn load_translation(ckpt: &Checkpoint) -> Result<(ExperimentConfig, ParamStore, TranslationModel)> {
    ckpt.require_stage(Stage::Translate)?;
    let config = ExperimentConfig::from_toml(ckpt.extra(EXTRA_CONFIG)?)?;
    let tokenizer = Tokenizer::parse(ckpt.extra(EXTRA_TOKENIZER)?)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lm = FrozenLM::new(&mut store, config.decoder.lm.clone(), tokenizer.len(), &mut rng)?;
    let model = TranslationModel::new(&mut store, &config, lm, tokenizer, &mut rng)?;
    ckpt.restore(&mut store)?;
    for (p, e) in store.iter_mut().zip(&ckpt.manifest.params) {
        p.trainable = e.trainable;
    }
    Ok((config, store, model))
}

/// Builds and pretrains the frozen LM on the training sentences.
pub fn build_lm(
    store: &mut ParamStore,
    config: &ExperimentConfig,
    sentences: &[String],
    log: &mut TrainLog,
) -> Result<(FrozenLM, Tokenizer)> {
    let tokenizer = Tokenizer::from_sentences(sentences);
    let mut rng = ChaCha8Rng::seed_from_u64(config.lm_pretrain.seed);
    let lm = FrozenLM::new(store, config.decoder.lm.clone(), tokenizer.len(), &mut rng)?;
    pretrain_lm(store, &lm, &tokenizer, sentences, &config.lm_pretrain, log)?;
    Ok((lm, tokenizer))
}
