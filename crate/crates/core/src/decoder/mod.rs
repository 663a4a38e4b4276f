//! Frozen decoder-only language model, adapted for translation with LoRA on
//! its attention projections and per-head zero-gated cross-attention over
//! sign features.

pub mod beam;
pub mod tokenizer;

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapters::{Linear, LoraDelta};
use crate::error::{Error, Result};
use crate::layers::{causal_mask, scaled_dot_attention, sinusoidal_table, AttentionOutput, LayerNorm, TransformerBlock};
use crate::numerics::{Graph, ParamId, ParamKind, ParamStore, Tensor, Var};
use crate::sign_encoder::add_sinusoidal_pe;

pub use beam::{beam_search, exhaustive, greedy, Hypothesis, StepScorer};
pub use tokenizer::Tokenizer;

pub const LM_PREFIX: &str = "decoder.lm.";
pub const EXPANSION_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { d_model: 128, heads: 4, layers: 4, ffn: 512 }
    }
}

/// Decoder-only transformer with tied input/output embeddings. All of its
/// parameters are meant to stay frozen once pretrained.
#[derive(Clone, Debug)]
pub struct FrozenLM {
    pub config: LmConfig,
    pub embed: ParamId,
    pub layers: Vec<TransformerBlock>,
    pub final_ln: LayerNorm,
}

impl FrozenLM {
    /// Fresh, trainable LM for text pretraining. Attention projections carry
    /// no bias, so keys and values are linear in their inputs.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: LmConfig, vocab: usize, rng: &mut R) -> Result<Self> {
        if config.heads == 0 || !config.d_model.is_multiple_of(config.heads) {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", config.d_model, config.heads)));
        }
        let d = config.d_model;
        let embed = store.add("decoder.lm.embed", Tensor::randn(&[vocab, d], 1.0 / (d as f64).sqrt(), rng), ParamKind::Weight, true);
        let layers = (0..config.layers)
            .map(|i| {
                TransformerBlock::with_attention_bias(
                    store,
                    &format!("decoder.lm.layer{i}"),
                    d,
                    config.heads,
                    config.ffn,
                    false,
                    true,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNorm::new(store, "decoder.lm.final_ln", d, true);
        Ok(Self { config, embed, layers, final_ln })
    }

    pub fn vocab(&self, store: &ParamStore) -> usize {
        store.value(self.embed).rows()
    }

    pub fn freeze(&self, store: &mut ParamStore) {
        store.set_trainable_prefix(LM_PREFIX, false);
    }

    /// Hash of the frozen weights, excluding adapter deltas attached later.
    pub fn checksum(store: &ParamStore) -> String {
        store.checksum(|p| p.name.starts_with(LM_PREFIX) && !p.name.contains(".lora_"))
    }

    /// Token embeddings plus sinusoidal positions.
    pub fn embed_tokens(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Domain("empty token sequence".into()));
        }
        let table = g.param(store, self.embed);
        let x = g.gather_rows(table, ids)?;
        g.add_const(x, &sinusoidal_table(ids.len(), self.config.d_model))
    }

    /// Tied output projection of the final hidden states.
    pub fn head(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let h = self.final_ln.forward(g, store, h)?;
        let table = g.param(store, self.embed);
        g.matmul_nt(h, table)
    }

    /// Causal next-token logits of the unadapted LM.
    pub fn forward_text(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let mut x = self.embed_tokens(g, store, ids)?;
        let mask = causal_mask(ids.len());
        for layer in &self.layers {
            x = layer.forward(g, store, x, Some(&mask))?;
        }
        self.head(g, store, x)
    }

    /// Adds rows for `new_tokens` set to the mean embedding plus Gaussian
    /// noise of standard deviation `std`; the tokenizer is extended too.
    pub fn expand_vocabulary<R: Rng + ?Sized, S: AsRef<str>>(
        &self,
        store: &mut ParamStore,
        tokenizer: &mut Tokenizer,
        new_tokens: &[S],
        std: f64,
        rng: &mut R,
    ) -> Result<usize> {
        let old = store.value(self.embed).clone();
        if tokenizer.len() != old.rows() {
            return Err(Error::Vocabulary(format!(
                "tokenizer has {} entries, embedding table {}",
                tokenizer.len(),
                old.rows()
            )));
        }
        let added = tokenizer.add_tokens(new_tokens)?;
        let (v, d) = (old.rows(), old.cols());
        let mut mean = vec![0.0; d];
        for i in 0..v {
            for (m, x) in mean.iter_mut().zip(old.row(i)) {
                *m += x / v as f64;
            }
        }
        let noise = Normal::new(0.0, std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let mut data = old.into_data();
        for _ in 0..added {
            for &m in &mean {
                data.push(if std > 0.0 { m + noise.sample(rng) } else { m });
            }
        }
        store.replace_value(self.embed, Tensor::matrix(v + added, d, data)?);
        Ok(added)
    }
}

/// Trainable parts attached to one LM layer: LoRA deltas on the masked
/// attention Q/V (held by the layer's own linears), a separate pair for the
/// cross path, and one gate per head.
#[derive(Clone, Debug)]
pub struct CrossAdapter {
    pub q_lora: LoraDelta,
    pub v_lora: LoraDelta,
    pub gates: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub lm: LmConfig,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Add sinusoidal positions to `Z` before `FC_m`.
    pub sign_pe: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { lm: LmConfig::default(), lora_rank: 4, lora_alpha: 4.0, sign_pe: true }
    }
}

/// `(clamp(g) · softmax(QKᵀ/√d_k)) V`, per head.
pub fn gated_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, gates: Var) -> Result<AttentionOutput> {
    let clamped = g.clamp(gates, 0.0, 1.0);
    scaled_dot_attention(g, q, k, v, heads, None, Some(clamped))
}

fn new_lora<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    lin: &Linear,
    rank: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<LoraDelta> {
    let mut tmp = Linear { name: name.to_string(), lora: None, ..lin.clone() };
    tmp.attach_lora(store, rank, alpha, rng)?;
    Ok(tmp.lora.expect("just attached"))
}

/// The frozen LM plus every translation-time trainable on the decoder side.
#[derive(Clone, Debug)]
pub struct AdaptedDecoder {
    pub config: DecoderConfig,
    pub lm: FrozenLM,
    pub fc_m: Linear,
    pub cross: Vec<CrossAdapter>,
}

impl AdaptedDecoder {
    /// Freezes `lm` and attaches fresh adapters, `FC_m` mapping `sign_dim`
    /// features into the model width, and closed gates.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        mut lm: FrozenLM,
        config: DecoderConfig,
        sign_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        lm.freeze(store);
        let (r, a) = (config.lora_rank, config.lora_alpha);
        let mut cross = Vec::with_capacity(lm.layers.len());
        for (i, layer) in lm.layers.iter_mut().enumerate() {
            layer.attn.q.attach_lora(store, r, a, rng)?;
            layer.attn.v.attach_lora(store, r, a, rng)?;
            let base = format!("decoder.adapt.layer{i}");
            let q_lora = new_lora(store, &format!("{base}.cross_q"), &layer.attn.q, r, a, rng)?;
            let v_lora = new_lora(store, &format!("{base}.cross_v"), &layer.attn.v, r, a, rng)?;
            let gates = store.add(format!("{base}.gates"), Tensor::zeros(&[layer.attn.heads]), ParamKind::Gate, true);
            cross.push(CrossAdapter { q_lora, v_lora, gates });
        }
        let fc_m = Linear::new(store, "decoder.fc_m", sign_dim, lm.config.d_model, true, true, rng);
        Ok(Self { config, lm, fc_m, cross })
    }

    /// `FC_m(PE(Z))`, or `FC_m(Z)` with positions disabled.
    pub fn condition(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let z = if self.config.sign_pe { add_sinusoidal_pe(g, z)? } else { z };
        self.fc_m.forward(g, store, z)
    }

    /// `x + MaskedAttn(LN x) + GatedCross(LN x, LN s)`, then the frozen MLP
    /// residual. `sign` must already be in the model width.
    pub fn adapted_layer_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        i: usize,
        x: Var,
        sign: Var,
    ) -> Result<Var> {
        if g.shape(sign)[0] == 0 {
            return Err(Error::Config("translation requires non-empty sign states".into()));
        }
        let layer = &self.lm.layers[i];
        let ad = &self.cross[i];
        let len = g.shape(x)[0];
        let h = layer.ln1.forward(g, store, x)?;
        let self_att = layer.attn.self_attention(g, store, h, Some(&causal_mask(len)))?;

        let s = layer.ln1.forward(g, store, sign)?;
        let q = layer.attn.q.forward_with(g, store, h, Some(&ad.q_lora), true)?;
        let k = layer.attn.k.forward_with(g, store, s, None, true)?;
        let v = layer.attn.v.forward_with(g, store, s, Some(&ad.v_lora), true)?;
        let gates = g.param(store, ad.gates);
        let cross = gated_attention(g, q, k, v, layer.attn.heads, gates)?;
        let cross = layer.attn.o.forward_with(g, store, cross.out, None, false)?;

        let x = g.add(x, self_att.out)?;
        let x = g.add(x, cross)?;
        let h = layer.ln2.forward(g, store, x)?;
        let m = layer.mlp.forward(g, store, h)?;
        g.add(x, m)
    }

    /// Causal logits for `ids` conditioned on `sign` (= `FC_m(PE(Z))`).
    pub fn forward_logits(&self, g: &mut Graph, store: &ParamStore, ids: &[usize], sign: Var) -> Result<Var> {
        let mut x = self.lm.embed_tokens(g, store, ids)?;
        for i in 0..self.lm.layers.len() {
            x = self.adapted_layer_forward(g, store, i, x, sign)?;
        }
        self.lm.head(g, store, x)
    }

    /// Beam-search translation of one sign representation `Z` (`T×C`).
    pub fn generate(
        &self,
        store: &ParamStore,
        z: &Tensor,
        tokenizer: &Tokenizer,
        width: usize,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let zv = g.input(z.clone());
        let sign = self.condition(&mut g, store, zv)?;
        let sign = g.value(sign).clone();
        let scorer = DecoderScorer::new(self, store, sign);
        let h = beam_search(&scorer, tokenizer.bos, tokenizer.eos, width, max_len)?;
        Ok(h.tokens)
    }
}

/// Next-token log-probabilities from a conditioned decoder.
pub struct DecoderScorer<'a> {
    pub decoder: &'a AdaptedDecoder,
    pub store: &'a ParamStore,
    pub sign: Tensor,
    cache: std::cell::RefCell<HashMap<Vec<usize>, Vec<f64>>>,
}

impl<'a> DecoderScorer<'a> {
    /// `sign` is the conditioned sequence `FC_m(PE(Z))`.
    pub fn new(decoder: &'a AdaptedDecoder, store: &'a ParamStore, sign: Tensor) -> Self {
        Self { decoder, store, sign, cache: Default::default() }
    }
}

impl StepScorer for DecoderScorer<'_> {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        if let Some(v) = self.cache.borrow().get(prefix) {
            return Ok(v.clone());
        }
        let mut g = Graph::new();
        let sign = g.input(self.sign.clone());
        let logits = self.decoder.forward_logits(&mut g, self.store, prefix, sign)?;
        let row = g.value(logits).row(prefix.len() - 1).to_vec();
        let lse = crate::numerics::logsumexp(&row);
        let out: Vec<f64> = row.iter().map(|l| l - lse).collect();
        self.cache.borrow_mut().insert(prefix.to_vec(), out.clone());
        Ok(out)
    }
}

pub const DEFAULT_PUNCTUATION: [(char, char); 4] = [('?', '？'), ('!', '！'), (':', '：'), (',', '，')];

/// Character substitution applied to generated text.
pub fn postprocess_punctuation(text: &str, mapping: &[(char, char)]) -> String {
    text.chars()
        .map(|c| mapping.iter().find(|(from, _)| *from == c).map_or(c, |(_, to)| *to))
        .collect()
}
