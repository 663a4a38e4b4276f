//! Transformer building blocks shared by the vision backbone, the sign
//! encoder and the language model.

use std::rc::Rc;

use rand::Rng;

use crate::adapters::{AdapterTarget, Linear};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Mask, ParamId, ParamKind, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0), ParamKind::Norm, trainable),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), ParamKind::Norm, trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    pub fn freeze(&self, store: &mut ParamStore) {
        store.set_trainable(self.gain, false);
        store.set_trainable(self.bias, false);
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc_in: Linear,
    pub fc_out: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            fc_in: Linear::new(store, &format!("{name}.fc_in"), dim, hidden, true, trainable, rng),
            fc_out: Linear::new(store, &format!("{name}.fc_out"), hidden, dim, true, trainable, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc_in.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc_out.forward(g, store, h)
    }
}

/// Per-head scaled dot-product attention over pre-projected inputs.
/// `q` is `Lq × H·dh`, `k` and `v` are `Lk × H·dh`. With `gates` (a length
/// `H` vector, already clamped by the caller) each head's attention matrix
/// is scaled by its gate before multiplying the values.
pub struct AttentionOutput {
    pub out: Var,
    pub probs: Vec<Var>,
}

pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&Mask>,
    gates: Option<Var>,
) -> Result<AttentionOutput> {
    let width = g.shape(q)[1];
    if heads == 0 || !width.is_multiple_of(heads) || g.shape(k)[1] != width || g.shape(v)[1] != width {
        return Err(Error::Config(format!(
            "attention width {width} not divisible into {heads} heads (k {:?}, v {:?})",
            g.shape(k),
            g.shape(v)
        )));
    }
    if let Some(gv) = gates {
        if g.value(gv).len() != heads {
            return Err(Error::Config(format!(
                "{} gates for {heads} heads",
                g.value(gv).len()
            )));
        }
    }
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let p = g.softmax_rows(scores, mask)?;
        probs.push(p);
        let p = match gates {
            Some(gv) => {
                let gh = g.index(gv, h)?;
                g.mul_scalar(p, gh)?
            }
            None => p,
        };
        outs.push(g.matmul(p, vh)?);
    }
    let out = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok(AttentionOutput { out, probs })
}

/// Attention mask allowing `|i - j| <= (window - 1) / 2`.
pub fn window_mask(len: usize, window: usize) -> Result<Mask> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Config(format!("local attention window must be odd, got {window}")));
    }
    let half = (window - 1) / 2;
    let mut m = vec![false; len * len];
    for i in 0..len {
        for j in i.saturating_sub(half)..=(i + half).min(len - 1) {
            m[i * len + j] = true;
        }
    }
    Ok(Rc::new(m))
}

/// Lower-triangular mask: query `i` sees keys `j <= i`.
pub fn causal_mask(len: usize) -> Mask {
    let mut m = vec![false; len * len];
    for i in 0..len {
        for j in 0..=i {
            m[i * len + j] = true;
        }
    }
    Rc::new(m)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_bias(store, name, dim, heads, true, trainable, rng)
    }

    pub fn with_bias<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        bias: bool,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let mut lin = |p: &str| Linear::new(store, &format!("{name}.{p}"), dim, dim, bias, trainable, rng);
        Ok(Self {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            o: lin("o"),
            heads,
        })
    }

    pub fn self_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: Option<&Mask>,
    ) -> Result<AttentionOutput> {
        let q = self.q.forward(g, store, x)?;
        let k = self.k.forward(g, store, x)?;
        let v = self.v.forward(g, store, x)?;
        let att = scaled_dot_attention(g, q, k, v, self.heads, mask, None)?;
        let out = self.o.forward(g, store, att.out)?;
        Ok(AttentionOutput { out, probs: att.probs })
    }

    fn linears_mut(&mut self) -> Vec<(&'static str, &mut Linear)> {
        vec![("q", &mut self.q), ("k", &mut self.k), ("v", &mut self.v), ("o", &mut self.o)]
    }
}

/// Pre-norm block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_attention_bias(store, name, dim, heads, ffn, true, trainable, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_attention_bias<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
        attn_bias: bool,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, trainable),
            attn: MultiHeadAttention::with_bias(store, &format!("{name}.attn"), dim, heads, attn_bias, trainable, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, trainable),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, ffn, trainable, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let a = self.attn.self_attention(g, store, h, mask)?;
        let x = g.add(x, a.out)?;
        let h = self.ln2.forward(g, store, x)?;
        let m = self.mlp.forward(g, store, h)?;
        g.add(x, m)
    }
}

impl AdapterTarget for TransformerBlock {
    fn linears_mut(&mut self) -> Vec<(&'static str, &mut Linear)> {
        let mut v = self.attn.linears_mut();
        v.push(("mlp_in", &mut self.mlp.fc_in));
        v.push(("mlp_out", &mut self.mlp.fc_out));
        v
    }
}

/// Sinusoidal position table: `pe[t, 2k] = sin(t / 10000^(2k/C))`,
/// `pe[t, 2k+1] = cos(..)`.
pub fn sinusoidal_table(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, dim]);
    for pos in 0..len {
        for c in 0..dim {
            let k2 = (c - c % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(k2 / dim as f64);
            t.set(pos, c, if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}
