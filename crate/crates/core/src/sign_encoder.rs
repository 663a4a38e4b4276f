//! Spatio-temporal sign encoder: pre-norm transformer layers with windowed
//! self-attention and one strided temporal averaging stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{sinusoidal_table, window_mask, AttentionOutput, LayerNorm, MultiHeadAttention, TransformerBlock};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Odd attention window; ignored when `local_attention` is off.
    pub window: usize,
    pub local_attention: bool,
    /// 1-based index of the layer after which the sequence is downsampled.
    pub downsample_after_layer: usize,
    pub downsample: bool,
    pub kernel: usize,
    pub stride: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 512,
            heads: 8,
            ffn: 2048,
            window: 7,
            local_attention: true,
            downsample_after_layer: 2,
            downsample: true,
            kernel: 3,
            stride: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("window must be odd, got {}", self.window)));
        }
        if self.layers == 0 || self.downsample_after_layer == 0 || self.downsample_after_layer >= self.layers {
            return Err(Error::Config(format!(
                "downsample_after_layer {} must be in 1..{}",
                self.downsample_after_layer, self.layers
            )));
        }
        if self.kernel.is_multiple_of(2) || self.stride == 0 {
            return Err(Error::Config(format!(
                "downsampling kernel must be odd and stride positive (kernel {}, stride {})",
                self.kernel, self.stride
            )));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("hidden {} not divisible by {} heads", self.hidden, self.heads)));
        }
        Ok(())
    }

    /// Output length for an input of `frames` frames.
    pub fn output_len(&self, frames: usize) -> usize {
        if self.downsample {
            frames.div_ceil(self.stride)
        } else {
            frames
        }
    }
}

/// Inclusive averaging windows centred at `0, stride, 2·stride, ...`,
/// clipped to the valid range.
pub fn downsample_windows(len: usize, kernel: usize, stride: usize) -> Vec<(usize, usize)> {
    let half = kernel / 2;
    (0..len.div_ceil(stride))
        .map(|t| {
            let c = t * stride;
            (c.saturating_sub(half), (c + half).min(len - 1))
        })
        .collect()
}

/// Count-normalised strided averaging (kernel 3, stride 2) of a `T×C` tensor.
pub fn temporal_downsample(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.input(x.clone());
    let y = temporal_downsample_var(&mut g, v, 3, 2)?;
    Ok(g.value(y).clone())
}

pub fn temporal_downsample_var(g: &mut Graph, x: Var, kernel: usize, stride: usize) -> Result<Var> {
    let len = g.shape(x)[0];
    if len == 0 {
        return Err(Error::Domain("downsampling an empty sequence".into()));
    }
    g.average_windows(x, downsample_windows(len, kernel, stride))
}

/// Bidirectional self-attention restricted to `|i - j| <= (window-1)/2`.
pub fn local_self_attention(
    g: &mut Graph,
    store: &ParamStore,
    attn: &MultiHeadAttention,
    x: Var,
    window: usize,
) -> Result<AttentionOutput> {
    let mask = window_mask(g.shape(x)[0], window)?;
    attn.self_attention(g, store, x, Some(&mask))
}

pub fn add_sinusoidal_pe(g: &mut Graph, z: Var) -> Result<Var> {
    let (t, c) = (g.shape(z)[0], g.shape(z)[1]);
    g.add_const(z, &sinusoidal_table(t, c))
}

#[derive(Clone, Debug)]
pub struct SignEncoder {
    pub config: EncoderConfig,
    pub blocks: Vec<TransformerBlock>,
    pub final_ln: LayerNorm,
}

impl SignEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.layers)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("encoder.layer{i}"),
                    config.hidden,
                    config.heads,
                    config.ffn,
                    true,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNorm::new(store, "encoder.final_ln", config.hidden, true);
        Ok(Self { config, blocks, final_ln })
    }

    /// Maps `Z*` (`T*×C`) to `Z` (`T×C`).
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, z_star: Var) -> Result<Var> {
        let shape = g.shape(z_star).to_vec();
        if shape.len() != 2 || shape[1] != self.config.hidden || shape[0] == 0 {
            return Err(Error::dim("encode", &shape, &[self.config.hidden]));
        }
        let mut x = z_star;
        for (i, block) in self.blocks.iter().enumerate() {
            let len = g.shape(x)[0];
            let mask = if self.config.local_attention {
                Some(window_mask(len, self.config.window)?)
            } else {
                None
            };
            x = block.forward(g, store, x, mask.as_ref())?;
            if self.config.downsample && i + 1 == self.config.downsample_after_layer {
                x = temporal_downsample_var(g, x, self.config.kernel, self.config.stride)?;
            }
        }
        self.final_ln.forward(g, store, x)
    }

    pub fn encode_tensor(&self, store: &ParamStore, z_star: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(z_star.clone());
        let z = self.encode(&mut g, store, x)?;
        Ok(g.value(z).clone())
    }

    pub fn freeze(&self, store: &mut ParamStore) {
        store.set_trainable_prefix("encoder.", false);
    }
}
