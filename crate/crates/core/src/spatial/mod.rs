//! Per-frame visual features: a frozen mini vision transformer whose class
//! token is read out through a trainable linear map and batch normalisation.
//! Precomputed features can be loaded directly, bypassing pixels.

pub mod feature_file;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{inject, Linear};
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, TransformerBlock};
use crate::numerics::{Graph, ParamId, ParamKind, ParamStore, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const SPATIAL_TARGETS: [&str; 6] = ["q", "k", "v", "o", "mlp_in", "mlp_out"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp: usize,
    pub adapted_top_layers: usize,
    /// Feature dimension `C` handed to the sign encoder.
    pub out_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            depth: 4,
            width: 32,
            heads: 4,
            mlp: 64,
            adapted_top_layers: 3,
            out_dim: 64,
            lora_rank: 4,
            lora_alpha: 4.0,
        }
    }
}

impl SpatialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.adapted_top_layers > self.depth {
            return Err(Error::Config(format!(
                "adapted_top_layers {} exceeds depth {}",
                self.adapted_top_layers, self.depth
            )));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.channels == 0 || self.out_dim == 0 {
            return Err(Error::Config("channels and out_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn patches_per_frame(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// `Z*`: one feature row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub z: Tensor,
}

impl FeatureSequence {
    pub fn new(z: Tensor) -> Result<Self> {
        if z.rank() != 2 || z.rows() == 0 || z.cols() == 0 {
            return Err(Error::Format(format!("feature sequence must be T*×C with T* ≥ 1, got {:?}", z.shape())));
        }
        Ok(Self { z })
    }

    pub fn frames(&self) -> usize {
        self.z.rows()
    }

    pub fn channels(&self) -> usize {
        self.z.cols()
    }
}

pub fn load_features(path: &Path) -> Result<FeatureSequence> {
    FeatureSequence::new(feature_file::load(path)?)
}

pub fn save_features(path: &Path, f: &FeatureSequence) -> Result<()> {
    feature_file::save(path, &f.z)
}

/// Batch normalisation over rows, with running statistics kept as buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for the running estimate.
    pub var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0), ParamKind::Norm, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), ParamKind::Norm, true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[dim]), ParamKind::Buffer, false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[dim], 1.0), ParamKind::Buffer, false),
        }
    }

    /// Normalises with the statistics of `x` itself (all rows are the batch).
    pub fn forward_train(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, BatchStats)> {
        let xv = g.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let mut mean = vec![0.0; c];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(xv.row(i)) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; c];
        for i in 0..n {
            for (j, v) in xv.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        var.iter_mut().for_each(|v| *v /= denom);

        let xt = g.transpose(x)?;
        let normed = g.normalize_rows(xt, BN_EPS)?;
        let y = g.transpose(normed)?;
        let y = self.affine(g, store, y)?;
        Ok((y, BatchStats { mean, var }))
    }

    /// Deterministic affine map using the running statistics.
    pub fn forward_eval(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let shift = g.input(store.value(self.running_mean).map(|m| -m));
        let inv = g.input(store.value(self.running_var).map(|v| 1.0 / (v + BN_EPS).sqrt()));
        let y = g.add_row(x, shift)?;
        let y = g.mul_row(y, inv)?;
        self.affine(g, store, y)
    }

    fn affine(&self, g: &mut Graph, store: &ParamStore, y: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(y, gain)?;
        g.add_row(y, bias)
    }

    pub fn update_running(&self, store: &mut ParamStore, stats: &BatchStats) {
        let blend = |t: &mut Tensor, batch: &[f64]| {
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        };
        blend(store.value_mut(self.running_mean), &stats.mean);
        blend(store.value_mut(self.running_var), &stats.var);
    }
}

#[derive(Clone, Debug)]
pub struct SpatialModel {
    pub config: SpatialConfig,
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_ln: LayerNorm,
    pub readout: Linear,
    pub bn: BatchNorm,
}

pub const BACKBONE_PREFIX: &str = "spatial.backbone.";

impl SpatialModel {
    /// Builds a frozen random backbone with no adapters attached.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: SpatialConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let base = "spatial.backbone";
        let patch_embed = Linear::new(store, &format!("{base}.patch_embed"), config.patch_dim(), w, true, false, rng);
        let cls_token = store.add(format!("{base}.cls_token"), Tensor::randn(&[1, w], 0.02, rng), ParamKind::Weight, false);
        let pos_embed = store.add(
            format!("{base}.pos_embed"),
            Tensor::randn(&[config.patches_per_frame() + 1, w], 0.02, rng),
            ParamKind::Weight,
            false,
        );
        let blocks = (0..config.depth)
            .map(|i| TransformerBlock::new(store, &format!("{base}.block{i}"), w, config.heads, config.mlp, false, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNorm::new(store, &format!("{base}.final_ln"), w, false);
        let readout = Linear::new(store, "spatial.readout", w, config.out_dim, true, true, rng);
        let bn = BatchNorm::new(store, "spatial.bn", config.out_dim);
        Ok(Self { config, patch_embed, cls_token, pos_embed, blocks, final_ln, readout, bn })
    }

    /// Attaches LoRA deltas to the top `adapted_top_layers` blocks; returns
    /// the number of wrapped layers.
    pub fn inject_adapters<R: Rng + ?Sized>(&mut self, store: &mut ParamStore, rng: &mut R) -> Result<usize> {
        let start = self.config.depth - self.config.adapted_top_layers;
        let (rank, alpha) = (self.config.lora_rank, self.config.lora_alpha);
        inject(&mut self.blocks[start..], &SPATIAL_TARGETS, rank, alpha, store, rng)
    }

    fn check_frames(&self, frames: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.image_size, c.image_size, c.channels];
        if frames.rank() != 4 || frames.shape()[0] == 0 || frames.shape()[1..] != want {
            return Err(Error::dim("extract_features", frames.shape(), &[0, want[0], want[1], want[2]]));
        }
        Ok(())
    }

    /// Splits one `H×W×ch` frame into `N × p·p·ch` patch rows.
    fn patchify(&self, frames: &Tensor, t: usize) -> Tensor {
        let c = &self.config;
        let (s, p, ch) = (c.image_size, c.patch_size, c.channels);
        let per_side = s / p;
        let frame = &frames.data()[t * s * s * ch..(t + 1) * s * s * ch];
        let mut out = Tensor::zeros(&[per_side * per_side, c.patch_dim()]);
        for py in 0..per_side {
            for px in 0..per_side {
                let row = out.row_mut(py * per_side + px);
                let mut k = 0;
                for y in 0..p {
                    for x in 0..p {
                        let base = ((py * p + y) * s + px * p + x) * ch;
                        row[k..k + ch].copy_from_slice(&frame[base..base + ch]);
                        k += ch;
                    }
                }
            }
        }
        out
    }

    /// Class-token outputs of the backbone, one row per frame.
    pub fn class_tokens(&self, g: &mut Graph, store: &ParamStore, frames: &Tensor) -> Result<Var> {
        self.check_frames(frames)?;
        let cls = g.param(store, self.cls_token);
        let pos = g.param(store, self.pos_embed);
        let mut rows = Vec::with_capacity(frames.shape()[0]);
        for t in 0..frames.shape()[0] {
            let patches = g.input(self.patchify(frames, t));
            let tokens = self.patch_embed.forward(g, store, patches)?;
            let mut x = g.concat_rows(&[cls, tokens])?;
            x = g.add(x, pos)?;
            for block in &self.blocks {
                x = block.forward(g, store, x, None)?;
            }
            let x = self.final_ln.forward(g, store, x)?;
            rows.push(g.slice_rows(x, 0, 1)?);
        }
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            g.concat_rows(&rows)
        }
    }

    /// Training-mode forward over a batch of videos. Normalisation statistics
    /// are shared across all frames of all videos.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        videos: &[&Tensor],
    ) -> Result<(Vec<Var>, BatchStats)> {
        let mut lens = Vec::with_capacity(videos.len());
        let mut parts = Vec::with_capacity(videos.len());
        for v in videos {
            let ct = self.class_tokens(g, store, v)?;
            lens.push(g.shape(ct)[0]);
            parts.push(self.readout.forward(g, store, ct)?);
        }
        let all = g.concat_rows(&parts)?;
        let (normed, stats) = self.bn.forward_train(g, store, all)?;
        let mut out = Vec::with_capacity(lens.len());
        let mut start = 0;
        for len in lens {
            out.push(g.slice_rows(normed, start, len)?);
            start += len;
        }
        Ok((out, stats))
    }

    pub fn forward_eval(&self, g: &mut Graph, store: &ParamStore, frames: &Tensor) -> Result<Var> {
        let ct = self.class_tokens(g, store, frames)?;
        let r = self.readout.forward(g, store, ct)?;
        self.bn.forward_eval(g, store, r)
    }

    /// Eval-mode extraction of `Z*` for one video shaped `T*×H×W×ch`.
    pub fn extract_features(&self, store: &ParamStore, frames: &Tensor) -> Result<FeatureSequence> {
        let mut g = Graph::new();
        let z = self.forward_eval(&mut g, store, frames)?;
        FeatureSequence::new(g.value(z).clone())
    }

    pub fn backbone_checksum(store: &ParamStore) -> String {
        store.checksum(|p| p.name.starts_with(BACKBONE_PREFIX) && !p.name.contains(".lora_"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> SpatialConfig {
        SpatialConfig {
            image_size: 8,
            patch_size: 4,
            channels: 2,
            depth: 3,
            width: 8,
            heads: 2,
            mlp: 16,
            adapted_top_layers: 2,
            out_dim: 6,
            ..SpatialConfig::default()
        }
    }

    fn build(seed: u64) -> (ParamStore, SpatialModel, ChaCha8Rng) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = SpatialModel::new(&mut store, tiny(), &mut rng).unwrap();
        (store, m, rng)
    }

    #[test]
    fn single_frame_shape() {
        let (store, m, mut rng) = build(1);
        let f = Tensor::uniform(&[1, 8, 8, 2], 0.0, 1.0, &mut rng);
        let z = m.extract_features(&store, &f).unwrap();
        assert_eq!(z.z.shape(), &[1, 6]);
    }

    #[test]
    fn adapters_at_init_leave_features_unchanged() {
        let (mut store, mut m, mut rng) = build(2);
        let f = Tensor::uniform(&[3, 8, 8, 2], 0.0, 1.0, &mut rng);
        let before = m.extract_features(&store, &f).unwrap();
        assert_eq!(m.inject_adapters(&mut store, &mut rng).unwrap(), 12);
        assert_eq!(m.extract_features(&store, &f).unwrap(), before);
    }

    #[test]
    fn duplicated_frames_give_identical_rows() {
        let (store, m, mut rng) = build(3);
        let one = Tensor::uniform(&[1, 8, 8, 2], 0.0, 1.0, &mut rng);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let two = Tensor::new(vec![2, 8, 8, 2], data).unwrap();
        let z = m.extract_features(&store, &two).unwrap().z;
        assert_eq!(z.row(0), z.row(1));
    }

    #[test]
    fn wrong_frame_size_is_dimension_error() {
        let (store, m, _) = build(4);
        let f = Tensor::zeros(&[2, 6, 8, 2]);
        assert!(matches!(m.extract_features(&store, &f), Err(Error::Dimension { .. })));
    }

    #[test]
    fn adapted_layers_must_fit_depth() {
        let cfg = SpatialConfig { adapted_top_layers: 4, ..tiny() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn train_mode_normalises_over_all_frames() {
        let (store, m, mut rng) = build(5);
        let a = Tensor::uniform(&[3, 8, 8, 2], 0.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[2, 8, 8, 2], 0.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let (outs, stats) = m.forward_train(&mut g, &store, &[&a, &b]).unwrap();
        assert_eq!(g.shape(outs[0]), &[3, 6]);
        assert_eq!(g.shape(outs[1]), &[2, 6]);
        let all = Tensor::new(
            vec![5, 6],
            [g.value(outs[0]).data(), g.value(outs[1]).data()].concat(),
        )
        .unwrap();
        for c in 0..6 {
            let mean: f64 = (0..5).map(|i| all.at(i, c)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-9);
        }
        assert_eq!(stats.mean.len(), 6);
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let (mut store, m, _) = build(6);
        let stats = BatchStats { mean: vec![1.0; 6], var: vec![3.0; 6] };
        m.bn.update_running(&mut store, &stats);
        assert!((store.value(m.bn.running_mean).data()[0] - 0.1).abs() < 1e-15);
        assert!((store.value(m.bn.running_var).data()[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn feature_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.s2gf");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vals: Vec<f64> = (0..7 * 64).map(|_| f64::from(rng.random::<f32>() - 0.5)).collect();
        let f = FeatureSequence::new(Tensor::matrix(7, 64, vals).unwrap()).unwrap();
        save_features(&path, &f).unwrap();
        assert_eq!(load_features(&path).unwrap(), f);
    }
}
