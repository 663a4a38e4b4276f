use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the optimizer treats a parameter beyond trainability.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Gate,
    Temperature,
    /// Non-learned state such as running statistics; saved in checkpoints
    /// but excluded from parameter counts.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    pub kind: ParamKind,
}

impl Parameter {
    /// Weight decay applies to trainable weight matrices only.
    pub fn decays(&self) -> bool {
        self.trainable && self.kind == ParamKind::Weight
    }
}

/// Flat, ordered storage for every parameter of a model. Modules refer to
/// their parameters through [`ParamId`]s; names are dot-paths.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable,
            kind,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    /// Swaps in a new value (possibly of a different shape) and resets the
    /// gradient to match.
    pub fn replace_value(&mut self, id: ParamId, value: Tensor) {
        let p = &mut self.params[id.0];
        p.grad = Tensor::zeros(value.shape());
        p.value = value;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Sets trainability for every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor, scale: f64) {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return;
        }
        for (g, v) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *g += scale * v;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind != ParamKind::Buffer)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.grad.norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    /// SHA-256 over the names and value bits of parameters selected by `filter`.
    pub fn checksum(&self, filter: impl Fn(&Parameter) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| filter(p)) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn frozen_checksum(&self) -> String {
        self.checksum(|p| !p.trainable && p.kind != ParamKind::Buffer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_ignore_gradients() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(&[2]), ParamKind::Weight, false);
        s.accumulate_grad(a, &Tensor::vector(vec![1.0, 2.0]), 1.0);
        assert_eq!(s.get(a).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(&[2]), ParamKind::Weight, false);
        let before = s.frozen_checksum();
        s.value_mut(a).data_mut()[0] = 1e-300;
        assert_ne!(before, s.frozen_checksum());
    }
}
