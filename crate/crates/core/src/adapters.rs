//! Low-rank adaptation of frozen linear layers and parameter accounting.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamKind, ParamStore, Tensor, Var};

/// Standard deviation of the Gaussian used for the down-projection `A`.
pub const LORA_A_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct LoraDelta {
    /// Down-projection, `rank × d_in`.
    pub a: ParamId,
    /// Up-projection, `d_out × rank`, zero at initialisation.
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraDelta {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// A linear map `y = x·Wᵀ + b`, optionally carrying a low-rank delta
/// `(alpha/r)·x·Aᵀ·Bᵀ`. `W` is stored `d_out × d_in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LoraDelta>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[d_out, d_in], std, rng),
            ParamKind::Weight,
            trainable,
        );
        let bias = bias.then(|| {
            store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), ParamKind::Bias, trainable)
        });
        Self {
            name: name.to_string(),
            weight,
            bias,
            d_in,
            d_out,
            lora: None,
        }
    }

    /// Wraps this layer with a fresh low-rank delta; the frozen weights are
    /// left untouched and the delta starts at zero.
    pub fn attach_lora<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<()> {
        if rank == 0 || rank > self.d_in.min(self.d_out) {
            return Err(Error::Config(format!(
                "LoRA rank {rank} invalid for {} ({}→{})",
                self.name, self.d_in, self.d_out
            )));
        }
        if self.lora.is_some() {
            return Err(Error::Config(format!("{} already carries a LoRA delta", self.name)));
        }
        let a = store.add(
            format!("{}.lora_A", self.name),
            Tensor::randn(&[rank, self.d_in], LORA_A_STD, rng),
            ParamKind::Weight,
            true,
        );
        let b = store.add(
            format!("{}.lora_B", self.name),
            Tensor::zeros(&[self.d_out, rank]),
            ParamKind::Weight,
            true,
        );
        self.lora = Some(LoraDelta { a, b, rank, alpha });
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward_with(g, store, x, self.lora.as_ref(), true)
    }

    /// Forward with an explicit choice of delta and bias, used where several
    /// paths share one frozen weight but carry their own adapters.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        lora: Option<&LoraDelta>,
        with_bias: bool,
    ) -> Result<Var> {
        if g.shape(x).last() != Some(&self.d_in) {
            return Err(Error::dim("linear", g.shape(x), &[self.d_out, self.d_in]));
        }
        let w = g.param(store, self.weight);
        let mut y = g.matmul_nt(x, w)?;
        if with_bias {
            if let Some(b) = self.bias {
                let bv = g.param(store, b);
                y = g.add_row(y, bv)?;
            }
        }
        if let Some(l) = lora {
            let a = g.param(store, l.a);
            let b = g.param(store, l.b);
            let down = g.matmul_nt(x, a)?;
            let up = g.matmul_nt(down, b)?;
            let up = g.scale(up, l.scaling());
            y = g.add(y, up)?;
        }
        Ok(y)
    }

    /// Parameters added by the delta: `r·(d_in + d_out)`.
    pub fn lora_param_count(&self) -> usize {
        self.lora.as_ref().map_or(0, |l| l.rank * (self.d_in + self.d_out))
    }

    pub fn freeze(&self, store: &mut ParamStore) {
        store.set_trainable(self.weight, false);
        if let Some(b) = self.bias {
            store.set_trainable(b, false);
        }
    }
}

/// Anything exposing named projection layers that adapters can wrap.
/// Roles are short projection names such as `q`, `k`, `v`, `o`, `mlp_in`,
/// `mlp_out`.
pub trait AdapterTarget {
    fn linears_mut(&mut self) -> Vec<(&'static str, &mut Linear)>;
}

impl<T: AdapterTarget> AdapterTarget for [T] {
    fn linears_mut(&mut self) -> Vec<(&'static str, &mut Linear)> {
        self.iter_mut().flat_map(|t| t.linears_mut()).collect()
    }
}

impl<T: AdapterTarget> AdapterTarget for Vec<T> {
    fn linears_mut(&mut self) -> Vec<(&'static str, &mut Linear)> {
        self.as_mut_slice().linears_mut()
    }
}

/// Attaches a LoRA delta to every linear layer of `subtree` whose role is
/// listed in `targets`. Returns the number of layers wrapped.
pub fn inject<T, R>(
    subtree: &mut T,
    targets: &[&str],
    rank: usize,
    alpha: f64,
    store: &mut ParamStore,
    rng: &mut R,
) -> Result<usize>
where
    T: AdapterTarget + ?Sized,
    R: Rng + ?Sized,
{
    let mut layers = subtree.linears_mut();
    for t in targets {
        if !layers.iter().any(|(role, _)| role == t) {
            return Err(Error::Config(format!("unknown adapter target '{t}'")));
        }
    }
    let mut wrapped = 0;
    for (role, lin) in layers.iter_mut() {
        if targets.contains(role) {
            lin.attach_lora(store, rank, alpha, rng)?;
            wrapped += 1;
        }
    }
    Ok(wrapped)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ComponentCount {
    pub total: usize,
    pub trainable: usize,
}

/// Total and trainable parameter counts per top-level component.
#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AdapterReport {
    pub components: BTreeMap<String, ComponentCount>,
}

impl AdapterReport {
    pub fn total(&self) -> ComponentCount {
        self.components.values().fold(ComponentCount::default(), |acc, c| ComponentCount {
            total: acc.total + c.total,
            trainable: acc.trainable + c.trainable,
        })
    }

    pub fn component(&self, name: &str) -> ComponentCount {
        self.components.get(name).cloned().unwrap_or_default()
    }
}

impl fmt::Display for AdapterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>14} {:>14}", "Component", "# Params", "# Trainable")?;
        for (name, c) in &self.components {
            writeln!(f, "{:<16} {:>14} {:>14}", name, c.total, c.trainable)?;
        }
        let t = self.total();
        write!(f, "{:<16} {:>14} {:>14}", "Total", t.total, t.trainable)
    }
}

/// Groups parameters by the first segment of their dot-path.
pub fn count_parameters(store: &ParamStore) -> AdapterReport {
    let mut report = AdapterReport::default();
    for (_, p) in store.iter().filter(|(_, p)| p.kind != ParamKind::Buffer) {
        let comp = p.name.split('.').next().unwrap_or("").to_string();
        let entry = report.components.entry(comp).or_default();
        entry.total += p.value.len();
        if p.trainable {
            entry.trainable += p.value.len();
        }
    }
    report
}
