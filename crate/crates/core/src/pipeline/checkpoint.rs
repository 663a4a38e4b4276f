//! Binary checkpoints: a JSON manifest followed by raw f64 tensors.
//!
//! Layout (little-endian): magic `S2GC`, `u16` version, `u16` reserved (0),
//! `u64` manifest length, the UTF-8 JSON manifest, then for every manifest
//! entry its values and, when `moments` is set, the Adam first and second
//! moments, each as `f64` in row-major order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::Adam;
use crate::error::{Error, Result};
use crate::numerics::{ParamKind, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"S2GC";
pub const VERSION: u16 = 1;
const MAX_ELEMENTS: usize = 1 << 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Text-only language-model pretraining.
    Lm,
    Pretrain,
    Translate,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Lm => "lm",
            Stage::Pretrain => "pretrain",
            Stage::Translate => "translate",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub trainable: bool,
    pub moments: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub stage: Stage,
    pub config_hash: String,
    pub dtype: String,
    pub optimizer_step: u64,
    pub params: Vec<ParamEntry>,
    /// Free-form text artifacts needed to rebuild the model (config,
    /// tokenizer, vocabulary).
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub values: Vec<Tensor>,
    pub moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Checkpoint {
    /// Snapshot of every parameter in `store`, plus optimizer moments when
    /// `adam` is given.
    pub fn capture(
        store: &ParamStore,
        adam: Option<&Adam>,
        stage: Stage,
        config_hash: &str,
        extra: BTreeMap<String, String>,
    ) -> Self {
        let mut params = Vec::with_capacity(store.len());
        let mut values = Vec::with_capacity(store.len());
        let mut moments = Vec::with_capacity(store.len());
        for (id, p) in store.iter() {
            let mv = adam.and_then(|a| {
                let i = id.index();
                match (a.m.get(i).cloned().flatten(), a.v.get(i).cloned().flatten()) {
                    (Some(m), Some(v)) => Some((m, v)),
                    _ => None,
                }
            });
            params.push(ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                kind: p.kind,
                trainable: p.trainable,
                moments: mv.is_some(),
            });
            values.push(p.value.clone());
            moments.push(mv);
        }
        let manifest = Manifest {
            stage,
            config_hash: config_hash.to_string(),
            dtype: "f64".into(),
            optimizer_step: adam.map_or(0, |a| a.step),
            params,
            extra,
        };
        Self { manifest, values, moments }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.manifest.params.iter().position(|p| p.name == name).map(|i| &self.values[i])
    }

    pub fn extra(&self, key: &str) -> Result<&str> {
        self.manifest
            .extra
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("{} checkpoint lacks the '{key}' entry", self.manifest.stage)))
    }

    pub fn require_stage(&self, stage: Stage) -> Result<()> {
        if self.manifest.stage != stage {
            return Err(Error::Config(format!("expected a {stage} checkpoint, found {}", self.manifest.stage)));
        }
        Ok(())
    }

    /// Copies values into every store parameter accepted by `filter`. Each
    /// must be present with the same shape; trainability is left as is.
    pub fn restore_filtered(&self, store: &mut ParamStore, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let index: BTreeMap<&str, usize> =
            self.manifest.params.iter().enumerate().map(|(i, p)| (p.name.as_str(), i)).collect();
        let mut updates = Vec::new();
        for (id, p) in store.iter() {
            if !filter(&p.name) {
                continue;
            }
            let i = *index
                .get(p.name.as_str())
                .ok_or_else(|| Error::Format(format!("checkpoint has no parameter '{}'", p.name)))?;
            if self.values[i].shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter '{}' has shape {:?} in the checkpoint but {:?} in the model",
                    p.name,
                    self.values[i].shape(),
                    p.value.shape()
                )));
            }
            updates.push((id, i));
        }
        for &(id, i) in &updates {
            *store.value_mut(id) = self.values[i].clone();
        }
        Ok(updates.len())
    }

    /// Restores every parameter of `store`; the checkpoint must not hold
    /// parameters the store lacks.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        let n = self.restore_filtered(store, |_| true)?;
        if n != self.values.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, model has {n}",
                self.values.len()
            )));
        }
        Ok(())
    }

    /// A store holding exactly the checkpointed parameters, in order.
    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (e, v) in self.manifest.params.iter().zip(&self.values) {
            store.add(e.name.clone(), v.clone(), e.kind, e.trainable);
        }
        store
    }

    /// Optimizer state aligned with the ids of `store`.
    pub fn optimizer(&self, store: &ParamStore) -> Adam {
        let mut adam = Adam { step: self.manifest.optimizer_step, m: vec![None; store.len()], v: vec![None; store.len()] };
        for (id, p) in store.iter() {
            let found = self.manifest.params.iter().position(|e| e.name == p.name);
            if let Some((m, v)) = found.and_then(|i| self.moments[i].clone()) {
                if m.shape() == p.value.shape() {
                    adam.m[id.index()] = Some(m);
                    adam.v[id.index()] = Some(v);
                }
            }
        }
        adam
    }

    pub fn encode(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serialises");
        let mut out = Vec::with_capacity(16 + manifest.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        let mut put = |t: &Tensor| t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        for (v, m) in self.values.iter().zip(&self.moments) {
            put(v);
            if let Some((m1, m2)) = m {
                put(m1);
                put(m2);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |msg: &str| Error::Format(format!("checkpoint: {msg}"));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(fail("bad magic or truncated header"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let mend = usize::try_from(mlen)
            .ok()
            .and_then(|l| l.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail("manifest length exceeds file"))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[16..mend]).map_err(|e| fail(&format!("manifest: {e}")))?;
        if manifest.dtype != "f64" {
            return Err(fail(&format!("unsupported dtype '{}'", manifest.dtype)));
        }
        let mut pos = mend;
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= MAX_ELEMENTS)
                .ok_or_else(|| fail("tensor too large"))?;
            let end = n.checked_mul(8).and_then(|b| b.checked_add(pos)).filter(|&e| e <= bytes.len());
            let end = end.ok_or_else(|| fail("truncated tensor data"))?;
            let data: Vec<f64> = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            pos = end;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(fail("non-finite value"));
            }
            Tensor::new(shape.to_vec(), data)
        };
        let mut values = Vec::with_capacity(manifest.params.len());
        let mut moments = Vec::with_capacity(manifest.params.len());
        let mut names = std::collections::HashSet::new();
        for p in &manifest.params {
            if !names.insert(p.name.as_str()) {
                return Err(fail(&format!("duplicate parameter '{}'", p.name)));
            }
            values.push(take(&p.shape)?);
            moments.push(if p.moments { Some((take(&p.shape)?, take(&p.shape)?)) } else { None });
        }
        if pos != bytes.len() {
            return Err(fail("trailing bytes"));
        }
        Ok(Self { manifest, values, moments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
