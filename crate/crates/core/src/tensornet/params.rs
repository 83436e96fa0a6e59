use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors plus non-trainable buffers (running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
    buffers: BTreeMap<String, Vec<f64>>,
}

/// Uniform in `±sqrt(6 / fan_in)`.
pub fn kaiming_uniform<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable tensor. Re-adding a name replaces its value.
    pub fn add(&mut self, name: &str, mut t: Tensor) -> ParamId {
        t.requires_grad = true;
        t.grad = None;
        if let Some(&i) = self.index.get(name) {
            self.tensors[i] = t;
            return ParamId(i);
        }
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.index.insert(name.to_string(), self.tensors.len() - 1);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub(crate) fn add_grad(&mut self, id: ParamId, g: &[f64]) {
        let t = &mut self.tensors[id.0];
        let acc = t.grad.get_or_insert_with(|| vec![0.0; t.data.len()]);
        for (a, b) in acc.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            if name.starts_with(prefix) {
                t.requires_grad = trainable;
            }
        }
    }

    pub fn buffer(&self, name: &str) -> Option<&[f64]> {
        self.buffers.get(name).map(Vec::as_slice)
    }

    pub fn set_buffer(&mut self, name: &str, v: Vec<f64>) {
        self.buffers.insert(name.to_string(), v);
    }

    /// Copies every parameter and buffer of `other` whose name starts with
    /// `prefix` into `self` (shapes must agree).
    pub fn copy_from(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        for (name, t) in other.names.iter().zip(&other.tensors) {
            if !name.starts_with(prefix) {
                continue;
            }
            let id = self.id(name)?;
            let dst = &mut self.tensors[id.0];
            if dst.shape != t.shape {
                return Err(TensorError::Shape {
                    op: "copy_from",
                    left: dst.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            dst.data.clone_from(&t.data);
        }
        for (name, b) in &other.buffers {
            if name.starts_with(prefix) {
                self.buffers.insert(name.clone(), b.clone());
            }
        }
        Ok(())
    }

    /// Writes `<stem>.bin` (named float64 tensors) and `<stem>.json` (manifest).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut bin = Vec::new();
        let mut entries = Vec::new();
        let all = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (n.as_str(), t.shape.clone(), t.data.as_slice(), false))
            .chain(
                self.buffers
                    .iter()
                    .map(|(n, b)| (n.as_str(), vec![b.len()], b.as_slice(), true)),
            );
        for (name, shape, data, buffer) in all {
            bin.extend_from_slice(&(name.len() as u32).to_le_bytes());
            bin.extend_from_slice(name.as_bytes());
            bin.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in &shape {
                bin.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in data {
                bin.extend_from_slice(&x.to_le_bytes());
            }
            entries.push(ManifestEntry {
                name: name.to_string(),
                shape,
                buffer,
            });
        }
        let manifest = Manifest {
            format: "qverify-tensors".into(),
            version: 1,
            tensors: entries,
        };
        fs::File::create(stem.with_extension("bin"))?.write_all(&bin)?;
        fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        Ok(())
    }

    /// Loads values saved by [`ParamStore::save`] into the already-registered
    /// parameters; names and shapes must match exactly.
    pub fn load(&mut self, stem: &Path) -> Result<()> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)
            .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let mut bytes = Vec::new();
        fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut bytes)?;
        let mut cur = &bytes[..];
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(TensorError::Checkpoint("truncated tensor file".into()));
            }
            let (a, b) = cur.split_at(n);
            cur = b;
            Ok(a)
        };
        let mut seen = 0;
        for entry in &manifest.tensors {
            let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(name_len)?.to_vec())
                .map_err(|_| TensorError::Checkpoint("tensor name is not UTF-8".into()))?;
            if name != entry.name {
                return Err(TensorError::Checkpoint(format!("expected `{}`, found `{name}`", entry.name)));
            }
            let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
            }
            if shape != entry.shape {
                return Err(TensorError::Checkpoint(format!("`{name}`: shape disagrees with manifest")));
            }
            let n: usize = shape.iter().product();
            let data: Vec<f64> = take(8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if entry.buffer {
                self.buffers.insert(name, data);
            } else {
                let id = self.id(&name)?;
                let t = &mut self.tensors[id.0];
                if t.shape != shape {
                    return Err(TensorError::Shape {
                        op: "load",
                        left: t.shape.clone(),
                        right: shape,
                    });
                }
                t.data = data;
                seen += 1;
            }
        }
        if !cur.is_empty() {
            return Err(TensorError::Checkpoint("trailing bytes in tensor file".into()));
        }
        if seen != self.tensors.len() {
            return Err(TensorError::Checkpoint(format!(
                "checkpoint has {seen} parameters, model has {}",
                self.tensors.len()
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    buffer: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    tensors: Vec<ManifestEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are keyed by parameter id.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    m: BTreeMap<ParamId, Vec<f64>>,
    v: BTreeMap<ParamId, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(TensorError::BadLearningRate(config.lr));
        }
        Ok(AdamState {
            config,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(TensorError::BadLearningRate(lr));
        }
        self.config.lr = lr;
        Ok(())
    }

    /// One update of every trainable parameter that has a gradient; frozen
    /// parameters and parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            let Some(g) = t.grad.as_ref().filter(|_| t.requires_grad) else {
                continue;
            };
            let m = self.m.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                t.data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}
