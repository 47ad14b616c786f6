//! Named parameter tensors, their gradients, and checkpoint files.
//!
//! A checkpoint is two files: a flat little-endian f64 blob and a JSON
//! manifest listing each tensor's name, shape and element offset.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::Tensor;
use super::LearnError;

pub type ParamId = usize;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    frozen: Vec<bool>,
    index: HashMap<String, ParamId>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub dtype: String,
    pub tensors: Vec<ManifestEntry>,
}

/// Uniform Glorot initialization.
pub fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    uniform(rng, rows, cols, bound)
}

pub fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.grads.push(Tensor::zeros(value.rows, value.cols));
        self.values.push(value);
        self.frozen.push(false);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id]
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id] = frozen;
    }

    /// Freezes or unfreezes every tensor whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for (i, n) in self.names.iter().enumerate() {
            if n.starts_with(prefix) {
                self.frozen[i] = frozen;
            }
        }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id]
    }

    pub(super) fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        let dst = &mut self.grads[id];
        debug_assert_eq!(dst.shape(), g.shape(), "gradient shape for {}", self.names[id]);
        for (a, b) in dst.data.iter_mut().zip(&g.data) {
            *a += b;
        }
    }

    pub(super) fn accumulate_rows(&mut self, id: ParamId, rows: &[usize], g: &Tensor) {
        let dst = &mut self.grads[id];
        let cols = dst.cols;
        for (r, &i) in rows.iter().enumerate() {
            for (a, b) in dst.data[i * cols..(i + 1) * cols].iter_mut().zip(g.row(r)) {
                *a += b;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0;
        let tensors = self
            .names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: [v.rows, v.cols],
                    offset,
                };
                offset += v.len();
                e
            })
            .collect();
        Manifest {
            dtype: "f64le".into(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 8);
        for v in &self.values {
            for x in &v.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_parts(manifest: &Manifest, bytes: &[u8]) -> Result<Self, LearnError> {
        if manifest.dtype != "f64le" {
            return Err(LearnError::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
        }
        let mut store = ParamStore::new();
        for e in &manifest.tensors {
            let n = e.shape[0] * e.shape[1];
            let start = e.offset * 8;
            let end = start + n * 8;
            let chunk = bytes.get(start..end).ok_or_else(|| {
                LearnError::Checkpoint(format!("tensor {} runs past the end of the data file", e.name))
            })?;
            let data = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            if store.id(&e.name).is_some() {
                return Err(LearnError::Checkpoint(format!("duplicate tensor {}", e.name)));
            }
            store.add(e.name.clone(), Tensor::from_vec(e.shape[0], e.shape[1], data));
        }
        Ok(store)
    }

    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<(), LearnError> {
        fs::write(stem.with_extension("bin"), self.to_bytes())?;
        let manifest = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        fs::write(stem.with_extension("json"), manifest)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self, LearnError> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)
            .map_err(|e| LearnError::Checkpoint(e.to_string()))?;
        let bytes = fs::read(stem.with_extension("bin"))?;
        Self::from_parts(&manifest, &bytes)
    }

    /// Copies values for every tensor name present in `other` with a
    /// matching shape. Returns how many were copied.
    pub fn copy_from(&mut self, other: &ParamStore) -> usize {
        let mut n = 0;
        for (name, v) in other.names.iter().zip(&other.values) {
            if let Some(id) = self.id(name) {
                if self.values[id].shape() == v.shape() {
                    self.values[id] = v.clone();
                    n += 1;
                }
            }
        }
        n
    }
}
