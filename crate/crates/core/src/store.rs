//! Named parameter store with a freeze set and checkpoint serialization.
//!
//! Paths are unique dotted names (`enc.0.attn.wq`). Frozen paths are skipped
//! by the optimizer and their tensors do not request gradients, so frozen
//! subgraphs cost nothing at backward time.
//!
//! Checkpoint format (one directory):
//! * `manifest.json`: `{"format_version": 1, "entries": [{"path", "shape",
//!   "dtype": "f32", "byte_offset", "byte_len"}, ...]}` with entries sorted
//!   by path;
//! * `params.bin`: raw little-endian f32 values concatenated in manifest
//!   order.
//!
//! Save then load is bit-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

pub struct ParameterStore<F: Scalar> {
    params: BTreeMap<String, Tensor<F>>,
    frozen: BTreeSet<String>,
}

impl<F: Scalar> Default for ParameterStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore { params: BTreeMap::new(), frozen: BTreeSet::new() }
    }

    /// Register a parameter. Duplicate paths are a contract violation.
    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(Error::Contract(format!("parameter path already registered: {path}")));
        }
        tensor.set_requires_grad(true);
        self.params.insert(path, tensor);
        Ok(())
    }

    /// Replace an existing parameter (head growth). Shape may change.
    pub fn replace(&mut self, path: &str, tensor: Tensor<F>) -> Result<()> {
        if !self.params.contains_key(path) {
            return Err(Error::Contract(format!("cannot replace unknown parameter: {path}")));
        }
        tensor.set_requires_grad(!self.frozen.contains(path));
        self.params.insert(path.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<Tensor<F>> {
        self.params
            .get(path)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("unknown parameter path: {path}")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    /// All paths in sorted order.
    pub fn paths(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Freeze a parameter: excluded from optimization and from the tape.
    pub fn freeze(&mut self, path: &str) -> Result<()> {
        let t = self.get(path)?;
        t.set_requires_grad(false);
        t.zero_grad();
        self.frozen.insert(path.to_string());
        Ok(())
    }

    pub fn unfreeze(&mut self, path: &str) -> Result<()> {
        let t = self.get(path)?;
        t.set_requires_grad(true);
        self.frozen.remove(path);
        Ok(())
    }

    pub fn is_frozen(&self, path: &str) -> bool {
        self.frozen.contains(path)
    }

    pub fn frozen_paths(&self) -> Vec<String> {
        self.frozen.iter().cloned().collect()
    }

    pub fn trainable_paths(&self) -> Vec<String> {
        self.params.keys().filter(|p| !self.frozen.contains(*p)).cloned().collect()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Bit snapshot of every parameter, for freeze audits and probes.
    pub fn bit_snapshot(&self) -> BTreeMap<String, Vec<u64>> {
        self.params.iter().map(|(p, t)| (p.clone(), t.bits())).collect()
    }

    /// Raw copy of shapes and data, used to rebuild a store on another
    /// thread for parallel evaluation.
    pub fn raw_snapshot(&self) -> RawStore<F> {
        RawStore {
            entries: self
                .params
                .iter()
                .map(|(p, t)| (p.clone(), (t.shape(), t.data())))
                .collect(),
            frozen: self.frozen.clone(),
        }
    }

    pub fn from_raw(raw: &RawStore<F>) -> Result<Self> {
        let mut store = ParameterStore::new();
        for (path, (shape, data)) in &raw.entries {
            store.insert(path.clone(), Tensor::leaf(shape, data.clone())?)?;
        }
        for path in &raw.frozen {
            store.freeze(path)?;
        }
        Ok(store)
    }

    /// Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight of shape
    /// [fan_in, fan_out] registered at `path`.
    pub fn add_linear_weight(
        &mut self,
        path: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<F> = (0..fan_in * fan_out)
            .map(|_| F::of_f64(rng.random_range(-bound..bound)))
            .collect();
        self.insert(path, Tensor::leaf(&[fan_in, fan_out], data)?)
    }

    pub fn add_zeros(&mut self, path: impl Into<String>, shape: &[usize]) -> Result<()> {
        let t = Tensor::<F>::zeros(shape);
        t.set_requires_grad(true);
        self.insert(path, t)
    }

    pub fn add_full(&mut self, path: impl Into<String>, shape: &[usize], value: f64) -> Result<()> {
        let t = Tensor::full(shape, F::of_f64(value));
        t.set_requires_grad(true);
        self.insert(path, t)
    }
}

#[derive(Clone)]
pub struct RawStore<F: Scalar> {
    pub entries: BTreeMap<String, (Vec<usize>, Vec<F>)>,
    pub frozen: BTreeSet<String>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    entries: Vec<ManifestEntry>,
}

impl ParameterStore<f32> {
    /// Write `manifest.json` and `params.bin` into `dir` (created if absent).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.params.len());
        let mut blob: Vec<u8> = Vec::with_capacity(self.num_values() * 4);
        for (path, tensor) in &self.params {
            let offset = blob.len() as u64;
            tensor.with_data(|d| {
                for v in d {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            });
            entries.push(ManifestEntry {
                path: path.clone(),
                shape: tensor.shape(),
                dtype: "f32".to_string(),
                byte_offset: offset,
                byte_len: blob.len() as u64 - offset,
            });
        }
        let manifest = Manifest { format_version: CHECKPOINT_FORMAT_VERSION, entries };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest serialization failed: {e}")))?;
        fs::write(dir.join(MANIFEST_FILE), json)?;
        fs::write(dir.join(PARAMS_FILE), blob)?;
        Ok(())
    }

    /// Load a checkpoint directory. Validates the format version, dtypes,
    /// and that every byte range lies inside `params.bin` with the length
    /// implied by its shape.
    pub fn load(dir: &Path) -> Result<ParameterStore<f32>> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Checkpoint(format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("malformed manifest: {e}")))?;
        if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {}",
                manifest.format_version
            )));
        }
        let blob = fs::read(dir.join(PARAMS_FILE))
            .map_err(|e| Error::Checkpoint(format!("cannot read params.bin: {e}")))?;
        let mut store = ParameterStore::new();
        for entry in &manifest.entries {
            if entry.dtype != "f32" {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has unsupported dtype {}",
                    entry.path, entry.dtype
                )));
            }
            let numel: usize = entry.shape.iter().product();
            if entry.byte_len as usize != numel * 4 {
                return Err(Error::Checkpoint(format!(
                    "parameter {} shape {:?} implies {} bytes, manifest says {}",
                    entry.path,
                    entry.shape,
                    numel * 4,
                    entry.byte_len
                )));
            }
            let start = entry.byte_offset as usize;
            let end = start + entry.byte_len as usize;
            if end > blob.len() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} byte range {}..{} exceeds params.bin size {}",
                    entry.path,
                    start,
                    end,
                    blob.len()
                )));
            }
            let data: Vec<f32> = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.insert(entry.path.clone(), Tensor::leaf(&entry.shape, data)?)?;
        }
        Ok(store)
    }
}
