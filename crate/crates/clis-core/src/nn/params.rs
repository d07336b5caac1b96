//! Named parameter storage, tape binding, and checkpoint serialization.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use crate::error::{ClisError, Result};

/// All learnable parameters, keyed by name. `BTreeMap` keeps iteration order
/// deterministic, which the optimizer and checkpoints rely on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|v| v.len()).sum()
    }

    /// Names matching a `prefix.` namespace.
    pub fn names_under<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.params
            .keys()
            .filter(move |k| k.starts_with(prefix))
            .map(|s| s.as_str())
    }

    /// FNV-1a hash over the serialized contents; used to record checkpoint
    /// identity in reports.
    pub fn content_hash(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for (name, value) in &self.params {
            h = fnv1a64_step(h, name.as_bytes());
            for &x in value.iter() {
                h = fnv1a64_step(h, &x.to_le_bytes());
            }
        }
        h
    }

    /// Serialize to a single file: an 8-byte magic, a little-endian u64
    /// manifest length, the JSON manifest, then raw little-endian f64 data.
    /// Round-trips bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = CheckpointManifest { params: Vec::new() };
        let mut offset = 0u64;
        for (name, value) in &self.params {
            manifest.params.push(ParamEntry {
                name: name.clone(),
                shape: value.shape().to_vec(),
                dtype: "f64".to_string(),
                offset,
            });
            offset += value.len() as u64;
        }
        let manifest_bytes = serde_json::to_vec(&manifest)?;
        let mut file = File::create(path).map_err(|e| ClisError::io(path, e))?;
        file.write_all(MAGIC).map_err(|e| ClisError::io(path, e))?;
        file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())
            .map_err(|e| ClisError::io(path, e))?;
        file.write_all(&manifest_bytes)
            .map_err(|e| ClisError::io(path, e))?;
        let mut data = Vec::with_capacity(offset as usize * 8);
        for value in self.params.values() {
            for &x in value.iter() {
                data.extend_from_slice(&x.to_le_bytes());
            }
        }
        file.write_all(&data).map_err(|e| ClisError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = File::open(path).map_err(|e| ClisError::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)
            .map_err(|e| ClisError::io(path, e))?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(ClisError::Checkpoint(format!(
                "{} is not a checkpoint file",
                path.display()
            )));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes[16..16 + mlen])?;
        let data = &bytes[16 + mlen..];
        let mut store = ParamStore::new();
        for entry in manifest.params {
            if entry.dtype != "f64" {
                return Err(ClisError::Checkpoint(format!(
                    "unsupported dtype `{}` for `{}`",
                    entry.dtype, entry.name
                )));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize * 8;
            let end = start + n * 8;
            if end > data.len() {
                return Err(ClisError::Checkpoint(format!(
                    "truncated data for `{}`",
                    entry.name
                )));
            }
            let values: Vec<f64> = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
                .map_err(|e| ClisError::Checkpoint(e.to_string()))?;
            store.insert(entry.name, arr);
        }
        Ok(store)
    }
}

const MAGIC: &[u8; 8] = b"CLISCKP1";

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

/// Binds store parameters onto a tape as leaves, once per name, and maps
/// accumulated gradients back to names after the reverse pass.
pub struct ParamBinder<'t, 'p> {
    tape: &'t Tape,
    store: &'p ParamStore,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'t, 'p> ParamBinder<'t, 'p> {
    pub fn new(tape: &'t Tape, store: &'p ParamStore) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// Leaf var for a named parameter (created on first use).
    pub fn var(&self, name: &str) -> Var {
        if let Some(&v) = self.bound.borrow().get(name) {
            return v;
        }
        let v = self.tape.leaf(self.store.get(name).clone());
        self.bound.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Parameters actually used during the forward pass.
    pub fn bound_names(&self) -> Vec<String> {
        self.bound.borrow().keys().cloned().collect()
    }

    /// Extract per-name gradients. Parameters the loss does not depend on are
    /// absent from the result.
    pub fn grads_by_name(&self, grads: &Gradients) -> BTreeMap<String, ArrayD<f64>> {
        let mut out = BTreeMap::new();
        for (name, &var) in self.bound.borrow().iter() {
            if let Some(g) = grads.get(var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a64_step(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// FNV-1a 64-bit hash of a byte string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_step(FNV_OFFSET, bytes)
}

/// Per-parameter RNG stream derived from the run seed and the parameter
/// name, so initialization does not depend on creation order and optional
/// heads never perturb the streams of other parameters.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name.as_bytes()))
}

/// Standard normal via Box-Muller on the named stream.
fn normal_stream(rng: &mut ChaCha8Rng) -> impl FnMut() -> f64 + '_ {
    move || {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// He-normal initialization: `N(0, sqrt(2 / fan_in))`.
pub fn he_normal(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    normal_init(seed, name, shape, std)
}

/// `N(0, std)` init on the per-name stream.
pub fn normal_init(seed: u64, name: &str, shape: &[usize], std: f64) -> ArrayD<f64> {
    let mut rng = param_rng(seed, name);
    let mut sample = normal_stream(&mut rng);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || sample() * std)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}
