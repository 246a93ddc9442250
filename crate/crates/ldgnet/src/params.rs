//! Named parameter store and the LDGM1 model file.
//!
//! LDGM1: ASCII magic `LDGM1\n`, one JSON manifest line (an ordered list of
//! `{"name":..,"shape":[..],"byte_offset":..}`), a newline, then the
//! concatenated little-endian f32 payloads. Text-encoder entries live
//! under the `txt.` prefix and may be absent entirely; inference does not
//! read them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndgrad::{DiffTensor, Graph};

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected LDGM1")]
    BadMagic,
    #[error("bad manifest: {0}")]
    BadManifest(String),
    #[error("payload size mismatch: expected {expected} bytes, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("duplicate parameter `{0}`")]
    Duplicate(String),
    #[error("missing parameter `{0}`")]
    Missing(String),
    #[error("graph error: {0}")]
    Grad(#[from] crate::ndgrad::GradError),
}

pub type Result<T> = std::result::Result<T, ParamError>;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// False for running statistics and metadata pseudo-tensors.
    pub trainable: bool,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered, name-indexed parameter set. Insertion order is the file order
/// and the optimizer's iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>, trainable: bool) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(ParamError::Duplicate(name.into()));
        }
        assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}: shape/data mismatch");
        let idx = self.entries.len();
        self.entries.push(Param { name: name.into(), shape, data, trainable });
        self.index.insert(name.into(), idx);
        Ok(idx)
    }

    pub fn idx(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| ParamError::Missing(name.into()))
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        Ok(&self.entries[self.idx(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        let i = self.idx(name)?;
        Ok(&mut self.entries[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.iter().any(|p| p.name.starts_with(prefix))
    }

    pub fn entries(&self) -> &[Param] {
        &self.entries
    }

    pub fn entry(&self, idx: usize) -> &Param {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.entries[idx]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Trainable scalar count under a name prefix ("" for the whole store).
    pub fn trainable_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(|p| p.numel())
            .sum()
    }

    /// Drop every entry whose name starts with `prefix`.
    pub fn strip_prefix(&mut self, prefix: &str) {
        self.entries.retain(|p| !p.name.starts_with(prefix));
        self.index = self.entries.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct Entry<'a> {
            name: &'a str,
            shape: &'a [usize],
            byte_offset: usize,
        }
        let mut offset = 0;
        let manifest: Vec<Entry> = self
            .entries
            .iter()
            .map(|p| {
                let e = Entry { name: &p.name, shape: &p.shape, byte_offset: offset };
                offset += p.numel() * 4;
                e
            })
            .collect();
        let mut out = Vec::with_capacity(offset + 256);
        out.extend_from_slice(b"LDGM1\n");
        out.extend_from_slice(serde_json::to_string(&manifest).expect("plain structs").as_bytes());
        out.push(b'\n');
        for p in &self.entries {
            for v in &p.data {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            name: String,
            shape: Vec<usize>,
            byte_offset: usize,
        }
        if bytes.len() < 6 || &bytes[..6] != b"LDGM1\n" {
            return Err(ParamError::BadMagic);
        }
        let rest = &bytes[6..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ParamError::BadManifest("missing manifest terminator".into()))?;
        let manifest: Vec<Entry> =
            serde_json::from_slice(&rest[..nl]).map_err(|e| ParamError::BadManifest(e.to_string()))?;
        let payload = &rest[nl + 1..];
        let expected: usize = manifest.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum();
        if payload.len() != expected {
            return Err(ParamError::SizeMismatch { expected, got: payload.len() });
        }
        let mut store = ParamStore::new();
        for e in manifest {
            let count: usize = e.shape.iter().product();
            let end = e.byte_offset + count * 4;
            if end > payload.len() {
                return Err(ParamError::BadManifest(format!("entry {} overruns payload", e.name)));
            }
            let data: Vec<f64> = payload[e.byte_offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            // loaded models are inference artifacts; training always
            // starts from a fresh initialization
            store.insert(&e.name, e.shape, data, false)?;
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Per-graph cache of parameter leaves so each parameter registers once
/// per forward pass no matter how many layers read it.
pub struct LeafCache {
    map: BTreeMap<usize, DiffTensor>,
}

impl LeafCache {
    pub fn new() -> Self {
        LeafCache { map: BTreeMap::new() }
    }

    pub fn leaf(&mut self, graph: &mut Graph, store: &ParamStore, name: &str) -> Result<DiffTensor> {
        let idx = store.idx(name)?;
        if let Some(t) = self.map.get(&idx) {
            return Ok(t.clone());
        }
        let p = store.entry(idx);
        let t = graph.leaf(p.data.clone(), &p.shape, p.trainable)?;
        self.map.insert(idx, t.clone());
        Ok(t)
    }

    /// (store index, leaf) pairs for gradient collection.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &DiffTensor)> {
        self.map.iter().map(|(&i, t)| (i, t))
    }

    /// Pre-seed the cache so a named parameter resolves to `t` instead of
    /// the store's values. Lets a check vary one tensor through a full
    /// forward pass.
    pub fn override_param(&mut self, store: &ParamStore, name: &str, t: &DiffTensor) -> Result<()> {
        let idx = store.idx(name)?;
        self.map.insert(idx, t.clone());
        Ok(())
    }
}

impl Default for LeafCache {
    fn default() -> Self {
        Self::new()
    }
}

/// Kaiming-uniform fill: U(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform<R: Rng>(rng: &mut R, fan_in: usize, count: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    (0..count).map(|_| rng.random_range(-bound..bound)).collect()
}

pub fn small_uniform<R: Rng>(rng: &mut R, bound: f64, count: usize) -> Vec<f64> {
    (0..count).map(|_| rng.random_range(-bound..bound)).collect()
}
