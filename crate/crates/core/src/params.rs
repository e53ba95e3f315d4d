//! Named trainable parameters and the checkpoint archive format.
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! b"RRCKPT01" | u64 header_len | header JSON | f64 payloads
//! ```
//!
//! The header lists `{name, shape, offset}` for each tensor (offset counted in
//! f64 values from the start of the payload), the root RNG seed and a free
//! `meta` object. Payload values are the raw IEEE-754 bits, so a write/read
//! round trip is bit-exact.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const MAGIC: &[u8; 8] = b"RRCKPT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self.entries.iter().map(|(_, t)| tape.param(t.clone())).collect(),
        }
    }

    /// Copies values for every name present in `other`; shapes must match.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in other {
            let slot = self
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?} in checkpoint but {:?} in model",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.entries.clone()
    }
}

/// Glorot-uniform `rows x cols` matrix: `U(-a, a)` with `a = sqrt(6 / (rows + cols))`.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    uniform(rng, rows, cols, (6.0 / (rows + cols) as f64).sqrt())
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, a: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-a..=a)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    /// Handles for externally created leaves, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in store order (zeros for parameters the loss never touched).
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    seed: u64,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<EntryHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(EntryHeader {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
        }
        let header = serde_json::to_vec(&Header {
            seed: self.seed,
            meta: self.meta.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing archive magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
        let payload = &bytes[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let numel: usize = e.shape.iter().product();
            let start = e.offset * 8;
            let end = start + numel * 8;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("payload of `{}` is truncated", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            seed: header.seed,
            meta: header.meta,
            tensors,
        })
    }

    /// Writes to a sibling temp file then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[1, 1])).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1, 1])).is_err());
    }

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let weird = [f64::MIN_POSITIVE, -0.0, 1e-300, std::f64::consts::PI, -1.5e200];
        let ck = Checkpoint {
            seed: 42,
            meta: serde_json::json!({"epoch": 3}),
            tensors: vec![
                (
                    "enc/L0/rel=user-recipe/W_r".into(),
                    Tensor::matrix(1, 5, weird.to_vec()).unwrap(),
                ),
                (
                    "b".into(),
                    Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
                ),
            ],
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.seed, 42);
        for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn truncated_archive_rejected() {
        let ck = Checkpoint {
            seed: 1,
            meta: serde_json::Value::Null,
            tensors: vec![("a".into(), Tensor::zeros(&[3, 3]))],
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
    }
}
