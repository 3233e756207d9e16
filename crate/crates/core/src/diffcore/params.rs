//! Named parameter arrays and the binary checkpoint format.
//!
//! Checkpoint layout (little endian):
//! `b"GGCK"`, `u32` version, `u32` entry count, then per entry
//! `u32` name length, UTF-8 name, `u32` rank, `u64` dims, `f64` data.

use std::collections::HashMap;
use std::io::{self, Read, Write};

use rand::Rng;
use thiserror::Error;

use super::tape::{Gradients, Tape, Var};

const MAGIC: &[u8; 4] = b"GGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("parameter {name}: checkpoint shape {found:?} != model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    Missing(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

/// Parameters in insertion order, addressable by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> ParamId {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "parameter {name}: data/shape mismatch");
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform init in `±1/sqrt(fan_in)`.
    pub fn insert_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, shape, value)
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], c: f64) -> ParamId {
        self.insert(name, shape, vec![c; shape.iter().product()])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Set every parameter's entries to zero.
    pub fn zero_all(&mut self) {
        for p in &mut self.params {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Copy of the parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParameterStore {
        let mut out = ParameterStore::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            out.insert(&p.name, &p.shape, p.value.clone());
        }
        out
    }

    /// Overwrite every parameter named in `other`; all of them must exist here
    /// with the same shape. Returns the number of parameters copied.
    pub fn load_from(&mut self, other: &ParameterStore) -> Result<usize, CheckpointError> {
        for p in &other.params {
            let id = self.id(&p.name).ok_or_else(|| CheckpointError::Missing(p.name.clone()))?;
            let dst = self.get_mut(id);
            if dst.shape != p.shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: dst.shape.clone(),
                    found: p.shape.clone(),
                });
            }
            dst.value.copy_from_slice(&p.value);
        }
        Ok(other.len())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
            for &d in &p.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &p.value {
                w.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_scalars() * 8);
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<ParameterStore, CheckpointError> {
        fn u32_of<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn u64_of<R: Read>(r: &mut R) -> Result<u64, CheckpointError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32_of(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = u32_of(r)?;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let len = u32_of(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            let rank = u32_of(r)? as usize;
            let shape = (0..rank)
                .map(|_| u64_of(r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let value = (0..n)
                .map(|_| u64_of(r).map(f64::from_bits))
                .collect::<Result<Vec<_>, _>>()?;
            if store.id(&name).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate parameter {name}")));
            }
            store.insert(&name, &shape, value);
        }
        Ok(store)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<ParameterStore, CheckpointError> {
        Self::read_from(&mut bytes)
    }
}

/// Lazily binds parameters onto a tape as differentiable leaves.
pub struct Binder<'a> {
    store: &'a ParameterStore,
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParameterStore) -> Self {
        Binder {
            store,
            vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParameterStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = tape.leaf(p.value.clone(), &p.shape);
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradient per parameter (None for parameters never bound or unreached).
    pub fn gradients(&self, grads: &mut Gradients) -> Vec<Option<Vec<f64>>> {
        self.vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }
}
