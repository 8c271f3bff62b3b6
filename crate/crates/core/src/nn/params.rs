//! Named parameter storage, the Adam optimizer and the checkpoint container.

use std::collections::HashMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Matrix,
    m: Matrix,
    v: Matrix,
    trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters with their Adam moments. Entries flagged frozen (running
/// statistics) are stored and checkpointed but never updated by the optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, ParamId>,
    step: u64,
    pub adam: AdamConfig,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    fn insert(&mut self, name: &str, value: Matrix, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter `{name}`"
            )));
        }
        let (r, c) = value.shape();
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn add(&mut self, name: &str, value: Matrix) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    pub fn add_frozen(&mut self, name: &str, value: Matrix) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let data = (0..rows * cols)
            .map(|_| {
                if bound > 0.0 {
                    rng.gen_range(-bound..=bound)
                } else {
                    0.0
                }
            })
            .collect();
        self.add(name, Matrix::from_vec(rows, cols, data)?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// One Adam update. Parameters without a gradient are treated as having a
    /// zero gradient, so their moments still decay.
    pub fn adam_step(&mut self, grads: &HashMap<ParamId, Matrix>, lr: f64) -> Result<()> {
        for (id, g) in grads {
            let e = &self.entries[id.0];
            if g.shape() != e.value.shape() {
                return Err(Error::mismatch(
                    format!("adam step for `{}`", e.name),
                    format!(
                        "gradient {:?} vs parameter {:?}",
                        g.shape(),
                        e.value.shape()
                    ),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(e.name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.adam;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, e) in self.entries.iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            let g = grads.get(&ParamId(i));
            let Entry { value, m, v, .. } = e;
            for k in 0..value.len() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                let mk = beta1 * m.data()[k] + (1.0 - beta1) * gk;
                let vk = beta2 * v.data()[k] + (1.0 - beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                value.data_mut()[k] -= lr * (mk / bc1) / ((vk / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Copies values (not optimizer state) from another store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let id = other
                .id(&e.name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{}`", e.name)))?;
            let src = other.value(id);
            if src.shape() != e.value.shape() {
                return Err(Error::mismatch(e.name.clone(), "shape differs"));
            }
            e.value = src.clone();
        }
        Ok(())
    }

    /// Bitwise equality of all values.
    pub fn values_identical(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

const MAGIC: &[u8; 8] = b"F4DCKPT1";
const DTYPE_F64: u8 = 1;

/// Writes parameters, Adam state and JSON metadata into one binary container.
/// Layout: magic, metadata length + bytes, step, entry count, then per entry
/// name, flags, dtype, shape and three little-endian payloads (value, m, v).
pub fn save_checkpoint<W: Write>(
    store: &ParamStore,
    metadata: &serde_json::Value,
    mut w: W,
) -> Result<()> {
    w.write_all(MAGIC)?;
    let meta = serde_json::to_vec(metadata)?;
    w.write_u64::<LittleEndian>(meta.len() as u64)?;
    w.write_all(&meta)?;
    w.write_u64::<LittleEndian>(store.step)?;
    w.write_u64::<LittleEndian>(store.entries.len() as u64)?;
    for e in &store.entries {
        w.write_u32::<LittleEndian>(e.name.len() as u32)?;
        w.write_all(e.name.as_bytes())?;
        w.write_u8(e.trainable as u8)?;
        w.write_u8(DTYPE_F64)?;
        w.write_u64::<LittleEndian>(e.value.rows() as u64)?;
        w.write_u64::<LittleEndian>(e.value.cols() as u64)?;
        for arr in [&e.value, &e.m, &e.v] {
            for &x in arr.data() {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
    }
    Ok(())
}

/// Reads only the JSON metadata at the start of a checkpoint.
pub fn read_checkpoint_metadata<R: Read>(mut r: R) -> Result<serde_json::Value> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let meta_len = r.read_u64::<LittleEndian>()? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    Ok(serde_json::from_slice(&meta)?)
}

/// Reads a checkpoint into `store`, which must already contain the same named
/// parameters with the same shapes. Returns the metadata.
pub fn load_checkpoint<R: Read>(store: &mut ParamStore, mut r: R) -> Result<serde_json::Value> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let meta_len = r.read_u64::<LittleEndian>()? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let metadata = serde_json::from_slice(&meta)?;
    let step = r.read_u64::<LittleEndian>()?;
    let count = r.read_u64::<LittleEndian>()? as usize;
    if count != store.entries.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} arrays, model expects {}",
            store.entries.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("bad array name".into()))?;
        let _trainable = r.read_u8()?;
        if r.read_u8()? != DTYPE_F64 {
            return Err(Error::Format(format!("unsupported dtype for `{name}`")));
        }
        let rows = r.read_u64::<LittleEndian>()? as usize;
        let cols = r.read_u64::<LittleEndian>()? as usize;
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Format(format!("unknown array `{name}`")))?;
        let e = &mut store.entries[id.0];
        if e.value.shape() != (rows, cols) {
            return Err(Error::Format(format!(
                "array `{name}` is {rows}x{cols}, model expects {:?}",
                e.value.shape()
            )));
        }
        for arr in [&mut e.value, &mut e.m, &mut e.v] {
            r.read_f64_into::<LittleEndian>(arr.data_mut())?;
        }
        seen[id.0] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Format("checkpoint is missing arrays".into()));
    }
    store.step = step;
    Ok(metadata)
}
