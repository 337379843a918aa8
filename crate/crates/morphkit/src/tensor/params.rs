//! Named parameter storage, gradient accumulation, and checkpointing.
//!
//! A [`ParamStore`] owns every trainable tensor of a model, in insertion
//! order. Training stages parameters onto a fresh [`Tape`](super::Tape) each
//! step, runs backward, and folds the resulting gradients back into the store;
//! repeated folds accumulate until [`ParamStore::zero_grads`] resets them.
//! The optimizer then walks entries in insertion order via
//! [`ParamStore::apply_updates`], which keeps update order — and therefore
//! floating-point results — deterministic.
//!
//! Checkpoints use a flat binary format: the magic bytes `MKP1`, then for
//! each entry its name length (u32 LE), UTF-8 name, rank (u32 LE), dims
//! (u32 LE each), and fp64 LE data, in store insertion order.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Gradients, Tape, Tensor, Value};
use crate::error::{Error, Result};
use crate::rng::Rng;

const MAGIC: &[u8; 4] = b"MKP1";
/// Sanity bound when parsing checkpoints: no single name or dim count we
/// ever write comes close to this.
const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;

/// Which sub-network a parameter belongs to, for per-group staging/freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Transformation network (mask generator).
    Tn,
    /// Downstream classifier / encoder head.
    Classifier,
}

struct Entry {
    name: String,
    group: ParamGroup,
    value: Tensor,
    grad: Option<Vec<f64>>,
}

/// Insertion-ordered collection of named parameters.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, group: ParamGroup, value: Tensor) -> Result<()> {
        if self.by_name.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry { name: name.to_string(), group, value, grad: None });
        Ok(())
    }

    /// Weight tensor drawn uniformly from ±sqrt(6 / fan_in).
    pub fn add_uniform(
        &mut self,
        name: &str,
        group: ParamGroup,
        shape: &[usize],
        fan_in: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        self.add(name, group, Tensor::new(shape.to_vec(), data)?)
    }

    /// Zero-initialized parameter (biases).
    pub fn add_zeros(&mut self, name: &str, group: ParamGroup, shape: &[usize]) -> Result<()> {
        self.add(name, group, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        let idx = self
            .by_name
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name:?}")))?;
        Ok(&self.entries[*idx].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let idx = *self
            .by_name
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name:?}")))?;
        Ok(&mut self.entries[idx].value)
    }

    /// Names in insertion order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn group_of(&self, name: &str) -> Result<ParamGroup> {
        let idx = self
            .by_name
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name:?}")))?;
        Ok(self.entries[*idx].group)
    }

    /// Accumulated gradient for a parameter, if any backward has reached it.
    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        let idx = *self.by_name.get(name)?;
        self.entries[idx].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Put every parameter on `tape` as a leaf; parameters whose group is in
    /// `trainable` require gradients. Returns name → tape handle.
    pub fn stage(&self, tape: &mut Tape, trainable: &[ParamGroup]) -> HashMap<String, Value> {
        let mut staged = HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            let v = tape.leaf(e.value.clone(), trainable.contains(&e.group));
            staged.insert(e.name.clone(), v);
        }
        staged
    }

    /// Fold gradients from a completed backward pass into the store;
    /// repeated calls accumulate until [`ParamStore::zero_grads`].
    pub fn accumulate(&mut self, grads: &Gradients, staged: &HashMap<String, Value>) {
        for e in &mut self.entries {
            let Some(v) = staged.get(&e.name) else { continue };
            let Some(g) = grads.wrt(*v) else { continue };
            match &mut e.grad {
                Some(buf) => {
                    for (b, &x) in buf.iter_mut().zip(g) {
                        *b += x;
                    }
                }
                slot @ None => *slot = Some(g.to_vec()),
            }
        }
    }

    /// Visit `(name, group, value, grad)` for every entry holding a gradient,
    /// in insertion order, with the value mutable — the optimizer hook.
    pub fn apply_updates(&mut self, mut f: impl FnMut(&str, ParamGroup, &mut [f64], &[f64])) {
        for e in &mut self.entries {
            if let Some(g) = &e.grad {
                f(&e.name, e.group, e.value.data_mut(), g);
            }
        }
    }

    // ---- checkpoint I/O ------------------------------------------------------

    /// Write all parameters in insertion order.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            let shape = e.value.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &x in e.value.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Replace parameter values from a checkpoint written for the same model.
    ///
    /// The file must contain exactly the parameters this store declares, with
    /// matching shapes; anything else is an integrity error.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let entries = read_checkpoint(path)?;
        let mut seen = vec![false; self.entries.len()];
        for (name, tensor) in entries {
            let Some(&idx) = self.by_name.get(&name) else {
                return Err(Error::integrity(format!(
                    "checkpoint contains unknown parameter {name:?}"
                )));
            };
            if seen[idx] {
                return Err(Error::integrity(format!(
                    "checkpoint lists parameter {name:?} twice"
                )));
            }
            if tensor.shape() != self.entries[idx].value.shape() {
                return Err(Error::integrity(format!(
                    "checkpoint shape {:?} for {name:?} does not match expected {:?}",
                    tensor.shape(),
                    self.entries[idx].value.shape()
                )));
            }
            self.entries[idx].value = tensor;
            seen[idx] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::integrity(format!(
                "checkpoint is missing parameter {:?}",
                self.entries[missing].name
            )));
        }
        Ok(())
    }
}

/// Parse a checkpoint file into `(name, tensor)` pairs in file order.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic {:?} (expected {:?})",
            magic, MAGIC
        )));
    }
    let mut out = Vec::new();
    loop {
        let mut b4 = [0u8; 4];
        match r.read(&mut b4)? {
            0 => break,
            4 => {}
            n => {
                // a partial length prefix: pull the rest or fail
                read_exact(&mut r, &mut b4[n..], "entry name length")?;
            }
        }
        let name_len = u32::from_le_bytes(b4);
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(Error::format(format!("implausible name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len as usize];
        read_exact(&mut r, &mut name_buf, "entry name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::format("parameter name is not UTF-8".to_string()))?;
        read_exact(&mut r, &mut b4, "rank")?;
        let rank = u32::from_le_bytes(b4);
        if rank > MAX_RANK {
            return Err(Error::format(format!("implausible rank {rank} for {name:?}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            read_exact(&mut r, &mut b4, "dimension")?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b8 = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut r, &mut b8, "tensor data")?;
            data.push(f64::from_le_bytes(b8));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(format!("checkpoint truncated while reading {what}")))
}
