//! Named parameter store with gradient slots and CSPM snapshots.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

const CSPM_MAGIC: &[u8; 4] = b"CSPM";
const CSPM_VERSION: u32 = 1;

#[derive(Debug, Clone)]
struct Slot {
    value: Tensor,
    grad: Tensor,
}

/// All learnable weights, keyed by dotted names (`enc.b0.attn.wq`, ...).
/// Every parameter has a same-shape gradient accumulator. Iteration order is
/// the sorted name order, which makes checksums, snapshots and optimizer
/// sweeps deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Re-defining a name is a config error.
    pub fn define(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.slots.contains_key(name) {
            return Err(Error::Config(format!("parameter {name:?} defined twice")));
        }
        let grad = Tensor::zeros_like(&value);
        self.slots.insert(name.to_string(), Slot { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.slots
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.slots
            .get_mut(name)
            .map(|s| &mut s.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.slots
            .get(name)
            .map(|s| &s.grad)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    /// Accumulate into a parameter's gradient slot.
    pub fn add_grad(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?;
        slot.grad.add_assign(delta)
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad.data_mut().fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// Apply `f(name, value, grad)` to every parameter in sorted name order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor, &Tensor)) {
        for (name, slot) in self.slots.iter_mut() {
            f(name, &mut slot.value, &slot.grad);
        }
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        for (name, slot) in &self.slots {
            slot.value
                .ensure_finite(&format!("{what}: parameter {name}"))?;
        }
        Ok(())
    }

    /// Concatenate the listed parameters' values into one flat vector.
    pub fn flat_values_for(&self, names: &[String]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for name in names {
            out.extend_from_slice(self.get(name)?.data());
        }
        Ok(out)
    }

    /// Concatenate the listed parameters' gradients into one flat vector.
    pub fn flat_grads_for(&self, names: &[String]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for name in names {
            out.extend_from_slice(self.grad(name)?.data());
        }
        Ok(out)
    }

    /// Overwrite the listed parameters from a flat vector produced by
    /// [`ParamStore::flat_values_for`].
    pub fn set_flat_values_for(&mut self, names: &[String], flat: &[f64]) -> Result<()> {
        let mut cursor = 0;
        for name in names {
            let t = self.get_mut(name)?;
            let n = t.len();
            if cursor + n > flat.len() {
                return Err(Error::Shape(format!(
                    "flat vector too short for {name:?}: need {} more values",
                    cursor + n - flat.len()
                )));
            }
            t.data_mut().copy_from_slice(&flat[cursor..cursor + n]);
            cursor += n;
        }
        if cursor != flat.len() {
            return Err(Error::Shape(format!(
                "flat vector has {} extra values",
                flat.len() - cursor
            )));
        }
        Ok(())
    }

    /// Stable digest over names, shapes and the f64 bytes of all values.
    pub fn checksum(&self) -> u64 {
        let mut hasher = Sha256::new();
        for (name, slot) in &self.slots {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &d in slot.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in slot.value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// Write a CSPM snapshot: magic, version, then per parameter (sorted by
    /// name) `u32 name_len, name, u32 rank, u64×rank shape, f32×n data`,
    /// all little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, 0, e))?;
        let mut w = BufWriter::new(file);
        let mut written: u64 = 0;
        let put = |w: &mut BufWriter<File>, bytes: &[u8], written: &mut u64| -> Result<()> {
            w.write_all(bytes).map_err(|e| Error::io(path, *written, e))?;
            *written += bytes.len() as u64;
            Ok(())
        };
        put(&mut w, CSPM_MAGIC, &mut written)?;
        put(&mut w, &CSPM_VERSION.to_le_bytes(), &mut written)?;
        put(&mut w, &(self.slots.len() as u32).to_le_bytes(), &mut written)?;
        for (name, slot) in &self.slots {
            put(&mut w, &(name.len() as u32).to_le_bytes(), &mut written)?;
            put(&mut w, name.as_bytes(), &mut written)?;
            put(&mut w, &(slot.value.shape().len() as u32).to_le_bytes(), &mut written)?;
            for &d in slot.value.shape() {
                put(&mut w, &(d as u64).to_le_bytes(), &mut written)?;
            }
            for &v in slot.value.data() {
                put(&mut w, &(v as f32).to_le_bytes(), &mut written)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, written, e))
    }

    /// Read a CSPM snapshot written by [`ParamStore::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, 0, e))?;
        let mut r = Reader {
            inner: BufReader::new(file),
            offset: 0,
            path,
        };
        let magic = r.bytes::<4>()?;
        if &magic != CSPM_MAGIC {
            return Err(Error::format(path, format!("bad magic {magic:?}")));
        }
        let version = r.u32()?;
        if version != CSPM_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            if name_len > 4096 {
                return Err(Error::format(path, format!("name length {name_len} out of range")));
            }
            let name_bytes = r.vec(name_len)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::format(path, format!("rank {rank} out of range")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f32()? as f64);
            }
            store.define(&name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }
}

struct Reader<'a> {
    inner: BufReader<File>,
    offset: u64,
    path: &'a Path,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::io(self.path, self.offset, e))?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn vec(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::io(self.path, self.offset, e))?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes::<8>()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes::<4>()?))
    }
}
