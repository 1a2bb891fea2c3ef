//! Named trainable tensors with gradient and Adam moment slots, plus the
//! `params.bin` dump format.
//!
//! `params.bin` layout (all integers little-endian):
//!
//! ```text
//! magic     4 bytes  "MMSN"
//! version   u32      currently 1
//! count     u32      number of tensors
//! repeated count times:
//!   name_len u32, name (UTF-8)
//!   rank     u32, dims (u64 each)
//!   data     f64 LE, row-major
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PARAMS_MAGIC: &[u8; 4] = b"MMSN";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Clone, Debug)]
struct Slot {
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.slots.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        let zeros = Tensor::zeros(value.shape());
        self.slots.insert(
            name.to_string(),
            Slot {
                value,
                grad: zeros.clone(),
                m: zeros.clone(),
                v: zeros,
            },
        );
        Ok(())
    }

    /// Glorot-uniform `[fan_in, fan_out]` weight: `U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn insert_glorot(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
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

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.slots.values().map(|s| s.value.numel()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn slot(&self, name: &str) -> Result<&Slot> {
        self.slots
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))
    }

    fn slot_mut(&mut self, name: &str) -> Result<&mut Slot> {
        self.slots
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.slot(name)?.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        Ok(&mut self.slot_mut(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.slot(name)?.grad)
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let slot = self.slot_mut(name)?;
        slot.value.expect_same_shape(&grad, name)?;
        slot.grad = grad;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad.data_mut().fill(0.0);
        }
    }

    /// One bias-corrected Adam update (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        self.adam_step_with(lr, AdamConfig::default())
    }

    pub fn adam_step_with(&mut self, lr: f64, cfg: AdamConfig) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for slot in self.slots.values_mut() {
            let g = slot.grad.data();
            let m = slot.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = slot.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let (m, v) = (slot.m.data(), slot.v.data());
            for ((w, mi), vi) in slot.value.data_mut().iter_mut().zip(m).zip(v) {
                *w -= lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Copies values only (no gradients or moments).
    pub fn values(&self) -> BTreeMap<String, Tensor> {
        self.slots
            .iter()
            .map(|(k, s)| (k.clone(), s.value.clone()))
            .collect()
    }

    pub fn from_values(values: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut store = Self::new();
        for (k, v) in values {
            store.insert(&k, v)?;
        }
        Ok(store)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn write_tensors(w: &mut impl Write, tensors: &BTreeMap<String, Tensor>) -> std::io::Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&PARAMS_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors(r: &mut impl Read) -> Result<BTreeMap<String, Tensor>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != PARAMS_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != PARAMS_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(r)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        read_exact(r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact(r, &mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            read_exact(r, &mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name:?}")));
        }
    }
    Ok(out)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated file: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
