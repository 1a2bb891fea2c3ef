//! Dense layers bound to a tape.
//!
//! Parameters live in a [`ParamStore`] under `{prefix}.{i}.w` (`[in, out]`)
//! and, when present, `{prefix}.{i}.b` (`[1, out]`).

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct Linear<'t> {
    pub w: Var<'t>,
    pub b: Option<Var<'t>>,
}

impl<'t> Linear<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(self.w)?;
        match self.b {
            Some(b) => y.add_row(b),
            None => Ok(y),
        }
    }
}

/// Linear layers with ReLU between consecutive layers and none after the last.
#[derive(Clone, Debug)]
pub struct Mlp<'t> {
    layers: Vec<Linear<'t>>,
}

impl<'t> Mlp<'t> {
    pub fn new(layers: Vec<Linear<'t>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("an MLP needs at least one layer"));
        }
        Ok(Self { layers })
    }

    /// Binds every `{prefix}.{i}` layer found in `store`, in index order.
    pub fn bind(tape: &'t Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut layers = Vec::new();
        loop {
            let w = format!("{prefix}.{}.w", layers.len());
            if !store.contains(&w) {
                break;
            }
            let b = format!("{prefix}.{}.b", layers.len());
            let b = if store.contains(&b) { Some(tape.param(store, &b)?) } else { None };
            layers.push(Linear {
                w: tape.param(store, &w)?,
                b,
            });
        }
        if layers.is_empty() {
            return Err(Error::contract(format!("no layers named {prefix}.* in the parameter store")));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Linear<'t>] {
        &self.layers
    }

    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Registers Glorot-initialized weights (and zero biases) for an MLP with
/// layer widths `dims[0] -> dims[1] -> ...`.
pub fn init_mlp(store: &mut ParamStore, prefix: &str, dims: &[usize], bias: bool, rng: &mut impl Rng) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::config(format!("{prefix}: an MLP needs at least two widths")));
    }
    for (i, pair) in dims.windows(2).enumerate() {
        store.insert_glorot(&format!("{prefix}.{i}.w"), pair[0], pair[1], rng)?;
        if bias {
            store.insert(&format!("{prefix}.{i}.b"), Tensor::zeros(&[1, pair[1]]))?;
        }
    }
    Ok(())
}
