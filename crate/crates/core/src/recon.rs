//! Modality dropout and reconstruction of a missing modality in latent space.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::latent::{fuse_modalities, LatentGraph};
use crate::nn::Mlp;
use crate::sheaf::restrict;

/// Which patients have their histopathology graph withheld.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskState {
    pub p: f64,
    pub histo_masked: Vec<bool>,
}

impl MaskState {
    /// Masks each of `n` patients independently with probability `p`.
    pub fn draw(n: usize, p: f64, rng: &mut impl Rng) -> Result<Self> {
        let histo_masked = (0..n).map(|_| mask_modality(p, rng)).collect::<Result<_>>()?;
        Ok(Self { p, histo_masked })
    }

    pub fn none(n: usize) -> Self {
        Self {
            p: 0.0,
            histo_masked: vec![false; n],
        }
    }

    pub fn masked_count(&self) -> usize {
        self.histo_masked.iter().filter(|&&m| m).count()
    }
}

/// One Bernoulli(`p`) draw: `true` means the histopathology graph is dropped.
/// MRI is never masked.
pub fn mask_modality(p: f64, rng: &mut impl Rng) -> Result<bool> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("dropout probability {p} outside [0, 1]")));
    }
    Ok(rng.random::<f64>() < p)
}

/// `e_v = Σ_{e ∋ v} ρ_{e,v} h_v`: `[N, d]`.
pub fn aggregate_edge_stalks<'t>(latent: &LatentGraph, maps: Var<'t>, nodes: Var<'t>) -> Result<Var<'t>> {
    let restricted = restrict(latent.graph(), maps, nodes)?;
    nodes.tape().constant(latent.node_sum_matrix().clone())?.matmul(restricted)
}

pub fn reconstruct_missing<'t>(edge_stalks: Var<'t>, mlp: &Mlp<'t>) -> Result<Var<'t>> {
    mlp.forward(edge_stalks)
}

/// `Σ_v ‖x_v − x̃_v‖²`.
pub fn recon_loss<'t>(reconstruction: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    reconstruction.squared_error(target)
}

/// Fuses the observed projection with `x̃` standing in for the masked modality.
pub fn inject_reconstruction<'t>(
    base: Var<'t>,
    observed: Var<'t>,
    reconstruction: Var<'t>,
    masked: bool,
) -> Result<Var<'t>> {
    if !masked {
        return Err(Error::contract("no modality is masked; nothing to inject"));
    }
    fuse_modalities(base, Some(observed), Some(reconstruction))
}
