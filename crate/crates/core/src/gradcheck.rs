//! Central-difference verification of tape gradients.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Maximum allowed relative error per entry.
    pub tol: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub abs_floor: f64,
    /// Reject the evaluation point if any ReLU input lies this close to 0.
    pub kink_margin: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            kink_margin: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub loss: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of `loss_fn` against central differences over
/// every entry of every parameter in `store`.
///
/// `loss_fn` must build a scalar on the given tape from the given store and
/// must not depend on anything else that changes between calls.
pub fn finite_diff_check<F>(store: &mut ParamStore, loss_fn: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    if !(cfg.h > 0.0) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let (loss, analytic) = {
        let tape = Tape::new();
        let loss = loss_fn(&tape, store)?;
        if tape.relu_margin() < cfg.kink_margin {
            return Err(Error::contract(format!(
                "evaluation point within {} of a ReLU kink (margin {:e})",
                cfg.kink_margin,
                tape.relu_margin()
            )));
        }
        let value = loss.item();
        tape.backward(loss, store)?;
        let grads: BTreeMap<String, Tensor> = store
            .names()
            .map(|n| (n.to_string(), store.grad(n).unwrap().clone()))
            .collect();
        (value, grads)
    };
    let numeric = numerical_gradients(store, &loss_fn, cfg.h)?;
    Ok(compare(loss, &analytic, &numeric, cfg))
}

pub fn numerical_gradients<F>(store: &mut ParamStore, loss_fn: &F, h: f64) -> Result<BTreeMap<String, Tensor>>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::inference();
        Ok(loss_fn(&tape, store)?.item())
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut out = BTreeMap::new();
    for name in names {
        let n = store.get(&name)?.numel();
        let mut g = Tensor::zeros(store.get(&name)?.shape());
        for i in 0..n {
            let orig = store.get(&name)?.data()[i];
            store.get_mut(&name)?.data_mut()[i] = orig + h;
            let plus = eval(store);
            store.get_mut(&name)?.data_mut()[i] = orig - h;
            let minus = eval(store);
            store.get_mut(&name)?.data_mut()[i] = orig;
            g.data_mut()[i] = (plus? - minus?) / (2.0 * h);
        }
        out.insert(name, g);
    }
    Ok(out)
}

pub fn compare(
    loss: f64,
    analytic: &BTreeMap<String, Tensor>,
    numeric: &BTreeMap<String, Tensor>,
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let params = analytic
        .iter()
        .map(|(name, a)| {
            let (mut rel, mut abs) = (0.0f64, 0.0f64);
            match numeric.get(name) {
                Some(n) if n.shape() == a.shape() => {
                    for (x, y) in a.data().iter().zip(n.data()) {
                        rel = rel.max(relative_error(*x, *y, cfg.abs_floor));
                        abs = abs.max((x - y).abs());
                    }
                }
                _ => rel = f64::INFINITY,
            }
            ParamCheck {
                name: name.clone(),
                entries: a.numel(),
                max_rel_error: rel,
                max_abs_error: abs,
                passed: rel <= cfg.tol,
            }
        })
        .collect();
    GradCheckReport { loss, params }
}
