//! Loss assembly, the training loop and fold splitting.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Bound, HistoInput, Imputation, ModelConfig, Mmsn, PatientOutput, PreparedPatient};
use crate::params::ParamStore;
use crate::recon::MaskState;
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub classification: f64,
    pub recon: f64,
    pub consistency: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            classification: 1.0,
            recon: 0.5,
            consistency: 0.1,
        }
    }
}

impl LossWeights {
    pub fn new(classification: f64, recon: f64, consistency: f64) -> Self {
        Self {
            classification,
            recon,
            consistency,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.classification, self.recon, self.consistency];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("loss weights must be finite and nonnegative"));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub patience: usize,
    /// Minimum validation improvement that resets patience.
    pub min_delta: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Histopathology dropout probability during training.
    pub dropout_p: f64,
    /// Dropout probability for the fixed validation mask.
    pub val_dropout_p: f64,
    /// How masked patients are filled in during training.
    pub imputation: Imputation,
    pub folds: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.01,
            patience: 20,
            min_delta: 1e-4,
            lr_decay: 0.5,
            lr_decay_every: 40,
            dropout_p: 0.0,
            val_dropout_p: 0.0,
            imputation: Imputation::Reconstruct,
            folds: 3,
            seed: 0,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patience == 0 || self.lr_decay_every == 0 {
            return Err(Error::config("epochs, patience and lr_decay_every must be at least 1"));
        }
        if self.folds < 2 {
            return Err(Error::config("at least 2 folds required"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0) || !(self.min_delta >= 0.0) {
            return Err(Error::config("lr and lr_decay must be positive, min_delta nonnegative"));
        }
        for p in [self.dropout_p, self.val_dropout_p] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("dropout probability {p} outside [0, 1]")));
            }
        }
        self.weights.validate()?;
        self.model.validate()
    }

    /// Step decay: `lr · decay^⌊(epoch − 1) / every⌋` for 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(((epoch - 1) / self.lr_decay_every) as i32)
    }
}

/// `mean BCE(logits, targets)` over every patient and label.
pub fn classification_loss<'t>(logits: Var<'t>, targets: &Tensor) -> Result<Var<'t>> {
    logits.bce_with_logits(targets)
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts<'t> {
    pub classification: Var<'t>,
    /// `None` when nothing in the batch is masked.
    pub recon: Option<Var<'t>>,
    pub consistency: Var<'t>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub classification: f64,
    pub recon: f64,
    pub consistency: f64,
}

/// `λ₁ L_cls + λ₂ L_recon + λ₃ L_cons`.
pub fn total_loss<'t>(parts: &LossParts<'t>, w: &LossWeights) -> Result<Var<'t>> {
    let named = [
        ("classification", Some(parts.classification)),
        ("recon", parts.recon),
        ("consistency", Some(parts.consistency)),
    ];
    for (name, part) in named {
        if let Some(v) = part {
            if !v.item().is_finite() {
                return Err(Error::Numeric(format!("{name} loss is not finite")));
            }
        }
    }
    let mut total = parts.classification.scale(w.classification)?;
    if let Some(r) = parts.recon {
        total = total.add(r.scale(w.recon)?)?;
    }
    total.add(parts.consistency.scale(w.consistency)?)
}

pub struct BatchLoss<'t> {
    pub total: Var<'t>,
    pub parts: LossParts<'t>,
    pub values: LossValues,
    pub outputs: Vec<PatientOutput<'t>>,
}

/// Full-batch loss. Masked patients are filled in by `imputation`; when
/// reconstructed, they are scored against their own histopathology projection.
pub fn batch_loss<'t>(
    bound: &Bound<'t>,
    patients: &[&PreparedPatient],
    histo_masked: &[bool],
    imputation: Imputation,
    weights: &LossWeights,
) -> Result<BatchLoss<'t>> {
    if patients.is_empty() || patients.len() != histo_masked.len() {
        return Err(Error::contract("batch needs patients and one mask flag each"));
    }
    let mut outputs = Vec::with_capacity(patients.len());
    for (p, &masked) in patients.iter().zip(histo_masked) {
        let histo = if masked {
            HistoInput::Missing {
                imputation,
                target: Some(&p.histo),
            }
        } else {
            HistoInput::Observed(&p.histo)
        };
        outputs.push(bound.forward(&p.mri, histo)?);
    }
    let logits = Var::concat_rows(&outputs.iter().map(|o| o.logits).collect::<Vec<_>>())?;
    let targets = Tensor::new(
        vec![patients.len(), crate::data::NUM_LABELS],
        patients.iter().flat_map(|p| p.label_row()).collect(),
    )?;
    let classification = classification_loss(logits, &targets)?;
    let n = patients.len() as f64;
    let consistency = sum_vars(outputs.iter().map(|o| o.consistency))?
        .expect("batch is nonempty")
        .scale(1.0 / n)?;
    let recon_terms: Vec<Var<'t>> = outputs.iter().filter_map(|o| o.recon_loss).collect();
    let recon = match sum_vars(recon_terms.iter().copied())? {
        Some(s) => Some(s.scale(1.0 / recon_terms.len() as f64)?),
        None => None,
    };
    let parts = LossParts {
        classification,
        recon,
        consistency,
    };
    let total = total_loss(&parts, weights)?;
    let values = LossValues {
        total: total.item(),
        classification: classification.item(),
        recon: recon.map_or(0.0, |r| r.item()),
        consistency: consistency.item(),
    };
    Ok(BatchLoss {
        total,
        parts,
        values,
        outputs,
    })
}

fn sum_vars<'t>(mut it: impl Iterator<Item = Var<'t>>) -> Result<Option<Var<'t>>> {
    let Some(mut acc) = it.next() else { return Ok(None) };
    for v in it {
        acc = acc.add(v)?;
    }
    Ok(Some(acc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossValues,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation loss, or after the last epoch when
    /// there is no validation set.
    pub store: ParamStore,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

/// Mean total loss on an inference tape.
pub fn evaluate_loss(
    model: &Mmsn,
    store: &ParamStore,
    patients: &[&PreparedPatient],
    histo_masked: &[bool],
    imputation: Imputation,
    weights: &LossWeights,
) -> Result<LossValues> {
    let tape = Tape::inference();
    let bound = model.bind(&tape, store)?;
    Ok(batch_loss(&bound, patients, histo_masked, imputation, weights)?.values)
}

/// Full-batch Adam with per-epoch histopathology dropout, step-decay learning
/// rate and early stopping on the validation loss. `stream` selects the
/// masking streams (e.g. the fold index).
pub fn train(
    model: &Mmsn,
    mut store: ParamStore,
    train_set: &[&PreparedPatient],
    val_set: &[&PreparedPatient],
    cfg: &TrainConfig,
    stream: u32,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut mask_rng = stream_rng(cfg.seed, Stream::Masking, 2 * stream);
    let val_mask = MaskState::draw(
        val_set.len(),
        cfg.val_dropout_p,
        &mut stream_rng(cfg.seed, Stream::Masking, 2 * stream + 1),
    )?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut waited = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mask = MaskState::draw(train_set.len(), cfg.dropout_p, &mut mask_rng)?;
        let values = {
            let tape = Tape::new();
            let bound = model.bind(&tape, &store)?;
            let batch = batch_loss(&bound, train_set, &mask.histo_masked, cfg.imputation, &cfg.weights).map_err(|e| diverged(e, epoch))?;
            tape.backward(batch.total, &mut store).map_err(|e| diverged(e, epoch))?;
            batch.values
        };
        store.adam_step(lr)?;
        let val_loss = if val_set.is_empty() {
            None
        } else {
            let v = evaluate_loss(model, &store, val_set, &val_mask.histo_masked, cfg.imputation, &cfg.weights)
                .map_err(|e| diverged(e, epoch))?;
            Some(v.total)
        };
        history.push(EpochRecord {
            epoch,
            lr,
            train: values,
            val_loss,
        });
        if let Some(v) = val_loss {
            match &best {
                Some((b, _, _)) if v >= b - cfg.min_delta => {
                    waited += 1;
                    if waited >= cfg.patience {
                        stopped_early = true;
                        break;
                    }
                }
                _ => {
                    best = Some((v, epoch, store.clone()));
                    waited = 0;
                }
            }
        }
    }
    Ok(match best {
        Some((loss, epoch, snapshot)) => TrainOutcome {
            store: snapshot,
            history,
            best_epoch: epoch,
            best_val_loss: Some(loss),
            stopped_early,
        },
        None => TrainOutcome {
            best_epoch: history.len(),
            store,
            history,
            best_val_loss: None,
            stopped_early,
        },
    })
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numeric(message) => Error::Divergence { epoch, message },
        other => other,
    }
}

/// Shuffles `0..n` and cuts it into `k` validation folds whose sizes differ
/// by at most one (larger folds first).
pub fn kfold_split(n: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::config("at least 2 folds required"));
    }
    if n < k {
        return Err(Error::config(format!("{n} patients cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = n / k + usize::from(f < n % k);
        let mut fold = order[start..start + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += size;
    }
    Ok(folds)
}
