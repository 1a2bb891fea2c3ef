//! Multi-label classification metrics, reported as percentages.

use serde::{Deserialize, Serialize};

use crate::data::NUM_LABELS;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 5] = ["accuracy", "sensitivity", "specificity", "macro_f1", "micro_f1"];

    pub fn values(&self) -> [f64; 5] {
        [self.accuracy, self.sensitivity, self.specificity, self.macro_f1, self.micro_f1]
    }

    pub fn mean(all: &[Metrics]) -> Option<Metrics> {
        if all.is_empty() {
            return None;
        }
        let n = all.len() as f64;
        let avg = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / n;
        Some(Metrics {
            accuracy: avg(|m| m.accuracy),
            sensitivity: avg(|m| m.sensitivity),
            specificity: avg(|m| m.specificity),
            macro_f1: avg(|m| m.macro_f1),
            micro_f1: avg(|m| m.micro_f1),
        })
    }
}

/// Per-label confusion counts.
pub fn confusion(predictions: &[[bool; NUM_LABELS]], targets: &[[u8; NUM_LABELS]]) -> [Confusion; NUM_LABELS] {
    let mut c = [Confusion::default(); NUM_LABELS];
    for (p, t) in predictions.iter().zip(targets) {
        for l in 0..NUM_LABELS {
            c[l].add(p[l], t[l] == 1);
        }
    }
    c
}

/// Accuracy over all `4·n` entries; sensitivity, specificity and F1 are
/// macro-averaged over labels with `0/0 = 0`; micro-F1 pools the counts and
/// is 100 when there is nothing to find and nothing was predicted.
pub fn evaluate(predictions: &[[bool; NUM_LABELS]], targets: &[[u8; NUM_LABELS]]) -> Metrics {
    assert_eq!(predictions.len(), targets.len(), "one prediction per target");
    let per_label = confusion(predictions, targets);
    let k = NUM_LABELS as f64;
    let mut pooled = Confusion::default();
    let (mut sens, mut spec, mut f1) = (0.0, 0.0, 0.0);
    for c in &per_label {
        sens += ratio(c.tp, c.tp + c.fn_);
        spec += ratio(c.tn, c.tn + c.fp);
        f1 += ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
        pooled.tp += c.tp;
        pooled.fp += c.fp;
        pooled.tn += c.tn;
        pooled.fn_ += c.fn_;
    }
    let micro = if pooled.tp + pooled.fp + pooled.fn_ == 0 {
        1.0
    } else {
        ratio(2 * pooled.tp, 2 * pooled.tp + pooled.fp + pooled.fn_)
    };
    Metrics {
        accuracy: 100.0 * ratio(pooled.tp + pooled.tn, predictions.len() * NUM_LABELS),
        sensitivity: 100.0 * sens / k,
        specificity: 100.0 * spec / k,
        macro_f1: 100.0 * f1 / k,
        micro_f1: 100.0 * micro,
    }
}
