//! Cross-validated runs and their on-disk artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{to_json_string, write_atomic, Modality, PatientSample};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
use crate::metrics::{evaluate, Metrics};
use crate::model::{Imputation, ModelConfig, Mmsn, Prediction, PreparedPatient};
use crate::params::ParamStore;
use crate::recon::{recon_loss, MaskState};
use crate::rng::{stream_rng, Stream};
use crate::sheaf::DEFAULT_EPS;
use crate::synth::{generate_patients, GeneratorConfig};
use crate::train::{batch_loss, kfold_split, train, EpochRecord, LossWeights, TrainConfig};
use crate::Tape;

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            if e.is_data() {
                Error::Config(format!("{}: {e}", path.display()))
            } else {
                Error::Parse {
                    path: path.to_path_buf(),
                    line: e.line(),
                    message: e.to_string(),
                }
            }
        })?;
        cfg.generator.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// JSON with every default written out.
    pub fn snapshot(&self) -> String {
        to_json_string(self)
    }
}

pub fn prepare(patients: &[PatientSample]) -> Result<Vec<PreparedPatient>> {
    patients.iter().map(PreparedPatient::new).collect()
}

pub fn feature_dims(patients: &[PreparedPatient]) -> Result<(usize, usize)> {
    let first = patients.first().ok_or_else(|| Error::config("no patients"))?;
    let dims = (first.mri.features.cols(), first.histo.features.cols());
    if patients
        .iter()
        .any(|p| (p.mri.features.cols(), p.histo.features.cols()) != dims)
    {
        return Err(Error::validation("node.features", "feature widths differ between patients"));
    }
    Ok(dims)
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub val_indices: Vec<usize>,
    pub model: Mmsn,
    pub store: ParamStore,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub train_metrics: Metrics,
    pub val_metrics: Metrics,
}

#[derive(Clone, Debug)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
}

impl CvResult {
    pub fn mean_train(&self) -> Metrics {
        Metrics::mean(&self.folds.iter().map(|f| f.train_metrics).collect::<Vec<_>>()).expect("at least 2 folds")
    }

    pub fn mean_val(&self) -> Metrics {
        Metrics::mean(&self.folds.iter().map(|f| f.val_metrics).collect::<Vec<_>>()).expect("at least 2 folds")
    }
}

/// Metrics on `patients` with the histopathology graph dropped where `masked`.
pub fn evaluate_patients(
    model: &Mmsn,
    store: &ParamStore,
    patients: &[&PreparedPatient],
    masked: &[bool],
    imputation: Imputation,
) -> Result<Metrics> {
    let preds = model.predict(store, patients, masked, imputation)?;
    let labels: Vec<_> = preds.iter().map(Prediction::labels).collect();
    let targets: Vec<_> = patients.iter().map(|p| p.labels).collect();
    Ok(evaluate(&labels, &targets))
}

/// Worker count from `MMSN_THREADS` (default: available parallelism).
pub fn thread_budget() -> usize {
    std::env::var("MMSN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn run_fold(patients: &[PreparedPatient], folds: &[Vec<usize>], fold: usize, cfg: &TrainConfig) -> Result<FoldResult> {
    let (d_mri, d_hist) = feature_dims(patients)?;
    let val_indices = folds[fold].clone();
    let train_idx: Vec<usize> = (0..patients.len()).filter(|i| !val_indices.contains(i)).collect();
    let train_set: Vec<&PreparedPatient> = train_idx.iter().map(|&i| &patients[i]).collect();
    let val_set: Vec<&PreparedPatient> = val_indices.iter().map(|&i| &patients[i]).collect();
    let mut init_rng = stream_rng(cfg.seed, Stream::Init, fold as u32);
    let (model, store) = Mmsn::init(&cfg.model, d_mri, d_hist, &mut init_rng)?;
    let outcome = train(&model, store, &train_set, &val_set, cfg, fold as u32)?;
    let imputation = cfg.imputation;
    let train_metrics =
        evaluate_patients(&model, &outcome.store, &train_set, &vec![false; train_set.len()], imputation)?;
    let val_metrics = evaluate_patients(&model, &outcome.store, &val_set, &vec![false; val_set.len()], imputation)?;
    Ok(FoldResult {
        fold,
        val_indices,
        model,
        store: outcome.store,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        stopped_early: outcome.stopped_early,
        train_metrics,
        val_metrics,
    })
}

/// k-fold cross-validation; folds are trained on up to `threads` workers.
pub fn cross_validate(patients: &[PreparedPatient], cfg: &TrainConfig, threads: usize) -> Result<CvResult> {
    cfg.validate()?;
    let folds = kfold_split(patients.len(), cfg.folds, &mut stream_rng(cfg.seed, Stream::Folds, 0))?;
    let workers = threads.clamp(1, folds.len());
    let mut results: Vec<Option<Result<FoldResult>>> = (0..folds.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let folds = &folds;
                s.spawn(move || {
                    (w..folds.len())
                        .step_by(workers)
                        .map(|f| (f, run_fold(patients, folds, f, cfg)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (f, r) in h.join().expect("fold worker panicked") {
                results[f] = Some(r);
            }
        }
    });
    let folds = results
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect::<Result<Vec<_>>>()?;
    Ok(CvResult { folds })
}

#[derive(Serialize)]
struct FoldMetricsJson<'a> {
    fold: usize,
    best_epoch: usize,
    epochs_run: usize,
    validation_patients: Vec<&'a str>,
    train: Metrics,
    validation: Metrics,
}

#[derive(Serialize)]
struct MetricsJson<'a> {
    folds: Vec<FoldMetricsJson<'a>>,
    mean_over_folds: MeanJson,
}

#[derive(Serialize)]
struct MeanJson {
    train: Metrics,
    validation: Metrics,
}

pub fn metrics_json(cv: &CvResult, patients: &[PreparedPatient]) -> String {
    let folds = cv
        .folds
        .iter()
        .map(|f| FoldMetricsJson {
            fold: f.fold,
            best_epoch: f.best_epoch,
            epochs_run: f.history.len(),
            validation_patients: f.val_indices.iter().map(|&i| patients[i].id.as_str()).collect(),
            train: f.train_metrics,
            validation: f.val_metrics,
        })
        .collect();
    to_json_string(&MetricsJson {
        folds,
        mean_over_folds: MeanJson {
            train: cv.mean_train(),
            validation: cv.mean_val(),
        },
    })
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        let val = r.val_loss.map(fmt_f64).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.epoch, fmt_f64(r.train.total), val, fmt_f64(r.lr)).unwrap();
    }
    out
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `config.json`, `metrics.json` and per-fold `fold_{i}/params.bin` and
/// `fold_{i}/history.csv`; `run.log` is the only file carrying a timestamp.
pub fn write_run_artifacts(out: &Path, cfg: &RunConfig, cv: &CvResult, patients: &[PreparedPatient]) -> Result<()> {
    create_dir(out)?;
    write_atomic(&out.join("config.json"), cfg.snapshot().as_bytes())?;
    for f in &cv.folds {
        let dir = out.join(format!("fold_{}", f.fold));
        create_dir(&dir)?;
        f.model.save(&dir.join("params.bin"), &f.store)?;
        write_atomic(&dir.join("history.csv"), history_csv(&f.history).as_bytes())?;
    }
    write_atomic(&out.join("metrics.json"), metrics_json(cv, patients).as_bytes())?;
    append_log(out, &format!("train finished: {} folds", cv.folds.len()))
}

pub fn append_log(out: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let path = out.join("run.log");
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(f, "[{stamp}] {line}").map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReconEvalRow {
    pub p: f64,
    pub masked: usize,
    pub metrics: Metrics,
    /// Mean and max `L_recon` over masked patients, scored after prediction.
    pub recon_loss: Option<(f64, f64)>,
}

pub const DEFAULT_P_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

pub fn parse_p_grid(text: &str) -> Result<Vec<f64>> {
    let grid: Vec<f64> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad dropout rate {s:?} in grid")))
        })
        .collect::<Result<_>>()?;
    if grid.is_empty() || grid.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::config("dropout rates must lie in [0, 1]"));
    }
    Ok(grid)
}

/// Metrics with histopathology masked at each rate; masked patients are
/// predicted from MRI plus reconstruction only.
pub fn reconstruct_eval(
    model: &Mmsn,
    store: &ParamStore,
    patients: &[&PreparedPatient],
    grid: &[f64],
    seed: u64,
    imputation: Imputation,
) -> Result<Vec<ReconEvalRow>> {
    grid.iter()
        .enumerate()
        .map(|(i, &p)| {
            let mask = MaskState::draw(patients.len(), p, &mut stream_rng(seed, Stream::Masking, 1_000_000 + i as u32))?;
            let metrics = evaluate_patients(model, store, patients, &mask.histo_masked, imputation)?;
            let recon_loss = match imputation {
                Imputation::Reconstruct => {
                    let masked: Vec<&PreparedPatient> = patients
                        .iter()
                        .zip(&mask.histo_masked)
                        .filter_map(|(p, &m)| m.then_some(*p))
                        .collect();
                    let losses = reconstruction_errors(model, store, &masked)?;
                    (!losses.is_empty()).then(|| {
                        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
                        (mean, losses.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    })
                }
                Imputation::Zeros => None,
            };
            Ok(ReconEvalRow {
                p,
                masked: mask.masked_count(),
                metrics,
                recon_loss,
            })
        })
        .collect()
}

/// `L_recon` of each patient's reconstruction against its own histopathology
/// projection. Scoring only; predictions never see these targets.
pub fn reconstruction_errors(model: &Mmsn, store: &ParamStore, patients: &[&PreparedPatient]) -> Result<Vec<f64>> {
    let tape = Tape::inference();
    let bound = model.bind(&tape, store)?;
    patients
        .iter()
        .map(|p| {
            let mri = bound.project(Modality::Mri, &p.mri)?;
            let target = bound.project(Modality::Histo, &p.histo)?;
            Ok(recon_loss(bound.reconstruct(mri.latent)?, target.latent)?.item())
        })
        .collect()
}

pub fn recon_eval_csv(rows: &[ReconEvalRow]) -> String {
    let mut out =
        String::from("p,accuracy,sensitivity,specificity,macro_f1,micro_f1,masked,recon_loss_mean,recon_loss_max\n");
    for r in rows {
        let vals: Vec<String> = r.metrics.values().iter().map(|&v| fmt_f64(v)).collect();
        let (mean, max) = r.recon_loss.map_or((String::new(), String::new()), |(a, b)| (fmt_f64(a), fmt_f64(b)));
        writeln!(out, "{},{},{},{mean},{max}", r.p, vals.join(","), r.masked).unwrap();
    }
    out
}

/// Eigenvalues of the latent normalized sheaf Laplacian, ascending.
pub fn latent_spectrum(model: &Mmsn, store: &ParamStore) -> Result<Vec<f64>> {
    let tape = Tape::inference();
    let bound = model.bind(&tape, store)?;
    Ok(bound.delta().to_block_matrix().eigenvalues())
}

pub fn values_csv(values: &[f64]) -> String {
    values.iter().map(|&v| fmt_f64(v) + "\n").collect()
}

pub fn embeddings_csv(preds: &[Prediction]) -> String {
    let mut out = String::new();
    if let Some(first) = preds.first() {
        let cols: Vec<String> = (0..first.embedding.len()).map(|i| format!("h{i}")).collect();
        writeln!(out, "patient_id,{}", cols.join(",")).unwrap();
    }
    for p in preds {
        let vals: Vec<String> = p.embedding.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(out, "{},{}", p.patient_id, vals.join(",")).unwrap();
    }
    out
}

/// Small model and cohort for gradient checks.
pub fn toy_setup(seed: u64) -> Result<(Mmsn, ParamStore, Vec<PreparedPatient>)> {
    let gen = GeneratorConfig {
        n_patients: 2,
        regions: 3,
        mri_nodes_per_region: 2,
        histo_nodes_per_region: 3,
        d_mri: 5,
        d_hist: 6,
        noise: 0.3,
        knn: 1,
        mix_prob: 0.5,
    };
    let (_, samples) = generate_patients(&gen, seed)?;
    let patients = prepare(&samples)?;
    let cfg = ModelConfig {
        latent_nodes: 5,
        latent_dim: 3,
        tau: 0.0,
        diffusion_layers: 2,
        eps: DEFAULT_EPS,
        rho_noise: 0.3,
    };
    let mut rng = stream_rng(seed, Stream::Init, 0);
    let (model, mut store) = Mmsn::init(&cfg, gen.d_mri, gen.d_hist, &mut rng)?;
    // zero biases put ReLU inputs of all-zero rows exactly on the kink
    let biases: Vec<String> = store.names().filter(|n| n.ends_with(".b")).map(str::to_string).collect();
    for name in biases {
        for v in store.get_mut(&name)?.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    Ok((model, store, patients))
}

/// Finite-difference check of the full weighted loss on the toy batch with
/// the second patient's histopathology masked and reconstructed.
pub fn gradcheck_toy(seed: u64, weights: &LossWeights, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (model, mut store, patients) = toy_setup(seed)?;
    let refs: Vec<&PreparedPatient> = patients.iter().collect();
    let masked = [false, true];
    finite_diff_check(
        &mut store,
        |tape, store| {
            let bound = model.bind(tape, store)?;
            Ok(batch_loss(&bound, &refs, &masked, Imputation::Reconstruct, weights)?.total)
        },
        cfg,
    )
}
