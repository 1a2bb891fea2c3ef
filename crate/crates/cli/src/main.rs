use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mmsn::data::write_atomic;
use mmsn::gradcheck::GradCheckConfig;
use mmsn::model::{Imputation, Mmsn, PreparedPatient};
use mmsn::rng::{stream_rng, Stream};
use mmsn::run::{
    cross_validate, embeddings_csv, evaluate_patients, feature_dims, gradcheck_toy, latent_spectrum, parse_p_grid,
    prepare, recon_eval_csv, reconstruct_eval, thread_budget, values_csv, write_run_artifacts, RunConfig,
    DEFAULT_P_GRID,
};
use mmsn::synth::{generate_synthetic_cohort, load_cohort, validate_cohort};
use mmsn::{Error, ParamStore};

#[derive(Parser)]
#[command(name = "mmsn", version, about = "Multimodal sheaf-based graph fusion: synthesis, training and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort (patient JSON files plus manifest.json).
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Run config JSON; only its `generator` section is used here.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check every file listed in a cohort manifest.
    Validate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Cross-validated training; writes per-fold params, histories and metrics.json.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (overrides `output` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Metrics of a trained model on a cohort with both modalities present.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
    },
    /// Metrics and reconstruction error per histopathology dropout rate.
    ReconstructEval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// Comma-separated dropout rates in [0, 1].
        #[arg(long, default_value_t = default_grid())]
        p_grid: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Fill::Reconstruct)]
        imputation: Fill,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full loss on a two-patient toy batch.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Eigenvalues of the latent normalized sheaf Laplacian, one per line.
    Spectrum {
        /// Trained parameters; a freshly initialised model when absent.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Patient embeddings as CSV (patient_id, h0..h{2d-1}).
    ExportEmbeddings {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Fill {
    Reconstruct,
    Zeros,
}

impl From<Fill> for Imputation {
    fn from(f: Fill) -> Self {
        match f {
            Fill::Reconstruct => Imputation::Reconstruct,
            Fill::Zeros => Imputation::Zeros,
        }
    }
}

fn default_grid() -> String {
    DEFAULT_P_GRID.map(|p| p.to_string()).join(",")
}

enum Failure {
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Check(_) => 5,
            Failure::Lib(e) => match e {
                Error::Config(_) | Error::Parse { .. } | Error::Validation { .. } => 2,
                Error::Io { .. } => 3,
                Error::Numeric(_) | Error::Divergence { .. } => 4,
                _ => 1,
            },
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_prepared(data: &Path) -> Result<Vec<PreparedPatient>, Error> {
    let (_, samples) = load_cohort(data)?;
    prepare(&samples)
}

fn check_dims(model: &Mmsn, patients: &[PreparedPatient]) -> Result<(), Error> {
    let dims = feature_dims(patients)?;
    if dims != model.modality_dims() {
        return Err(Error::Config(format!(
            "cohort feature widths {dims:?} do not match the model's {:?}",
            model.modality_dims()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth { out, config, seed } => {
            let cfg = load_config(config.as_deref())?;
            let seed = seed.unwrap_or(cfg.train.seed);
            let manifest = generate_synthetic_cohort(&cfg.generator, seed, &out)?;
            println!("wrote {} patients to {}", manifest.patients.len(), out.display());
        }
        Command::Validate { data } => {
            let report = validate_cohort(&data)?;
            for f in &report.files {
                match (&f.field, &f.message) {
                    (_, None) => println!("PASS {}", f.path.display()),
                    (field, Some(msg)) => {
                        println!("FAIL {} [{}] {msg}", f.path.display(), field.as_deref().unwrap_or("-"))
                    }
                }
            }
            let fr = report.label_fractions().map(|v| format!("{v:.3}"));
            println!("{}/{} files valid; label fractions {}", report.passed_count, report.files.len(), fr.join(" "));
            if !report.all_passed() {
                return Err(Failure::Check(format!("{} invalid files", report.files.len() - report.passed_count)));
            }
        }
        Command::Train { data, config, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(o) = out {
                cfg.output = Some(o);
            }
            cfg.train.validate()?;
            let out = cfg
                .output
                .clone()
                .ok_or_else(|| Error::Config("no output directory: pass --out or set `output`".into()))?;
            let patients = load_prepared(&data)?;
            eprintln!("training {} folds on {} patients", cfg.train.folds, patients.len());
            let cv = cross_validate(&patients, &cfg.train, thread_budget())?;
            write_run_artifacts(&out, &cfg, &cv, &patients)?;
            for f in &cv.folds {
                println!(
                    "fold {}: best epoch {}, train micro-F1 {:.2}, validation micro-F1 {:.2}",
                    f.fold, f.best_epoch, f.train_metrics.micro_f1, f.val_metrics.micro_f1
                );
            }
            let (t, v) = (cv.mean_train(), cv.mean_val());
            println!("mean over folds: train micro-F1 {:.2}, validation micro-F1 {:.2}", t.micro_f1, v.micro_f1);
            println!("artifacts in {}", out.display());
        }
        Command::Eval { data, params } => {
            let (model, store) = Mmsn::load(&params)?;
            let patients = load_prepared(&data)?;
            check_dims(&model, &patients)?;
            let refs: Vec<&PreparedPatient> = patients.iter().collect();
            let m = evaluate_patients(&model, &store, &refs, &vec![false; refs.len()], Imputation::Reconstruct)?;
            print!("{}", mmsn::data::to_json_string(&m));
        }
        Command::ReconstructEval {
            data,
            params,
            p_grid,
            seed,
            imputation,
            out,
        } => {
            let grid = parse_p_grid(&p_grid)?;
            let (model, store) = Mmsn::load(&params)?;
            let patients = load_prepared(&data)?;
            check_dims(&model, &patients)?;
            let refs: Vec<&PreparedPatient> = patients.iter().collect();
            let rows = reconstruct_eval(&model, &store, &refs, &grid, seed, imputation.into())?;
            emit(out.as_deref(), &recon_eval_csv(&rows))?;
        }
        Command::Gradcheck { config, seed } => {
            let cfg = load_config(config.as_deref())?;
            cfg.train.weights.validate()?;
            let report = gradcheck_toy(seed, &cfg.train.weights, &GradCheckConfig::default())?;
            for p in &report.params {
                println!(
                    "{} {:<16} entries {:>4}  max rel {:.3e}  max abs {:.3e}",
                    if p.passed { "PASS" } else { "FAIL" },
                    p.name,
                    p.entries,
                    p.max_rel_error,
                    p.max_abs_error
                );
            }
            println!("loss {:.6e}, max relative error {:.3e}", report.loss, report.max_rel_error());
            if !report.passed() {
                return Err(Failure::Check("gradient check failed".into()));
            }
        }
        Command::Spectrum {
            params,
            config,
            seed,
            out,
        } => {
            let (model, store): (Mmsn, ParamStore) = match params {
                Some(p) => Mmsn::load(&p)?,
                None => {
                    let cfg = load_config(config.as_deref())?;
                    let g = &cfg.generator;
                    Mmsn::init(&cfg.train.model, g.d_mri, g.d_hist, &mut stream_rng(seed, Stream::Init, 0))?
                }
            };
            emit(out.as_deref(), &values_csv(&latent_spectrum(&model, &store)?))?;
        }
        Command::ExportEmbeddings { data, params, out } => {
            let (model, store) = Mmsn::load(&params)?;
            let patients = load_prepared(&data)?;
            check_dims(&model, &patients)?;
            let refs: Vec<&PreparedPatient> = patients.iter().collect();
            let preds = model.predict(&store, &refs, &vec![false; refs.len()], Imputation::Reconstruct)?;
            emit(out.as_deref(), &embeddings_csv(&preds))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.exit_code();
            match f {
                Failure::Lib(e) => eprintln!("error: {e}"),
                Failure::Check(msg) => eprintln!("check failed: {msg}"),
            }
            ExitCode::from(code)
        }
    }
}
