//! Synthetic paired-graph cohorts and cohort manifests.
//!
//! Every patient draws a label vector and one latent prototype `z_r ∈ ℝ¹⁶`
//! per region from a label-conditioned Gaussian. Both modalities observe the
//! same prototypes through their own per-region linear maps, so the two
//! graphs share region structure and label signal.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    load_patient, save_patient, to_json_string, write_atomic, GraphNode, Modality, ModalityGraph, PatientSample,
    NUM_LABELS,
};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Width of the shared latent prototypes.
pub const PROTOTYPE_DIM: usize = 16;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub regions: usize,
    pub mri_nodes_per_region: usize,
    pub histo_nodes_per_region: usize,
    pub d_mri: usize,
    pub d_hist: usize,
    /// Standard deviation of prototype and node-feature noise.
    pub noise: f64,
    /// Inter-region neighbours per node.
    pub knn: usize,
    /// Probability of each non-primary subtype being present as well.
    pub mix_prob: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_patients: 30,
            regions: 4,
            mri_nodes_per_region: 5,
            histo_nodes_per_region: 8,
            d_mri: 24,
            d_hist: 40,
            noise: 0.1,
            knn: 3,
            mix_prob: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_patients", self.n_patients),
            ("regions", self.regions),
            ("mri_nodes_per_region", self.mri_nodes_per_region),
            ("histo_nodes_per_region", self.histo_nodes_per_region),
            ("d_mri", self.d_mri),
            ("d_hist", self.d_hist),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("generator {name} must be positive")));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("generator noise must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.mix_prob) {
            return Err(Error::config("mix_prob must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Marginal probability of each label under the generator.
    pub fn label_prior(&self) -> f64 {
        let k = NUM_LABELS as f64;
        1.0 / k + (k - 1.0) / k * self.mix_prob
    }
}

/// Cohort-wide generative parameters shared by all patients.
#[derive(Clone, Debug)]
pub struct CohortModel {
    /// One direction per subtype.
    pub class_means: Vec<[f64; PROTOTYPE_DIM]>,
    /// One offset per region.
    pub region_offsets: Vec<[f64; PROTOTYPE_DIM]>,
    /// `[region]` row-major `d_mri × 16` maps.
    pub mri_maps: Vec<Vec<f64>>,
    /// `[region]` row-major `d_hist × 16` maps.
    pub histo_maps: Vec<Vec<f64>>,
}

impl CohortModel {
    pub fn sample(cfg: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        let map_entry = Normal::new(0.0, (1.0 / PROTOTYPE_DIM as f64).sqrt()).expect("positive std");
        let vec16 = |rng: &mut dyn rand::RngCore| -> [f64; PROTOTYPE_DIM] { std::array::from_fn(|_| std.sample(rng)) };
        let class_means = (0..NUM_LABELS).map(|_| vec16(rng)).collect();
        let region_offsets = (0..cfg.regions).map(|_| vec16(rng)).collect();
        let maps = |rows: usize, rng: &mut dyn rand::RngCore| -> Vec<Vec<f64>> {
            (0..cfg.regions)
                .map(|_| (0..rows * PROTOTYPE_DIM).map(|_| map_entry.sample(rng)).collect())
                .collect()
        };
        let mri_maps = maps(cfg.d_mri, rng);
        let histo_maps = maps(cfg.d_hist, rng);
        Self {
            class_means,
            region_offsets,
            mri_maps,
            histo_maps,
        }
    }

    /// Noise-free prototype of region `r` for labels `y`.
    pub fn prototype(&self, r: usize, y: &[u8; NUM_LABELS]) -> [f64; PROTOTYPE_DIM] {
        let mut z = self.region_offsets[r];
        for (mu, &yi) in self.class_means.iter().zip(y) {
            if yi == 1 {
                for (a, b) in z.iter_mut().zip(mu) {
                    *a += b;
                }
            }
        }
        z
    }
}

fn apply_map(map: &[f64], z: &[f64; PROTOTYPE_DIM]) -> Vec<f64> {
    map.chunks(PROTOTYPE_DIM)
        .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn region_label(r: usize) -> String {
    format!("R{r}")
}

fn sample_labels(cfg: &GeneratorConfig, rng: &mut impl Rng) -> [u8; NUM_LABELS] {
    let primary = rng.random_range(0..NUM_LABELS);
    std::array::from_fn(|i| u8::from(i == primary || rng.random::<f64>() < cfg.mix_prob))
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Complete graphs inside each region plus, for each node, edges to its `k`
/// nearest nodes (by feature distance) in other regions.
fn build_edges(nodes: &[GraphNode], k: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..nodes.len() {
        for j in i + 1..nodes.len() {
            if nodes[i].region == nodes[j].region {
                edges.push((i, j));
            }
        }
        let mut others: Vec<(f64, usize)> = (0..nodes.len())
            .filter(|&j| nodes[j].region != nodes[i].region)
            .map(|j| (squared_distance(&nodes[i].features, &nodes[j].features), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in others.iter().take(k) {
            edges.push((i.min(j), i.max(j)));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

fn modality_graph(
    modality: Modality,
    prototypes: &[[f64; PROTOTYPE_DIM]],
    maps: &[Vec<f64>],
    per_region: usize,
    cfg: &GeneratorConfig,
    rng: &mut impl Rng,
) -> ModalityGraph {
    let noise = Normal::new(0.0, cfg.noise).expect("validated noise");
    let mut nodes = Vec::with_capacity(prototypes.len() * per_region);
    for (r, z) in prototypes.iter().enumerate() {
        let clean = apply_map(&maps[r], z);
        for _ in 0..per_region {
            nodes.push(GraphNode {
                id: nodes.len(),
                region: region_label(r),
                features: clean.iter().map(|c| c + noise.sample(rng)).collect(),
            });
        }
    }
    let edges = build_edges(&nodes, cfg.knn);
    ModalityGraph { modality, nodes, edges }
}

/// Generates the cohort in memory; identical `(cfg, seed)` gives identical data.
pub fn generate_patients(cfg: &GeneratorConfig, seed: u64) -> Result<(CohortModel, Vec<PatientSample>)> {
    cfg.validate()?;
    let mut rng = stream_rng(seed, Stream::Generator, 0);
    let cohort = CohortModel::sample(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.noise).expect("validated noise");
    let width = cfg.n_patients.to_string().len().max(3);
    let patients = (0..cfg.n_patients)
        .map(|i| {
            let labels = sample_labels(cfg, &mut rng);
            let prototypes: Vec<[f64; PROTOTYPE_DIM]> = (0..cfg.regions)
                .map(|r| cohort.prototype(r, &labels).map(|v| v + noise.sample(&mut rng)))
                .collect();
            let mri = modality_graph(
                Modality::Mri,
                &prototypes,
                &cohort.mri_maps,
                cfg.mri_nodes_per_region,
                cfg,
                &mut rng,
            );
            let histo = modality_graph(
                Modality::Histo,
                &prototypes,
                &cohort.histo_maps,
                cfg.histo_nodes_per_region,
                cfg,
                &mut rng,
            );
            PatientSample {
                patient_id: format!("P{i:0width$}"),
                labels,
                mri,
                histo,
            }
        })
        .collect();
    Ok((cohort, patients))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    /// Patient files relative to the manifest's directory.
    pub patients: Vec<PathBuf>,
    pub generator: GeneratorConfig,
    pub seed: u64,
    pub d_mri: usize,
    pub d_hist: usize,
}

/// Writes one JSON file per patient plus `manifest.json` into `dir`.
pub fn generate_synthetic_cohort(cfg: &GeneratorConfig, seed: u64, dir: &Path) -> Result<CohortManifest> {
    let (_, patients) = generate_patients(cfg, seed)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(patients.len());
    for p in &patients {
        let name = PathBuf::from(format!("{}.json", p.patient_id));
        save_patient(&dir.join(&name), p)?;
        files.push(name);
    }
    let manifest = CohortManifest {
        patients: files,
        generator: cfg.clone(),
        seed,
        d_mri: cfg.d_mri,
        d_hist: cfg.d_hist,
    };
    write_atomic(&dir.join(MANIFEST_FILE), to_json_string(&manifest).as_bytes())?;
    Ok(manifest)
}

/// Accepts either a manifest file or the directory containing `manifest.json`.
pub fn read_manifest(path: &Path) -> Result<(CohortManifest, PathBuf)> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let manifest: CohortManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: file.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let base = file.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, base))
}

fn check_dims(p: &PatientSample, m: &CohortManifest) -> Result<()> {
    if p.mri.feature_dim() != m.d_mri || p.histo.feature_dim() != m.d_hist {
        return Err(Error::validation(
            "node.features",
            format!(
                "feature widths ({}, {}) differ from the manifest ({}, {})",
                p.mri.feature_dim(),
                p.histo.feature_dim(),
                m.d_mri,
                m.d_hist
            ),
        ));
    }
    Ok(())
}

/// Loads every patient of a cohort, failing on the first invalid file.
pub fn load_cohort(path: &Path) -> Result<(CohortManifest, Vec<PatientSample>)> {
    let (manifest, base) = read_manifest(path)?;
    let mut patients = Vec::with_capacity(manifest.patients.len());
    for rel in &manifest.patients {
        let p = load_patient(&base.join(rel))?;
        check_dims(&p, &manifest)?;
        patients.push(p);
    }
    if patients.is_empty() {
        return Err(Error::validation("patients", "cohort lists no patients"));
    }
    Ok((manifest, patients))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FileReport {
    pub path: PathBuf,
    pub passed: bool,
    pub field: Option<String>,
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub files: Vec<FileReport>,
    /// Positive count per label over the files that passed.
    pub label_counts: [usize; NUM_LABELS],
    pub passed_count: usize,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.files.iter().all(|f| f.passed)
    }

    pub fn label_fractions(&self) -> [f64; NUM_LABELS] {
        self.label_counts.map(|c| c as f64 / self.passed_count.max(1) as f64)
    }
}

/// Validates every file listed in a manifest; failures are reported, not raised.
pub fn validate_cohort(path: &Path) -> Result<ValidationReport> {
    let (manifest, base) = read_manifest(path)?;
    let mut files = Vec::with_capacity(manifest.patients.len());
    let mut label_counts = [0; NUM_LABELS];
    let mut passed_count = 0;
    for rel in &manifest.patients {
        let result = load_patient(&base.join(rel)).and_then(|p| check_dims(&p, &manifest).map(|_| p));
        files.push(match result {
            Ok(p) => {
                passed_count += 1;
                for (c, &l) in label_counts.iter_mut().zip(&p.labels) {
                    *c += usize::from(l);
                }
                FileReport {
                    path: rel.clone(),
                    passed: true,
                    field: None,
                    message: None,
                }
            }
            Err(e) => FileReport {
                path: rel.clone(),
                passed: false,
                field: e.field().map(str::to_string),
                message: Some(e.to_string()),
            },
        });
    }
    Ok(ValidationReport {
        files,
        label_counts,
        passed_count,
    })
}
