//! The full network: two modality encoders feeding a shared latent sheaf,
//! with reconstruction of a missing histopathology modality and a
//! four-label classification head.
//!
//! Parameter names:
//!
//! | name | shape |
//! |------|-------|
//! | `enc.mri.w`, `enc.histo.w` | `[d_m, d]` |
//! | `assign.{mri,histo}.{0,1}.{w,b}` | `d → d → N` |
//! | `latent.h` | `[N, d]` |
//! | `latent.rho` | `[2|E|, d, d]` |
//! | `diffuse.{l}.w` | `[d, d]` |
//! | `recon.{0,1}.{w,b}` | `d → d → d` |
//! | `head.0.{w,b}` | `2d → 4` |

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{write_atomic, Modality, PatientSample, NUM_LABELS};
use crate::encoder::{encode_regions, region_gnn_layer, RegionGraph};
use crate::error::{Error, Result};
use crate::latent::{
    fuse_modalities, init_latent_graph, project_to_latent, readout, sheaf_diffuse, soft_assign, LatentGraph,
};
use crate::nn::{init_mlp, Linear, Mlp};
use crate::params::{read_tensors, write_tensors, ParamStore};
use crate::recon::{aggregate_edge_stalks, recon_loss, reconstruct_missing};
use crate::sheaf::{restrict, SheafOperator, StalkGraph, DEFAULT_EPS};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Latent node count `N`.
    pub latent_nodes: usize,
    /// Stalk and embedding width `d`.
    pub latent_dim: usize,
    /// Cosine-similarity threshold for latent edges.
    pub tau: f64,
    pub diffusion_layers: usize,
    /// Eigenvalue clamp for the degree normalization.
    pub eps: f64,
    /// Restriction maps start at `I + U(-rho_noise, rho_noise)`.
    pub rho_noise: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_nodes: 16,
            latent_dim: 32,
            tau: 0.2,
            diffusion_layers: 2,
            eps: DEFAULT_EPS,
            rho_noise: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_nodes < 2 {
            return Err(Error::config("latent_nodes must be at least 2"));
        }
        if self.latent_dim == 0 || self.diffusion_layers == 0 {
            return Err(Error::config("latent_dim and diffusion_layers must be at least 1"));
        }
        if !(self.eps > 0.0) || !(self.rho_noise >= 0.0) || self.tau.is_nan() || self.tau < -1.0 {
            return Err(Error::config("eps must be positive, rho_noise nonnegative, tau at least -1"));
        }
        Ok(())
    }
}

/// A patient with both modality graphs reduced to region graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPatient {
    pub id: String,
    pub labels: [u8; NUM_LABELS],
    pub mri: RegionGraph,
    pub histo: RegionGraph,
}

impl PreparedPatient {
    pub fn new(sample: &PatientSample) -> Result<Self> {
        Ok(Self {
            id: sample.patient_id.clone(),
            labels: sample.labels,
            mri: encode_regions(&sample.mri)?,
            histo: encode_regions(&sample.histo)?,
        })
    }

    pub fn label_row(&self) -> [f64; NUM_LABELS] {
        self.labels.map(f64::from)
    }
}

/// How a missing histopathology modality is filled in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Imputation {
    Reconstruct,
    Zeros,
}

/// The histopathology input for one forward pass. `target` is only used to
/// score the reconstruction and never influences the prediction.
#[derive(Clone, Copy, Debug)]
pub enum HistoInput<'a> {
    Observed(&'a RegionGraph),
    Missing {
        imputation: Imputation,
        target: Option<&'a RegionGraph>,
    },
}

#[derive(Clone, Debug)]
pub struct Mmsn {
    config: ModelConfig,
    d_mri: usize,
    d_hist: usize,
    latent: Arc<LatentGraph>,
}

impl Mmsn {
    /// Builds the latent topology and registers freshly initialized parameters.
    pub fn init(config: &ModelConfig, d_mri: usize, d_hist: usize, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        config.validate()?;
        if d_mri == 0 || d_hist == 0 {
            return Err(Error::config("modality feature widths must be positive"));
        }
        let (n, d) = (config.latent_nodes, config.latent_dim);
        let latent = init_latent_graph(n, d, config.tau, rng)?;
        let mut store = ParamStore::new();
        store.insert_glorot("enc.mri.w", d_mri, d, rng)?;
        store.insert_glorot("enc.histo.w", d_hist, d, rng)?;
        init_mlp(&mut store, "assign.mri", &[d, d, n], true, rng)?;
        init_mlp(&mut store, "assign.histo", &[d, d, n], true, rng)?;
        store.insert("latent.h", latent.initial_features().clone())?;
        let incidences = latent.graph().incidences();
        let mut rho = Vec::with_capacity(incidences * d * d);
        for _ in 0..incidences {
            for i in 0..d {
                for j in 0..d {
                    let noise = if config.rho_noise > 0.0 {
                        rng.random_range(-config.rho_noise..config.rho_noise)
                    } else {
                        0.0
                    };
                    rho.push(if i == j { 1.0 } else { 0.0 } + noise);
                }
            }
        }
        store.insert("latent.rho", Tensor::new(vec![incidences, d, d], rho)?)?;
        for l in 0..config.diffusion_layers {
            store.insert_glorot(&format!("diffuse.{l}.w"), d, d, rng)?;
        }
        init_mlp(&mut store, "recon", &[d, d, d], true, rng)?;
        init_mlp(&mut store, "head", &[2 * d, NUM_LABELS], true, rng)?;
        let model = Self {
            config: config.clone(),
            d_mri,
            d_hist,
            latent: Arc::new(latent),
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn latent(&self) -> &LatentGraph {
        &self.latent
    }

    pub fn modality_dims(&self) -> (usize, usize) {
        (self.d_mri, self.d_hist)
    }

    pub fn bind<'t>(&self, tape: &'t Tape, store: &ParamStore) -> Result<Bound<'t>> {
        let rho = tape.param(store, "latent.rho")?;
        let delta = SheafOperator::normalized(self.latent.graph(), rho, self.config.eps)?;
        let diffuse = (0..self.config.diffusion_layers)
            .map(|l| tape.param(store, &format!("diffuse.{l}.w")))
            .collect::<Result<_>>()?;
        let head = Mlp::bind(tape, store, "head")?.layers()[0];
        Ok(Bound {
            latent: self.latent.clone(),
            enc_mri: tape.param(store, "enc.mri.w")?,
            enc_histo: tape.param(store, "enc.histo.w")?,
            assign_mri: Mlp::bind(tape, store, "assign.mri")?,
            assign_histo: Mlp::bind(tape, store, "assign.histo")?,
            latent_h: tape.param(store, "latent.h")?,
            rho,
            delta,
            diffuse,
            recon: Mlp::bind(tape, store, "recon")?,
            head,
            edge_diff: tape.constant(self.latent.edge_diff_matrix().clone())?,
        })
    }

    /// Forward passes on an inference tape, one per patient.
    pub fn predict(
        &self,
        store: &ParamStore,
        patients: &[&PreparedPatient],
        histo_masked: &[bool],
        imputation: Imputation,
    ) -> Result<Vec<Prediction>> {
        if histo_masked.len() != patients.len() {
            return Err(Error::contract("one mask flag per patient required"));
        }
        let tape = Tape::inference();
        let bound = self.bind(&tape, store)?;
        patients
            .iter()
            .zip(histo_masked)
            .map(|(p, &masked)| {
                let histo = if masked {
                    HistoInput::Missing {
                        imputation,
                        target: None,
                    }
                } else {
                    HistoInput::Observed(&p.histo)
                };
                let out = bound.forward(&p.mri, histo)?;
                let logits = out.logits.to_tensor();
                Ok(Prediction {
                    patient_id: p.id.clone(),
                    logits: logits.data().try_into().expect("head emits four logits"),
                    embedding: out.embedding.to_tensor().into_data(),
                })
            })
            .collect()
    }

    /// Parameters plus the latent topology, so [`Mmsn::load`] needs nothing else.
    pub fn save(&self, path: &Path, store: &ParamStore) -> Result<()> {
        let mut tensors = store.values();
        for (name, t) in self.metadata_tensors()? {
            tensors.insert(name, t);
        }
        let mut buf = Vec::new();
        write_tensors(&mut buf, &tensors).map_err(|e| Error::io(path, e))?;
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<(Self, ParamStore)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_tensors(read_tensors(&mut Cursor::new(bytes))?)
    }

    fn metadata_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let edges = self.latent.edges();
        let flat = edges.iter().flat_map(|&(u, v)| [u as f64, v as f64]).collect();
        let c = &self.config;
        Ok(vec![
            ("topology.edges".into(), Tensor::new(vec![edges.len(), 2], flat)?),
            ("topology.features".into(), self.latent.initial_features().clone()),
            (
                "config.model".into(),
                Tensor::new(vec![3], vec![c.tau, c.eps, c.rho_noise])?,
            ),
        ])
    }

    pub fn from_tensors(mut tensors: BTreeMap<String, Tensor>) -> Result<(Self, ParamStore)> {
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Format(format!("parameter file lacks {name}")))
        };
        let edges_t = take("topology.edges")?;
        let features = take("topology.features")?;
        let meta = take("config.model")?;
        if features.shape().len() != 2 || edges_t.shape().len() != 2 || edges_t.cols() != 2 || meta.numel() != 3 {
            return Err(Error::Format("malformed topology tensors".into()));
        }
        let (n, d) = (features.rows(), features.cols());
        let edges = edges_t.data().chunks(2).map(|p| (p[0] as usize, p[1] as usize)).collect();
        let latent = LatentGraph::from_topology(StalkGraph::new(n, edges, d)?, features)?;
        let store = ParamStore::from_values(tensors)?;
        let mut layers = 0;
        while store.contains(&format!("diffuse.{layers}.w")) {
            layers += 1;
        }
        let config = ModelConfig {
            latent_nodes: n,
            latent_dim: d,
            tau: meta.data()[0],
            diffusion_layers: layers,
            eps: meta.data()[1],
            rho_noise: meta.data()[2],
        };
        config.validate()?;
        let d_mri = store.get("enc.mri.w")?.rows();
        let d_hist = store.get("enc.histo.w")?.rows();
        let model = Self {
            config,
            d_mri,
            d_hist,
            latent: Arc::new(latent),
        };
        // binding checks every expected parameter is present with a usable shape
        model.bind(&Tape::inference(), &store)?;
        Ok((model, store))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub patient_id: String,
    pub logits: [f64; NUM_LABELS],
    pub embedding: Vec<f64>,
}

impl Prediction {
    /// `sigmoid(logit) > 0.5`, i.e. `logit > 0`.
    pub fn labels(&self) -> [bool; NUM_LABELS] {
        self.logits.map(|z| z > 0.0)
    }
}

/// A modality's region embeddings, assignment and latent projection.
#[derive(Clone, Copy, Debug)]
pub struct Projection<'t> {
    pub regions: Var<'t>,
    pub assignment: Var<'t>,
    pub latent: Var<'t>,
}

/// Everything downstream of fusion for one patient.
#[derive(Clone, Copy, Debug)]
pub struct Fused<'t> {
    pub nodes: Var<'t>,
    pub edges: Var<'t>,
    pub embedding: Var<'t>,
    pub logits: Var<'t>,
    pub consistency: Var<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct PatientOutput<'t> {
    pub mri: Projection<'t>,
    pub histo: Option<Projection<'t>>,
    pub reconstruction: Option<Var<'t>>,
    pub recon_loss: Option<Var<'t>>,
    pub embedding: Var<'t>,
    pub logits: Var<'t>,
    pub nodes: Var<'t>,
    pub consistency: Var<'t>,
}

/// The model's parameters bound to one tape. `Δ` is computed once here and
/// shared by every patient evaluated on the tape.
pub struct Bound<'t> {
    latent: Arc<LatentGraph>,
    enc_mri: Var<'t>,
    enc_histo: Var<'t>,
    assign_mri: Mlp<'t>,
    assign_histo: Mlp<'t>,
    latent_h: Var<'t>,
    rho: Var<'t>,
    delta: SheafOperator<'t>,
    diffuse: Vec<Var<'t>>,
    recon: Mlp<'t>,
    head: Linear<'t>,
    edge_diff: Var<'t>,
}

impl<'t> Bound<'t> {
    pub fn latent(&self) -> &LatentGraph {
        &self.latent
    }

    pub fn delta(&self) -> &SheafOperator<'t> {
        &self.delta
    }

    pub fn rho(&self) -> Var<'t> {
        self.rho
    }

    pub fn latent_features(&self) -> Var<'t> {
        self.latent_h
    }

    pub fn project(&self, modality: Modality, rg: &RegionGraph) -> Result<Projection<'t>> {
        let (w, mlp) = match modality {
            Modality::Mri => (self.enc_mri, &self.assign_mri),
            Modality::Histo => (self.enc_histo, &self.assign_histo),
        };
        let regions = region_gnn_layer(rg, w)?;
        let assignment = soft_assign(regions, mlp)?;
        Ok(Projection {
            regions,
            assignment,
            latent: project_to_latent(assignment, regions)?,
        })
    }

    /// Reconstructs the histopathology projection from the MRI projection alone.
    pub fn reconstruct(&self, mri_latent: Var<'t>) -> Result<Var<'t>> {
        let observed = fuse_modalities(self.latent_h, Some(mri_latent), None)?;
        let diffused = sheaf_diffuse(observed, &self.latent, &self.delta, self.rho, &self.diffuse)?;
        let stalks = aggregate_edge_stalks(&self.latent, self.rho, diffused.nodes)?;
        reconstruct_missing(stalks, &self.recon)
    }

    /// Fusion, diffusion, readout and classification.
    pub fn fuse_and_classify(&self, mri_latent: Var<'t>, histo_latent: Option<Var<'t>>) -> Result<Fused<'t>> {
        let fused = fuse_modalities(self.latent_h, Some(mri_latent), histo_latent)?;
        let diffused = sheaf_diffuse(fused, &self.latent, &self.delta, self.rho, &self.diffuse)?;
        let embedding = readout(diffused.nodes, Some(diffused.edges))?;
        Ok(Fused {
            nodes: diffused.nodes,
            edges: diffused.edges,
            embedding,
            logits: self.head.forward(embedding)?,
            consistency: self.consistency(diffused.nodes)?,
        })
    }

    /// `(1/|E|) Σ_e ‖ρ_{e,u} h_u − ρ_{e,v} h_v‖²`.
    pub fn consistency(&self, nodes: Var<'t>) -> Result<Var<'t>> {
        let restricted = restrict(self.latent.graph(), self.rho, nodes)?;
        let diff = self.edge_diff.matmul(restricted)?;
        diff.mul(diff)?.sum()?.scale(1.0 / self.latent.edges().len() as f64)
    }

    pub fn forward(&self, mri: &RegionGraph, histo: HistoInput<'_>) -> Result<PatientOutput<'t>> {
        let mri_p = self.project(Modality::Mri, mri)?;
        let (histo_p, contribution, reconstruction, loss) = match histo {
            HistoInput::Observed(rg) => {
                let p = self.project(Modality::Histo, rg)?;
                (Some(p), Some(p.latent), None, None)
            }
            HistoInput::Missing { imputation, target } => {
                let reconstruction = match imputation {
                    Imputation::Reconstruct => Some(self.reconstruct(mri_p.latent)?),
                    Imputation::Zeros => None,
                };
                let (histo_p, loss) = match (target, reconstruction) {
                    (Some(rg), Some(x)) => {
                        let p = self.project(Modality::Histo, rg)?;
                        (Some(p), Some(recon_loss(x, p.latent)?))
                    }
                    _ => (None, None),
                };
                (histo_p, reconstruction, reconstruction, loss)
            }
        };
        let fused = self.fuse_and_classify(mri_p.latent, contribution)?;
        Ok(PatientOutput {
            mri: mri_p,
            histo: histo_p,
            reconstruction,
            recon_loss: loss,
            embedding: fused.embedding,
            logits: fused.logits,
            nodes: fused.nodes,
            consistency: fused.consistency,
        })
    }
}
