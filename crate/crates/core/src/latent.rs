//! The shared latent graph: soft assignment, projection, fusion, sheaf
//! diffusion and readout.

use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::sheaf::{restrict, sheaf_gcn_layer, Activation, SheafOperator, StalkGraph};
use crate::tensor::Tensor;

/// Topology and initial features of the latent graph. The topology is fixed
/// at construction; the learnable node features and restriction maps live in
/// the parameter store.
#[derive(Clone, Debug)]
pub struct LatentGraph {
    graph: Arc<StalkGraph>,
    initial_features: Tensor,
    edge_mean: Tensor,
    edge_diff: Tensor,
    node_sum: Tensor,
}

impl LatentGraph {
    /// Wraps an existing topology; `initial_features` is `[n, d]`.
    pub fn from_topology(graph: StalkGraph, initial_features: Tensor) -> Result<Self> {
        let (n, d) = (graph.nodes(), graph.stalk_dim());
        if initial_features.shape() != [n, d] {
            return Err(Error::contract(format!(
                "latent features {:?} do not match {n} nodes of width {d}",
                initial_features.shape()
            )));
        }
        if let Some(v) = (0..n).find(|&v| graph.degree(v) == 0) {
            return Err(Error::contract(format!("latent node {v} is isolated")));
        }
        let e = graph.edges().len();
        let mut edge_mean = Tensor::zeros(&[e, 2 * e]);
        let mut edge_diff = Tensor::zeros(&[e, 2 * e]);
        let mut node_sum = Tensor::zeros(&[n, 2 * e]);
        for i in 0..e {
            edge_mean.row_mut(i)[2 * i..2 * i + 2].copy_from_slice(&[0.5, 0.5]);
            edge_diff.row_mut(i)[2 * i..2 * i + 2].copy_from_slice(&[1.0, -1.0]);
        }
        for k in 0..2 * e {
            node_sum.row_mut(graph.incidence_node(k))[k] = 1.0;
        }
        Ok(Self {
            graph: Arc::new(graph),
            initial_features,
            edge_mean,
            edge_diff,
            node_sum,
        })
    }

    pub fn graph(&self) -> &Arc<StalkGraph> {
        &self.graph
    }

    pub fn nodes(&self) -> usize {
        self.graph.nodes()
    }

    pub fn dim(&self) -> usize {
        self.graph.stalk_dim()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        self.graph.edges()
    }

    pub fn initial_features(&self) -> &Tensor {
        &self.initial_features
    }

    /// Mean of endpoint features per edge, from the initial node features.
    pub fn initial_edge_features(&self) -> Tensor {
        let d = self.dim();
        let data = self
            .edges()
            .iter()
            .flat_map(|&(u, v)| {
                let (a, b) = (self.initial_features.row(u), self.initial_features.row(v));
                (0..d).map(move |i| 0.5 * (a[i] + b[i]))
            })
            .collect();
        Tensor::new(vec![self.edges().len(), d], data).expect("edge list is nonempty")
    }

    /// Stable fingerprint of the node count, stalk width and edge list.
    pub fn topology_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        (self.nodes(), self.dim(), self.edges()).hash(&mut h);
        h.finish()
    }

    /// `[|E|, 2|E|]` with `½` on both incidences of each edge.
    pub fn edge_mean_matrix(&self) -> &Tensor {
        &self.edge_mean
    }

    /// `[|E|, 2|E|]` with `+1` on the first and `-1` on the second incidence.
    pub fn edge_diff_matrix(&self) -> &Tensor {
        &self.edge_diff
    }

    /// `[N, 2|E|]` summing each node's own incidences.
    pub fn node_sum_matrix(&self) -> &Tensor {
        &self.node_sum
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Samples node features `~ N(0, 1/d)` and connects `i, j` when their cosine
/// similarity is at least `tau`. A node left without neighbours is linked
/// to its most similar node.
pub fn init_latent_graph(n: usize, d: usize, tau: f64, rng: &mut impl Rng) -> Result<LatentGraph> {
    if n < 2 {
        return Err(Error::config(format!("latent graph needs at least 2 nodes, got {n}")));
    }
    if d == 0 {
        return Err(Error::config("latent width must be at least 1"));
    }
    if tau.is_nan() || tau < -1.0 {
        return Err(Error::config(format!("similarity threshold {tau} below -1")));
    }
    let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("positive std");
    let features = Tensor::new(vec![n, d], (0..n * d).map(|_| normal.sample(rng)).collect())?;
    let sim = |i: usize, j: usize| cosine(features.row(i), features.row(j));
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if sim(i, j) >= tau {
                edges.push((i, j));
            }
        }
    }
    let mut degree = vec![0usize; n];
    for &(u, v) in &edges {
        degree[u] += 1;
        degree[v] += 1;
    }
    for i in (0..n).filter(|&i| degree[i] == 0) {
        let best = (0..n)
            .filter(|&j| j != i)
            .max_by(|&a, &b| sim(i, a).total_cmp(&sim(i, b)).then(b.cmp(&a)))
            .expect("n >= 2");
        edges.push((i.min(best), i.max(best)));
    }
    edges.sort_unstable();
    edges.dedup();
    LatentGraph::from_topology(StalkGraph::new(n, edges, d)?, features)
}

/// `softmax(MLP(x))`, one row per modality region.
pub fn soft_assign<'t>(x: Var<'t>, mlp: &Mlp<'t>) -> Result<Var<'t>> {
    mlp.forward(x)?.softmax_rows()
}

/// `Pᵀ x`: `[N, d]`.
pub fn project_to_latent<'t>(p: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
    p.t()?.matmul(x)
}

/// `base + a + b`, with `None` contributing nothing.
pub fn fuse_modalities<'t>(base: Var<'t>, a: Option<Var<'t>>, b: Option<Var<'t>>) -> Result<Var<'t>> {
    let mut out = base;
    for part in [a, b].into_iter().flatten() {
        out = out.add(part)?;
    }
    Ok(out)
}

/// Node and edge features after diffusion.
#[derive(Clone, Copy, Debug)]
pub struct Diffused<'t> {
    pub nodes: Var<'t>,
    pub edges: Var<'t>,
}

/// `½(ρ_{e,u} h_u + ρ_{e,v} h_v)` for every edge.
pub fn edge_features<'t>(latent: &LatentGraph, maps: Var<'t>, nodes: Var<'t>) -> Result<Var<'t>> {
    let restricted = restrict(latent.graph(), maps, nodes)?;
    let mean = nodes.tape().constant(latent.edge_mean_matrix().clone())?;
    mean.matmul(restricted)
}

/// Applies one sheaf GCN layer per weight (ReLU on all but the last), then
/// derives edge features from the final node features.
pub fn sheaf_diffuse<'t>(
    x: Var<'t>,
    latent: &LatentGraph,
    delta: &SheafOperator<'t>,
    maps: Var<'t>,
    weights: &[Var<'t>],
) -> Result<Diffused<'t>> {
    if weights.is_empty() {
        return Err(Error::contract("diffusion needs at least one layer"));
    }
    let mut h = x;
    for (l, &w) in weights.iter().enumerate() {
        let act = if l + 1 < weights.len() {
            Activation::Relu
        } else {
            Activation::Identity
        };
        h = sheaf_gcn_layer(h, delta, w, act)?;
    }
    Ok(Diffused {
        nodes: h,
        edges: edge_features(latent, maps, h)?,
    })
}

/// `[Σ_v h_v, Σ_e e]` as a `[1, 2d]` row; without edges the second half is 0.
pub fn readout<'t>(nodes: Var<'t>, edges: Option<Var<'t>>) -> Result<Var<'t>> {
    let node_sum = nodes.sum_rows()?;
    let edge_sum = match edges {
        Some(e) => e.sum_rows()?,
        None => nodes.tape().constant(Tensor::zeros(&node_sum.shape()))?,
    };
    Var::concat_cols(&[node_sum, edge_sum])
}
