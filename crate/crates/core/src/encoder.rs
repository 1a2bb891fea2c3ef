//! Per-modality encoder: node graph, region hypergraph, region graph, GCN.

use crate::autodiff::Var;
use crate::data::ModalityGraph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Nodes grouped into one hyperedge per distinct region label.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypergraph {
    nodes: usize,
    labels: Vec<String>,
    members: Vec<Vec<usize>>,
    membership: Vec<usize>,
}

impl Hypergraph {
    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn num_hyperedges(&self) -> usize {
        self.labels.len()
    }

    /// Hyperedge labels, sorted.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn members(&self, j: usize) -> &[usize] {
        &self.members[j]
    }

    /// Index of the hyperedge containing `node`.
    pub fn hyperedge_of(&self, node: usize) -> usize {
        self.membership[node]
    }

    /// `H ∈ {0,1}^{nodes × hyperedges}`.
    pub fn incidence(&self) -> Tensor {
        let m = self.num_hyperedges();
        let mut h = Tensor::zeros(&[self.nodes, m]);
        for (v, &j) in self.membership.iter().enumerate() {
            h.data_mut()[v * m + j] = 1.0;
        }
        h
    }
}

pub fn build_hypergraph(g: &ModalityGraph) -> Result<Hypergraph> {
    if g.nodes.is_empty() {
        return Err(Error::contract("cannot build a hypergraph from an empty graph"));
    }
    let labels: Vec<String> = g.region_labels().into_iter().map(str::to_string).collect();
    let mut members = vec![Vec::new(); labels.len()];
    let mut membership = Vec::with_capacity(g.nodes.len());
    for (v, node) in g.nodes.iter().enumerate() {
        let j = labels
            .binary_search_by(|l| l.as_str().cmp(&node.region))
            .expect("label collected above");
        members[j].push(v);
        membership.push(j);
    }
    Ok(Hypergraph {
        nodes: g.nodes.len(),
        labels,
        members,
        membership,
    })
}

/// Row `j` is the mean of the features of hyperedge `j`'s members.
pub fn aggregate_hyperedges(h: &Hypergraph, features: &Tensor) -> Result<Tensor> {
    if features.shape().len() != 2 || features.rows() != h.nodes {
        return Err(Error::contract(format!(
            "features {:?} do not match hypergraph with {} nodes",
            features.shape(),
            h.nodes
        )));
    }
    let d = features.cols();
    let mut out = Tensor::zeros(&[h.num_hyperedges(), d]);
    for (j, members) in h.members.iter().enumerate() {
        let inv = 1.0 / members.len() as f64;
        let row = out.row_mut(j);
        for &v in members {
            for (o, x) in row.iter_mut().zip(features.row(v)) {
                *o += x;
            }
        }
        row.iter_mut().for_each(|o| *o *= inv);
    }
    Ok(out)
}

/// One node per region; regions are adjacent when some original edge crosses
/// between them.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionGraph {
    pub labels: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    pub features: Tensor,
}

impl RegionGraph {
    pub fn regions(&self) -> usize {
        self.labels.len()
    }

    /// `D̃^{-1/2} (A + I) D̃^{-1/2}` as a dense `[K, K]` matrix.
    pub fn normalized_adjacency(&self) -> Tensor {
        let k = self.regions();
        let mut a = Tensor::eye(k);
        for &(u, v) in &self.edges {
            a.data_mut()[u * k + v] = 1.0;
            a.data_mut()[v * k + u] = 1.0;
        }
        let scale: Vec<f64> = (0..k).map(|i| a.row(i).iter().sum::<f64>().powf(-0.5)).collect();
        for i in 0..k {
            for j in 0..k {
                a.data_mut()[i * k + j] *= scale[i] * scale[j];
            }
        }
        a
    }
}

pub fn build_region_graph(h: &Hypergraph, g: &ModalityGraph) -> Result<RegionGraph> {
    if h.nodes != g.nodes.len() {
        return Err(Error::contract("hypergraph was not built from this graph"));
    }
    let mut edges: Vec<(usize, usize)> = g
        .edges
        .iter()
        .filter_map(|&(a, b)| {
            let (ra, rb) = (h.membership[a], h.membership[b]);
            (ra != rb).then(|| (ra.min(rb), ra.max(rb)))
        })
        .collect();
    edges.sort_unstable();
    edges.dedup();
    let rows: Vec<Vec<f64>> = g.nodes.iter().map(|n| n.features.clone()).collect();
    let features = aggregate_hyperedges(h, &Tensor::from_rows(&rows)?)?;
    Ok(RegionGraph {
        labels: h.labels.clone(),
        edges,
        features,
    })
}

/// Hypergraph and region graph in one step.
pub fn encode_regions(g: &ModalityGraph) -> Result<RegionGraph> {
    build_region_graph(&build_hypergraph(g)?, g)
}

/// `ReLU(Â X W)`: the region embeddings after one GCN layer, `[K, d]`.
pub fn region_gnn_layer<'t>(rg: &RegionGraph, w: Var<'t>) -> Result<Var<'t>> {
    let d_in = rg.features.cols();
    let ws = w.shape();
    if ws.len() != 2 || ws[0] != d_in {
        return Err(Error::contract(format!(
            "encoder weight {ws:?} does not accept {d_in}-dimensional region features"
        )));
    }
    let propagated = rg.normalized_adjacency().matmul(&rg.features)?;
    w.tape().constant(propagated)?.matmul(w)?.relu()
}
