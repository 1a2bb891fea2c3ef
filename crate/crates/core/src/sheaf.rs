//! Cellular sheaves on graphs with equal node and edge stalk dimension.
//!
//! Restriction maps are stored per *incidence*: incidence `2e` is edge `e`
//! seen from its lower endpoint `u`, incidence `2e + 1` from its upper
//! endpoint `v`. Each map is a dense row-major `d×d` matrix acting on column
//! vectors, and node features are rows of an `n×d` matrix.
//!
//! The sheaf Laplacian has diagonal blocks `L_vv = Σ_e F_{v⊴e}ᵀ F_{v⊴e}` and
//! off-diagonal blocks `L_vu = −F_{v⊴e}ᵀ F_{u⊴e}`. Its normalization
//! `Δ = D^{-1/2} L D^{-1/2}` uses the block diagonal `D` of `L`, inverted via a
//! per-block symmetric eigendecomposition with eigenvalues clamped at `eps`.

use std::collections::HashSet;
use std::rc::Rc;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autodiff::{CustomOp, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Default clamp for degree-block eigenvalues before the inverse square root.
pub const DEFAULT_EPS: f64 = 1e-8;

/// Graph skeleton of a sheaf: `n` nodes, undirected edges `(u, v)` with `u < v`,
/// and the common stalk dimension `d`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StalkGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    d: usize,
}

impl StalkGraph {
    pub fn new(n: usize, edges: Vec<(usize, usize)>, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::contract("stalk dimension must be at least 1"));
        }
        let mut seen = HashSet::new();
        for &(u, v) in &edges {
            if u >= v {
                return Err(Error::contract(format!(
                    "edge ({u}, {v}) must satisfy u < v (self-loops are not allowed)"
                )));
            }
            if v >= n {
                return Err(Error::contract(format!("edge ({u}, {v}) out of range for {n} nodes")));
            }
            if !seen.insert((u, v)) {
                return Err(Error::contract(format!("duplicate edge ({u}, {v})")));
            }
        }
        Ok(Self { n, edges, d })
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn stalk_dim(&self) -> usize {
        self.d
    }

    pub fn incidences(&self) -> usize {
        2 * self.edges.len()
    }

    /// Node at incidence `k`.
    pub fn incidence_node(&self, k: usize) -> usize {
        let (u, v) = self.edges[k / 2];
        if k % 2 == 0 {
            u
        } else {
            v
        }
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|&&(u, v)| u == node || v == node).count()
    }

    /// Incidence index of `node` on edge `e`, if incident.
    pub fn incidence_of(&self, e: usize, node: usize) -> Option<usize> {
        let (u, v) = *self.edges.get(e)?;
        if node == u {
            Some(2 * e)
        } else if node == v {
            Some(2 * e + 1)
        } else {
            None
        }
    }

    /// Block layout of the Laplacian: all diagonal keys plus both directions
    /// of every edge, sorted.
    pub fn laplacian_pattern(&self) -> BlockPattern {
        let mut keys: Vec<(usize, usize)> = (0..self.n).map(|v| (v, v)).collect();
        for &(u, v) in &self.edges {
            keys.push((u, v));
            keys.push((v, u));
        }
        keys.sort_unstable();
        BlockPattern {
            n: self.n,
            d: self.d,
            keys,
        }
    }
}

/// Sorted block keys of a block-sparse `nd×nd` matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockPattern {
    n: usize,
    d: usize,
    keys: Vec<(usize, usize)>,
}

impl BlockPattern {
    pub fn keys(&self) -> &[(usize, usize)] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn position(&self, row: usize, col: usize) -> Option<usize> {
        self.keys.binary_search(&(row, col)).ok()
    }
}

#[derive(Clone, Debug)]
pub struct CellularSheaf {
    graph: Arc<StalkGraph>,
    maps: Vec<f64>,
}

impl CellularSheaf {
    /// `maps` holds `2·|E|` row-major `d×d` matrices in incidence order.
    pub fn new(graph: Arc<StalkGraph>, maps: Vec<f64>) -> Result<Self> {
        let expected = graph.incidences() * graph.d * graph.d;
        if maps.len() != expected {
            return Err(Error::contract(format!(
                "expected {expected} restriction-map entries, got {}",
                maps.len()
            )));
        }
        Ok(Self { graph, maps })
    }

    /// Every restriction map equal to the identity.
    pub fn identity(graph: Arc<StalkGraph>) -> Self {
        let d = graph.d;
        let mut maps = vec![0.0; graph.incidences() * d * d];
        for block in maps.chunks_mut(d * d) {
            for i in 0..d {
                block[i * d + i] = 1.0;
            }
        }
        Self { graph, maps }
    }

    pub fn graph(&self) -> &StalkGraph {
        &self.graph
    }

    pub fn graph_arc(&self) -> &Arc<StalkGraph> {
        &self.graph
    }

    pub fn maps(&self) -> &[f64] {
        &self.maps
    }

    /// Map of incidence `k` (`F_{node⊴edge}`).
    pub fn map(&self, k: usize) -> &[f64] {
        let dd = self.graph.d * self.graph.d;
        &self.maps[k * dd..(k + 1) * dd]
    }
}

/// Block-sparse `nd×nd` matrix; blocks are row-major `d×d`.
#[derive(Clone, Debug)]
pub struct BlockMatrix {
    pattern: Arc<BlockPattern>,
    data: Vec<f64>,
}

impl BlockMatrix {
    pub fn new(pattern: Arc<BlockPattern>, data: Vec<f64>) -> Result<Self> {
        if data.len() != pattern.len() * pattern.d * pattern.d {
            return Err(Error::contract("block data length does not match pattern"));
        }
        Ok(Self { pattern, data })
    }

    pub fn pattern(&self) -> &Arc<BlockPattern> {
        &self.pattern
    }

    pub fn nodes(&self) -> usize {
        self.pattern.n
    }

    pub fn stalk_dim(&self) -> usize {
        self.pattern.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn block(&self, row: usize, col: usize) -> Option<&[f64]> {
        let dd = self.pattern.d * self.pattern.d;
        self.pattern
            .position(row, col)
            .map(|p| &self.data[p * dd..(p + 1) * dd])
    }

    fn block_at(&self, p: usize) -> &[f64] {
        let dd = self.pattern.d * self.pattern.d;
        &self.data[p * dd..(p + 1) * dd]
    }

    /// Largest `|B_vu − B_uvᵀ|` over all stored blocks.
    pub fn asymmetry(&self) -> f64 {
        let d = self.pattern.d;
        let mut worst = 0.0f64;
        for (p, &(r, c)) in self.pattern.keys.iter().enumerate() {
            let a = self.block_at(p);
            let Some(b) = self.block(c, r) else {
                return f64::INFINITY;
            };
            for i in 0..d {
                for j in 0..d {
                    worst = worst.max((a[i * d + j] - b[j * d + i]).abs());
                }
            }
        }
        worst
    }

    /// `y = B x` for a stacked vector `x = vec(X)` of length `n·d`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.pattern.d;
        let mut y = vec![0.0; self.pattern.n * d];
        block_matvec_into(&self.pattern, &self.data, x, &mut y);
        y
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.apply(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let (n, d) = (self.pattern.n, self.pattern.d);
        let mut m = DMatrix::zeros(n * d, n * d);
        for (p, &(r, c)) in self.pattern.keys.iter().enumerate() {
            let b = self.block_at(p);
            for i in 0..d {
                for j in 0..d {
                    m[(r * d + i, c * d + j)] = b[i * d + j];
                }
            }
        }
        m
    }

    /// Eigenvalues of the dense symmetric matrix, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.to_dense()).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }
}

fn block_matvec_into(pattern: &BlockPattern, data: &[f64], x: &[f64], y: &mut [f64]) {
    let d = pattern.d;
    let dd = d * d;
    for (p, &(r, c)) in pattern.keys.iter().enumerate() {
        let b = &data[p * dd..(p + 1) * dd];
        let xc = &x[c * d..(c + 1) * d];
        let yr = &mut y[r * d..(r + 1) * d];
        for i in 0..d {
            let row = &b[i * d..(i + 1) * d];
            yr[i] += row.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

pub fn assemble_sheaf_laplacian(sheaf: &CellularSheaf) -> BlockMatrix {
    let g = &sheaf.graph;
    let d = g.d;
    let dd = d * d;
    let pattern = Arc::new(g.laplacian_pattern());
    let mut data = vec![0.0; pattern.len() * dd];
    for (e, &(u, v)) in g.edges.iter().enumerate() {
        let (fu, fv) = (sheaf.map(2 * e), sheaf.map(2 * e + 1));
        for (node, f) in [(u, fu), (v, fv)] {
            let p = pattern.position(node, node).expect("diagonal key");
            for (acc, x) in data[p * dd..(p + 1) * dd].iter_mut().zip(gemm_tn(f, f, d, d, d)) {
                *acc += x;
            }
        }
        let puv = pattern.position(u, v).expect("edge key");
        let luv = gemm_tn(fu, fv, d, d, d);
        for (i, x) in luv.iter().enumerate() {
            data[puv * dd + i] = -x;
        }
        // L_vu = L_uvᵀ exactly.
        let pvu = pattern.position(v, u).expect("edge key");
        for i in 0..d {
            for j in 0..d {
                data[pvu * dd + i * d + j] = -luv[j * d + i];
            }
        }
    }
    BlockMatrix { pattern, data }
}

/// Per-node `D_v^{-1/2}` together with the eigendecomposition it came from.
#[derive(Clone, Debug)]
struct InvSqrtFactor {
    /// Eigenvectors as columns, row-major `d×d`.
    q: Vec<f64>,
    lambda: Vec<f64>,
    inv_sqrt: Vec<f64>,
}

fn inv_sqrt_factor(block: &[f64], d: usize, eps: f64) -> InvSqrtFactor {
    let m = DMatrix::from_row_slice(d, d, block);
    let eig = SymmetricEigen::new(m);
    let mut q = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            q[i * d + j] = eig.eigenvectors[(i, j)];
        }
    }
    let lambda: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let f: Vec<f64> = lambda.iter().map(|&l| l.max(eps).powf(-0.5)).collect();
    // Q diag(f) Qᵀ
    let mut qf = q.clone();
    for i in 0..d {
        for j in 0..d {
            qf[i * d + j] *= f[j];
        }
    }
    let inv_sqrt = gemm_nt(&qf, &q, d, d, d);
    InvSqrtFactor { q, lambda, inv_sqrt }
}

fn normalize_with_factors(l: &BlockMatrix, eps: f64) -> Result<(BlockMatrix, Vec<InvSqrtFactor>)> {
    if !(eps > 0.0) {
        return Err(Error::contract("normalization eps must be positive"));
    }
    let pattern = &l.pattern;
    let d = pattern.d;
    let dd = d * d;
    let factors: Vec<InvSqrtFactor> = (0..pattern.n)
        .map(|v| inv_sqrt_factor(l.block(v, v).expect("diagonal key"), d, eps))
        .collect();
    let mut data = vec![0.0; l.data.len()];
    for (p, &(r, c)) in pattern.keys.iter().enumerate() {
        if r > c {
            continue;
        }
        let left = gemm(&factors[r].inv_sqrt, l.block_at(p), d, d, d);
        let block = gemm(&left, &factors[c].inv_sqrt, d, d, d);
        if r == c {
            data[p * dd..(p + 1) * dd].copy_from_slice(&block);
        } else {
            data[p * dd..(p + 1) * dd].copy_from_slice(&block);
            let q = pattern.position(c, r).expect("symmetric pattern");
            for i in 0..d {
                for j in 0..d {
                    data[q * dd + i * d + j] = block[j * d + i];
                }
            }
        }
    }
    Ok((
        BlockMatrix {
            pattern: pattern.clone(),
            data,
        },
        factors,
    ))
}

/// `Δ = D^{-1/2} L D^{-1/2}` with `D` the block diagonal of `L`.
pub fn normalize_laplacian(l: &BlockMatrix, eps: f64) -> Result<BlockMatrix> {
    Ok(normalize_with_factors(l, eps)?.0)
}

/// Moves `x` from the stalk of `from` to the stalk of `to` across edge `e`:
/// `F_{to⊴e}ᵀ F_{from⊴e} x`.
pub fn transport(x: &[f64], e: usize, from: usize, to: usize, sheaf: &CellularSheaf) -> Result<Vec<f64>> {
    let g = &sheaf.graph;
    let d = g.d;
    if x.len() != d {
        return Err(Error::contract(format!("vector length {} != stalk dim {d}", x.len())));
    }
    let kf = g
        .incidence_of(e, from)
        .ok_or_else(|| Error::contract(format!("node {from} is not incident to edge {e}")))?;
    let kt = g
        .incidence_of(e, to)
        .ok_or_else(|| Error::contract(format!("node {to} is not incident to edge {e}")))?;
    let on_edge = gemm(sheaf.map(kf), x, d, d, 1);
    Ok(gemm_tn(sheaf.map(kt), &on_edge, d, d, 1))
}

/// `Σ_e ‖F_{u⊴e} x_u − F_{v⊴e} x_v‖²` for node features as rows of `x`.
pub fn dirichlet_energy(sheaf: &CellularSheaf, x: &Tensor) -> Result<f64> {
    let g = &sheaf.graph;
    let d = g.d;
    if x.shape() != [g.n, d] {
        return Err(Error::contract(format!(
            "features {:?} do not match {} nodes with stalk dim {d}",
            x.shape(),
            g.n
        )));
    }
    let mut total = 0.0;
    for (e, &(u, v)) in g.edges.iter().enumerate() {
        let a = gemm(sheaf.map(2 * e), x.row(u), d, d, 1);
        let b = gemm(sheaf.map(2 * e + 1), x.row(v), d, d, 1);
        total += a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => x.relu(),
        }
    }
}

/// A normalized sheaf Laplacian living on a tape, differentiable with
/// respect to the restriction maps it was built from.
#[derive(Clone, Debug)]
pub struct SheafOperator<'t> {
    blocks: Var<'t>,
    pattern: Arc<BlockPattern>,
}

impl<'t> SheafOperator<'t> {
    /// Builds `Δ` from a `[2|E|, d, d]` maps variable.
    pub fn normalized(graph: &Arc<StalkGraph>, maps: Var<'t>, eps: f64) -> Result<Self> {
        let d = graph.d;
        if maps.shape() != [graph.incidences(), d, d] {
            return Err(Error::contract(format!(
                "maps shape {:?} does not match graph ({} incidences, d = {d})",
                maps.shape(),
                graph.incidences()
            )));
        }
        let sheaf = CellularSheaf::new(graph.clone(), maps.value().data().to_vec())?;
        let lap = assemble_sheaf_laplacian(&sheaf);
        let (delta, factors) = normalize_with_factors(&lap, eps)?;
        let pattern = delta.pattern.clone();
        let out = Tensor::new(vec![pattern.len(), d, d], delta.data)?;
        let op = NormalizedLaplacianOp {
            graph: graph.clone(),
            pattern: pattern.clone(),
            laplacian: lap.data,
            factors,
            eps,
        };
        let blocks = maps.tape().custom(&[maps], out, Rc::new(op))?;
        Ok(Self { blocks, pattern })
    }

    pub fn blocks(&self) -> Var<'t> {
        self.blocks
    }

    pub fn to_block_matrix(&self) -> BlockMatrix {
        BlockMatrix {
            pattern: self.pattern.clone(),
            data: self.blocks.value().data().to_vec(),
        }
    }

    /// `Δ X`, treating each row of `x` as a stalk vector.
    pub fn apply(&self, x: Var<'t>) -> Result<Var<'t>> {
        let (n, d) = (self.pattern.n, self.pattern.d);
        if x.shape() != [n, d] {
            return Err(Error::contract(format!(
                "features {:?} do not match sheaf ({n} nodes, d = {d})",
                x.shape()
            )));
        }
        let mut y = vec![0.0; n * d];
        block_matvec_into(&self.pattern, self.blocks.value().data(), x.value().data(), &mut y);
        let out = Tensor::new(vec![n, d], y)?;
        let op = BlockMatVecOp {
            pattern: self.pattern.clone(),
        };
        x.tape().custom(&[self.blocks, x], out, Rc::new(op))
    }
}

/// `σ((I − Δ) X W)`.
pub fn sheaf_gcn_layer<'t>(x: Var<'t>, delta: &SheafOperator<'t>, w: Var<'t>, act: Activation) -> Result<Var<'t>> {
    let diffused = x.sub(delta.apply(x)?)?;
    act.apply(diffused.matmul(w)?)
}

/// Row `k` is `F_k x_{node(k)}` for every incidence `k`: `[2|E|, d]`.
pub fn restrict<'t>(graph: &Arc<StalkGraph>, maps: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
    let (n, d) = (graph.n, graph.d);
    if x.shape() != [n, d] || maps.shape() != [graph.incidences(), d, d] {
        return Err(Error::contract(format!(
            "restrict: features {:?} / maps {:?} do not match graph",
            x.shape(),
            maps.shape()
        )));
    }
    let out = {
        let m = maps.value();
        let xv = x.value();
        let mut data = Vec::with_capacity(graph.incidences() * d);
        for k in 0..graph.incidences() {
            data.extend(gemm(&m.data()[k * d * d..(k + 1) * d * d], xv.row(graph.incidence_node(k)), d, d, 1));
        }
        Tensor::new(vec![graph.incidences(), d], data)?
    };
    let op = RestrictOp { graph: graph.clone() };
    x.tape().custom(&[maps, x], out, Rc::new(op))
}

struct RestrictOp {
    graph: Arc<StalkGraph>,
}

impl CustomOp for RestrictOp {
    fn name(&self) -> &str {
        "restrict"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let (maps, x) = (inputs[0], inputs[1]);
        let d = self.graph.d;
        let dd = d * d;
        let mut gm = Tensor::zeros(maps.shape());
        let mut gx = Tensor::zeros(x.shape());
        for k in 0..self.graph.incidences() {
            let node = self.graph.incidence_node(k);
            let g = grad.row(k);
            let xv = x.row(node);
            let gmk = &mut gm.data_mut()[k * dd..(k + 1) * dd];
            for i in 0..d {
                for j in 0..d {
                    gmk[i * d + j] = g[i] * xv[j];
                }
            }
            let back = gemm_tn(&maps.data()[k * dd..(k + 1) * dd], g, d, d, 1);
            for (acc, b) in gx.row_mut(node).iter_mut().zip(back) {
                *acc += b;
            }
        }
        Ok(vec![gm, gx])
    }
}

struct BlockMatVecOp {
    pattern: Arc<BlockPattern>,
}

impl CustomOp for BlockMatVecOp {
    fn name(&self) -> &str {
        "block_matvec"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let (blocks, x) = (inputs[0], inputs[1]);
        let d = self.pattern.d;
        let dd = d * d;
        let mut gb = Tensor::zeros(blocks.shape());
        let mut gx = Tensor::zeros(x.shape());
        for (p, &(r, c)) in self.pattern.keys.iter().enumerate() {
            let g = grad.row(r);
            let xc = x.row(c);
            let gbp = &mut gb.data_mut()[p * dd..(p + 1) * dd];
            for i in 0..d {
                for j in 0..d {
                    gbp[i * d + j] = g[i] * xc[j];
                }
            }
            let back = gemm_tn(&blocks.data()[p * dd..(p + 1) * dd], g, d, d, 1);
            for (acc, b) in gx.row_mut(c).iter_mut().zip(back) {
                *acc += b;
            }
        }
        Ok(vec![gb, gx])
    }
}

struct NormalizedLaplacianOp {
    graph: Arc<StalkGraph>,
    pattern: Arc<BlockPattern>,
    laplacian: Vec<f64>,
    factors: Vec<InvSqrtFactor>,
    eps: f64,
}

impl NormalizedLaplacianOp {
    /// Divided differences of `f(λ) = max(λ, eps)^{-1/2}`.
    fn divided_difference(&self, a: f64, b: f64) -> f64 {
        let eps = self.eps;
        let fprime = |l: f64| if l > eps { -0.5 * l.powf(-1.5) } else { 0.0 };
        if a > eps && b > eps {
            // exact for λ^{-1/2}, stable when a ≈ b
            let (sa, sb) = (a.sqrt(), b.sqrt());
            -1.0 / (sa * sb * (sa + sb))
        } else if a <= eps && b <= eps {
            0.0
        } else if (a - b).abs() > 1e-12 * a.abs().max(b.abs()) {
            (a.max(eps).powf(-0.5) - b.max(eps).powf(-0.5)) / (a - b)
        } else {
            fprime(0.5 * (a + b))
        }
    }
}

impl CustomOp for NormalizedLaplacianOp {
    fn name(&self) -> &str {
        "normalized_sheaf_laplacian"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let maps = inputs[0].data();
        let d = self.graph.d;
        let dd = d * d;
        let n = self.graph.n;
        let lap = &self.laplacian;
        let s = |v: usize| self.factors[v].inv_sqrt.as_slice();

        // Δ_rc = S_r L_rc S_c
        let mut grad_l = vec![0.0; lap.len()];
        let mut grad_s = vec![vec![0.0; dd]; n];
        for (p, &(r, c)) in self.pattern.keys.iter().enumerate() {
            let g = &grad.data()[p * dd..(p + 1) * dd];
            let l = &lap[p * dd..(p + 1) * dd];
            let gl = gemm(&gemm(s(r), g, d, d, d), s(c), d, d, d);
            grad_l[p * dd..(p + 1) * dd].copy_from_slice(&gl);
            // ∂/∂S_r: G (L S_c)ᵀ ; ∂/∂S_c: (S_r L)ᵀ G
            let ls = gemm(l, s(c), d, d, d);
            for (acc, x) in grad_s[r].iter_mut().zip(gemm_nt(g, &ls, d, d, d)) {
                *acc += x;
            }
            let sl = gemm(s(r), l, d, d, d);
            for (acc, x) in grad_s[c].iter_mut().zip(gemm_tn(&sl, g, d, d, d)) {
                *acc += x;
            }
        }

        // S_v = f(D_v): Daleckii–Krein adjoint Q (K ∘ Qᵀ Ḡ Q) Qᵀ
        for v in 0..n {
            let fac = &self.factors[v];
            let inner = gemm(&gemm_tn(&fac.q, &grad_s[v], d, d, d), &fac.q, d, d, d);
            let mut k = inner;
            for i in 0..d {
                for j in 0..d {
                    k[i * d + j] *= self.divided_difference(fac.lambda[i], fac.lambda[j]);
                }
            }
            let gd = gemm_nt(&gemm(&fac.q, &k, d, d, d), &fac.q, d, d, d);
            let p = self.pattern.position(v, v).expect("diagonal key");
            for (acc, x) in grad_l[p * dd..(p + 1) * dd].iter_mut().zip(gd) {
                *acc += x;
            }
        }

        // L blocks -> restriction maps
        let mut gm = vec![0.0; maps.len()];
        let map = |k: usize| &maps[k * dd..(k + 1) * dd];
        for (e, &(u, v)) in self.graph.edges.iter().enumerate() {
            for (node, k) in [(u, 2 * e), (v, 2 * e + 1)] {
                let p = self.pattern.position(node, node).expect("diagonal key");
                let g = &grad_l[p * dd..(p + 1) * dd];
                let mut sym = vec![0.0; dd];
                for i in 0..d {
                    for j in 0..d {
                        sym[i * d + j] = g[i * d + j] + g[j * d + i];
                    }
                }
                for (acc, x) in gm[k * dd..(k + 1) * dd].iter_mut().zip(gemm(map(k), &sym, d, d, d)) {
                    *acc += x;
                }
            }
            // L_ab = −F_aᵀ F_b  ⇒  ∂F_a = −F_b Γᵀ, ∂F_b = −F_a Γ
            for (a, b, ka, kb) in [(u, v, 2 * e, 2 * e + 1), (v, u, 2 * e + 1, 2 * e)] {
                let p = self.pattern.position(a, b).expect("edge key");
                let g = &grad_l[p * dd..(p + 1) * dd];
                for (acc, x) in gm[ka * dd..(ka + 1) * dd].iter_mut().zip(gemm_nt(map(kb), g, d, d, d)) {
                    *acc -= x;
                }
                for (acc, x) in gm[kb * dd..(kb + 1) * dd].iter_mut().zip(gemm(map(ka), g, d, d, d)) {
                    *acc -= x;
                }
            }
        }
        Ok(vec![Tensor::new(inputs[0].shape().to_vec(), gm)?])
    }
}

/// Convenience for building a plain sheaf operator on a throwaway tape.
pub fn normalized_laplacian_of(sheaf: &CellularSheaf, eps: f64) -> Result<BlockMatrix> {
    normalize_laplacian(&assemble_sheaf_laplacian(sheaf), eps)
}
