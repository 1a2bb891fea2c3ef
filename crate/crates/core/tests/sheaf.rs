//! Block-sparse sheaf operations checked against dense `nd×nd` oracles.

use std::sync::Arc;

use mmsn::gradcheck::{finite_diff_check, GradCheckConfig};
use mmsn::sheaf::{
    assemble_sheaf_laplacian, dirichlet_energy, normalize_laplacian, restrict, sheaf_gcn_layer, transport,
    Activation, CellularSheaf, SheafOperator, StalkGraph, DEFAULT_EPS,
};
use mmsn::{ParamStore, Tape, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(rng: &mut impl Rng, n: usize, edges: usize, d: usize) -> Arc<StalkGraph> {
    let mut all: Vec<(usize, usize)> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
    let mut picked = Vec::new();
    while picked.len() < edges.min(all.len()) {
        let i = rng.random_range(0..all.len());
        picked.push(all.swap_remove(i));
    }
    Arc::new(StalkGraph::new(n, picked, d).unwrap())
}

fn random_sheaf(rng: &mut impl Rng, g: Arc<StalkGraph>) -> CellularSheaf {
    let d = g.stalk_dim();
    let maps = (0..g.incidences() * d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    CellularSheaf::new(g, maps).unwrap()
}

fn mat(block: &[f64], d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, block)
}

/// Coboundary δ: (|E|·d) × (n·d), (δx)_e = F_u x_u − F_v x_v; L = δᵀδ.
fn dense_laplacian(sheaf: &CellularSheaf) -> DMatrix<f64> {
    let g = sheaf.graph();
    let (n, d) = (g.nodes(), g.stalk_dim());
    let mut delta = DMatrix::zeros(g.edges().len() * d, n * d);
    for (e, &(u, v)) in g.edges().iter().enumerate() {
        delta.view_mut((e * d, u * d), (d, d)).copy_from(&mat(sheaf.map(2 * e), d));
        delta.view_mut((e * d, v * d), (d, d)).copy_from(&(-mat(sheaf.map(2 * e + 1), d)));
    }
    delta.transpose() * delta
}

fn dense_normalized(l: &DMatrix<f64>, n: usize, d: usize, eps: f64) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(n * d, n * d);
    for v in 0..n {
        let block = l.view((v * d, v * d), (d, d)).clone_owned();
        let eig = SymmetricEigen::new(block);
        let f = eig.eigenvalues.map(|x| x.max(eps).powf(-0.5));
        let inv = &eig.eigenvectors * DMatrix::from_diagonal(&f) * eig.eigenvectors.transpose();
        s.view_mut((v * d, v * d), (d, d)).copy_from(&inv);
    }
    &s * l * &s
}

fn eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect()
}

#[test]
fn block_laplacian_matches_coboundary_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = random_graph(&mut rng, 4, 5, 2);
    let sheaf = random_sheaf(&mut rng, g);
    let l = assemble_sheaf_laplacian(&sheaf);
    let dense = dense_laplacian(&sheaf);
    assert!((l.to_dense() - &dense).abs().max() < 1e-12);
    assert_eq!(l.asymmetry(), 0.0);
    assert!(eigenvalues(&dense).iter().all(|&e| e >= -1e-10));
}

#[test]
fn unit_maps_reduce_to_kronecker_graph_laplacian() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for d in 1..=3 {
        let g = random_graph(&mut rng, 6, 8, d);
        let l = assemble_sheaf_laplacian(&CellularSheaf::identity(g.clone())).to_dense();
        let mut lg = DMatrix::<f64>::zeros(6, 6);
        for &(u, v) in g.edges() {
            lg[(u, u)] += 1.0;
            lg[(v, v)] += 1.0;
            lg[(u, v)] -= 1.0;
            lg[(v, u)] -= 1.0;
        }
        let kron = lg.kronecker(&DMatrix::identity(d, d));
        assert_eq!(l, kron);
    }
}

#[test]
fn normalized_matches_dense_and_spectrum_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let g = random_graph(&mut rng, 5, 6, 2);
        let sheaf = random_sheaf(&mut rng, g);
        let delta = normalize_laplacian(&assemble_sheaf_laplacian(&sheaf), DEFAULT_EPS).unwrap();
        let oracle = dense_normalized(&dense_laplacian(&sheaf), 5, 2, DEFAULT_EPS);
        assert!((delta.to_dense() - &oracle).abs().max() < 1e-9);
        for e in eigenvalues(&oracle) {
            assert!((-1e-8..=2.0 + 1e-8).contains(&e), "{e}");
        }
    }
}

#[test]
fn transport_is_two_step_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = random_graph(&mut rng, 3, 3, 3);
    let sheaf = random_sheaf(&mut rng, g.clone());
    let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    for (e, &(u, v)) in g.edges().iter().enumerate() {
        let got = transport(&x, e, u, v, &sheaf).unwrap();
        let want = mat(sheaf.map(2 * e + 1), 3).transpose() * mat(sheaf.map(2 * e), 3) * DVector::from_column_slice(&x);
        for i in 0..3 {
            assert!((got[i] - want[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn energy_equals_quadratic_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = random_graph(&mut rng, 6, 9, 3);
    let sheaf = random_sheaf(&mut rng, g);
    let x = Tensor::new(vec![6, 3], (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let e = dirichlet_energy(&sheaf, &x).unwrap();
    let v = DVector::from_column_slice(x.data());
    let q = (v.transpose() * dense_laplacian(&sheaf) * &v)[(0, 0)];
    assert!((e - q).abs() < 1e-9);
}

#[test]
fn global_section_has_zero_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = random_graph(&mut rng, 5, 7, 2);
    let maps: Vec<f64> = {
        let m: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        (0..g.incidences()).flat_map(|_| m.clone()).collect()
    };
    let sheaf = CellularSheaf::new(g, maps).unwrap();
    let row = [0.7, -1.3];
    let x = Tensor::new(vec![5, 2], row.iter().copied().cycle().take(10).collect()).unwrap();
    assert!(dirichlet_energy(&sheaf, &x).unwrap().abs() < 1e-12);
}

#[test]
fn gcn_layer_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d, dout) = (5, 3, 2);
    let g = random_graph(&mut rng, n, 6, d);
    let sheaf = random_sheaf(&mut rng, g.clone());
    let mut store = ParamStore::new();
    store.insert("maps", Tensor::new(vec![g.incidences(), d, d], sheaf.maps().to_vec()).unwrap()).unwrap();
    let x = Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let w = Tensor::new(vec![d, dout], (0..d * dout).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

    let tape = Tape::new();
    let op = SheafOperator::normalized(&g, tape.param(&store, "maps").unwrap(), DEFAULT_EPS).unwrap();
    let y = sheaf_gcn_layer(tape.constant(x.clone()).unwrap(), &op, tape.constant(w.clone()).unwrap(), Activation::Identity)
        .unwrap()
        .to_tensor();

    let delta = dense_normalized(&dense_laplacian(&sheaf), n, d, DEFAULT_EPS);
    let xv = DVector::from_column_slice(x.data());
    let diffused = &xv - delta * &xv;
    let xm = DMatrix::from_row_slice(n, d, diffused.as_slice());
    let oracle = xm * DMatrix::from_row_slice(d, dout, w.data());
    for i in 0..n {
        for j in 0..dout {
            assert!((y.get2(i, j) - oracle[(i, j)]).abs() < 1e-10);
        }
    }
}

#[test]
fn unit_maps_scalar_stalk_gcn_is_graph_propagation() {
    let g = Arc::new(StalkGraph::new(3, vec![(0, 1), (1, 2)], 1).unwrap());
    let mut store = ParamStore::new();
    store.insert("maps", Tensor::filled(&[4, 1, 1], 1.0)).unwrap();
    let tape = Tape::new();
    let op = SheafOperator::normalized(&g, tape.param(&store, "maps").unwrap(), DEFAULT_EPS).unwrap();
    let x = Tensor::new(vec![3, 1], vec![1.0, 2.0, 4.0]).unwrap();
    let y = sheaf_gcn_layer(tape.constant(x).unwrap(), &op, tape.constant(Tensor::eye(1)).unwrap(), Activation::Identity)
        .unwrap()
        .to_tensor();
    // (I − Δ) = D^{-1/2} A D^{-1/2}, degrees (1, 2, 1)
    let s = 1.0 / 2f64.sqrt();
    let want = [s * 2.0, s * 1.0 + s * 4.0, s * 2.0];
    for i in 0..3 {
        assert!((y.data()[i] - want[i]).abs() < 1e-12);
    }
}

fn check_maps_gradient(seed: u64, n: usize, m: usize, d: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_graph(&mut rng, n, m, d);
    let sheaf = random_sheaf(&mut rng, g.clone());
    let mut store = ParamStore::new();
    store.insert("maps", Tensor::new(vec![g.incidences(), d, d], sheaf.maps().to_vec()).unwrap()).unwrap();
    store.insert("x", Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).unwrap();
    store.insert("w", Tensor::new(vec![d, 2], (0..d * 2).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).unwrap();
    let probe = Tensor::new(vec![n, 2], (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let probe_r = Tensor::new(vec![g.incidences(), d], (0..g.incidences() * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let graph = g.clone();
    let report = finite_diff_check(
        &mut store,
        |tape, s| {
            let maps = tape.param(s, "maps")?;
            let x = tape.param(s, "x")?;
            let op = SheafOperator::normalized(&graph, maps, DEFAULT_EPS)?;
            let y = sheaf_gcn_layer(x, &op, tape.param(s, "w")?, Activation::Identity)?;
            let r = restrict(&graph, maps, x)?;
            y.mul(tape.constant(probe.clone())?)?.sum()?.add(r.mul(tape.constant(probe_r.clone())?)?.sum()?)
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:#?}");
}

#[test]
fn normalized_laplacian_gradient_matches_finite_differences() {
    check_maps_gradient(8, 4, 4, 2);
    check_maps_gradient(9, 5, 7, 3);
    check_maps_gradient(10, 3, 3, 1);
}

#[test]
fn gradient_through_unit_maps_with_repeated_eigenvalues() {
    // D_v = deg·I has fully degenerate eigenvalues.
    let g = Arc::new(StalkGraph::new(3, vec![(0, 1), (1, 2), (0, 2)], 2).unwrap());
    let sheaf = CellularSheaf::identity(g.clone());
    let mut store = ParamStore::new();
    store.insert("maps", Tensor::new(vec![6, 2, 2], sheaf.maps().to_vec()).unwrap()).unwrap();
    store.insert("x", Tensor::new(vec![3, 2], vec![0.3, -0.2, 0.9, 0.4, -0.5, 0.1]).unwrap()).unwrap();
    let probe = Tensor::new(vec![3, 2], vec![0.5, -1.0, 0.25, 0.75, -0.3, 0.6]).unwrap();
    let report = finite_diff_check(
        &mut store,
        |tape, s| {
            let op = SheafOperator::normalized(&g, tape.param(s, "maps")?, DEFAULT_EPS)?;
            op.apply(tape.param(s, "x")?)?.mul(tape.constant(probe.clone())?)?.sum()
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:#?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn diffusion_step_never_raises_normalized_energy(seed in any::<u64>(), alpha_idx in 0usize..3) {
        let alpha = [0.25, 0.5, 1.0][alpha_idx];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=7);
        let d = rng.random_range(1..=3);
        let m = rng.random_range(1..=n * (n - 1) / 2);
        let g = random_graph(&mut rng, n, m, d);
        let sheaf = random_sheaf(&mut rng, g);
        let delta = normalize_laplacian(&assemble_sheaf_laplacian(&sheaf), DEFAULT_EPS).unwrap();
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dx = delta.apply(&x);
        let stepped: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a - alpha * b).collect();
        prop_assert!(delta.quadratic_form(&stepped) <= delta.quadratic_form(&x) + 1e-10);
    }
}
