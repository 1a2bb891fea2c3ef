//! Latent graph construction, soft assignment, fusion, diffusion and readout.

use std::collections::BTreeSet;

use mmsn::latent::{
    edge_features, fuse_modalities, init_latent_graph, project_to_latent, readout, sheaf_diffuse, soft_assign,
    LatentGraph,
};
use mmsn::nn::{Linear, Mlp};
use mmsn::sheaf::{
    assemble_sheaf_laplacian, normalize_laplacian, CellularSheaf, SheafOperator, StalkGraph, DEFAULT_EPS,
};
use mmsn::{ParamStore, Tape, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn dm(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn assert_close(t: &Tensor, m: &DMatrix<f64>, tol: f64) {
    assert_eq!(t.shape(), &[m.nrows(), m.ncols()]);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            assert!((t.get2(i, j) - m[(i, j)]).abs() < tol, "({i},{j}): {} vs {}", t.get2(i, j), m[(i, j)]);
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Threshold graph plus the top-1 fallback for isolated nodes, by brute force.
fn oracle_edges(x: &Tensor, tau: f64) -> BTreeSet<(usize, usize)> {
    let n = x.rows();
    let mut edges = BTreeSet::new();
    for i in 0..n {
        for j in 0..n {
            if i < j && cosine(x.row(i), x.row(j)) >= tau {
                edges.insert((i, j));
            }
        }
    }
    let isolated: Vec<usize> = (0..n).filter(|&i| !edges.iter().any(|&(u, v)| u == i || v == i)).collect();
    for i in isolated {
        let mut best = usize::MAX;
        let mut best_sim = f64::NEG_INFINITY;
        for j in (0..n).filter(|&j| j != i) {
            let s = cosine(x.row(i), x.row(j));
            if s > best_sim {
                best = j;
                best_sim = s;
            }
        }
        edges.insert((i.min(best), i.max(best)));
    }
    edges
}

#[test]
fn threshold_graph_matches_cosine_scan() {
    for seed in 0..10 {
        let lg = init_latent_graph(8, 16, 0.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let got: BTreeSet<(usize, usize)> = lg.edges().iter().copied().collect();
        assert_eq!(got, oracle_edges(lg.initial_features(), 0.0));
    }
}

#[test]
fn high_threshold_falls_back_to_nearest_neighbour() {
    let lg = init_latent_graph(10, 4, 0.999, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let got: BTreeSet<(usize, usize)> = lg.edges().iter().copied().collect();
    assert_eq!(got, oracle_edges(lg.initial_features(), 0.999));
    assert!((0..10).all(|v| lg.graph().degree(v) >= 1));
}

#[test]
fn latent_features_have_variance_one_over_d() {
    let lg = init_latent_graph(200, 50, 0.2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let x = lg.initial_features().data();
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
    assert!(mean.abs() < 0.01);
    assert!((var - 1.0 / 50.0).abs() < 0.002, "{var}");
}

#[test]
fn invalid_latent_configs_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(init_latent_graph(1, 4, 0.0, &mut rng).is_err());
    assert!(init_latent_graph(4, 0, 0.0, &mut rng).is_err());
    assert!(init_latent_graph(4, 4, f64::NAN, &mut rng).is_err());
    let isolated = StalkGraph::new(3, vec![(0, 1)], 2).unwrap();
    assert!(LatentGraph::from_topology(isolated, Tensor::zeros(&[3, 2])).is_err());
}

#[test]
fn zero_weight_assignment_is_uniform() {
    let tape = Tape::new();
    let layer = |r, c| Linear {
        w: tape.constant(Tensor::zeros(&[r, c])).unwrap(),
        b: Some(tape.constant(Tensor::zeros(&[1, c])).unwrap()),
    };
    let mlp = Mlp::new(vec![layer(3, 3), layer(3, 7)]).unwrap();
    let x = tape.constant(rand_tensor(&mut ChaCha8Rng::seed_from_u64(1), &[5, 3])).unwrap();
    let p = soft_assign(x, &mlp).unwrap().to_tensor();
    assert!(p.data().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
}

#[test]
fn assignment_matches_softmax_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, w1, b1, w2, b2) = (
        rand_tensor(&mut rng, &[4, 3]),
        rand_tensor(&mut rng, &[3, 3]),
        rand_tensor(&mut rng, &[1, 3]),
        rand_tensor(&mut rng, &[3, 6]),
        rand_tensor(&mut rng, &[1, 6]),
    );
    let tape = Tape::new();
    let c = |t: &Tensor| tape.constant(t.clone()).unwrap();
    let mlp = Mlp::new(vec![Linear { w: c(&w1), b: Some(c(&b1)) }, Linear { w: c(&w2), b: Some(c(&b2)) }]).unwrap();
    let p = soft_assign(c(&x), &mlp).unwrap().to_tensor();

    let hidden = (dm(&x) * dm(&w1)).map_with_location(|_, j, v| (v + b1.data()[j]).max(0.0));
    let logits = (hidden * dm(&w2)).map_with_location(|_, j, v| v + b2.data()[j]);
    let mut oracle = logits.map(f64::exp);
    for mut row in oracle.row_iter_mut() {
        let s: f64 = row.sum();
        row /= s;
    }
    assert_close(&p, &oracle, 1e-12);
}

#[test]
fn single_region_projection_is_weighted_copy() {
    let tape = Tape::new();
    let p = tape.constant(Tensor::new(vec![1, 3], vec![0.2, 0.5, 0.3]).unwrap()).unwrap();
    let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap()).unwrap();
    let z = project_to_latent(p, x).unwrap().to_tensor();
    assert_eq!(z.data(), &[0.2, -0.4, 0.5, -1.0, 0.3, -0.6]);
}

#[test]
fn projection_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (p, x) = (rand_tensor(&mut rng, &[6, 4]), rand_tensor(&mut rng, &[6, 3]));
    let tape = Tape::new();
    let z = project_to_latent(tape.constant(p.clone()).unwrap(), tape.constant(x.clone()).unwrap())
        .unwrap()
        .to_tensor();
    assert_close(&z, &(dm(&p).transpose() * dm(&x)), 1e-12);
}

#[test]
fn fusion_sums_present_modalities() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (h, a, b) = (rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[4, 3]));
    let tape = Tape::new();
    let c = |t: &Tensor| tape.constant(t.clone()).unwrap();
    let zero = c(&Tensor::zeros(&[4, 3]));
    assert_eq!(fuse_modalities(c(&h), Some(zero), Some(zero)).unwrap().to_tensor(), h);
    assert_eq!(fuse_modalities(c(&h), None, None).unwrap().to_tensor(), h);
    let ab = fuse_modalities(c(&h), Some(c(&a)), Some(c(&b))).unwrap().to_tensor();
    let ba = fuse_modalities(c(&h), Some(c(&b)), Some(c(&a))).unwrap().to_tensor();
    assert!(ab.max_abs_diff(&ba) < 1e-15);
    assert_close(&ab, &(dm(&h) + dm(&a) + dm(&b)), 1e-15);
}

fn ring(n: usize, d: usize) -> LatentGraph {
    let edges = (0..n).map(|i| (i.min((i + 1) % n), i.max((i + 1) % n))).collect();
    LatentGraph::from_topology(StalkGraph::new(n, edges, d).unwrap(), Tensor::zeros(&[n, d])).unwrap()
}

#[test]
fn identity_maps_diffuse_like_graph_gcn() {
    let (n, d) = (5, 3);
    let lg = ring(n, d);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[n, d]);
    let mut store = ParamStore::new();
    store.insert("rho", Tensor::new(vec![2 * n, d, d], (0..2 * n).flat_map(|_| Tensor::eye(d).into_data()).collect()).unwrap()).unwrap();
    let tape = Tape::new();
    let rho = tape.param(&store, "rho").unwrap();
    let delta = SheafOperator::normalized(lg.graph(), rho, DEFAULT_EPS).unwrap();
    let w = tape.constant(Tensor::eye(d)).unwrap();
    let out = sheaf_diffuse(tape.constant(x.clone()).unwrap(), &lg, &delta, rho, &[w]).unwrap();

    // ring: every degree is 2, so I - Δ = A / 2
    let mut a = DMatrix::<f64>::zeros(n, n);
    for &(u, v) in lg.edges() {
        a[(u, v)] = 0.5;
        a[(v, u)] = 0.5;
    }
    let want = &a * dm(&x);
    assert_close(&out.nodes.to_tensor(), &want, 1e-12);
    let edges = DMatrix::from_fn(lg.edges().len(), d, |e, j| {
        let (u, v) = lg.edges()[e];
        0.5 * (want[(u, j)] + want[(v, j)])
    });
    assert_close(&out.edges.to_tensor(), &edges, 1e-12);
}

#[test]
fn diffusion_matches_dense_layer_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let lg = init_latent_graph(7, 3, 0.0, &mut rng).unwrap();
    let (n, d, k) = (7, 3, lg.graph().incidences());
    let maps = rand_tensor(&mut rng, &[k, d * d]).reshaped(&[k, d, d]).unwrap();
    let x = rand_tensor(&mut rng, &[n, d]);
    let ws: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[d, d])).collect();

    let mut store = ParamStore::new();
    store.insert("rho", maps.clone()).unwrap();
    let tape = Tape::new();
    let rho = tape.param(&store, "rho").unwrap();
    let delta = SheafOperator::normalized(lg.graph(), rho, DEFAULT_EPS).unwrap();
    let wv: Vec<_> = ws.iter().map(|w| tape.constant(w.clone()).unwrap()).collect();
    let out = sheaf_diffuse(tape.constant(x.clone()).unwrap(), &lg, &delta, rho, &wv).unwrap();

    let sheaf = CellularSheaf::new(lg.graph().clone(), maps.data().to_vec()).unwrap();
    let dense_delta = normalize_laplacian(&assemble_sheaf_laplacian(&sheaf), DEFAULT_EPS).unwrap().to_dense();
    let prop = DMatrix::<f64>::identity(n * d, n * d) - dense_delta;
    let mut h = dm(&x);
    for (l, w) in ws.iter().enumerate() {
        let flat = nalgebra::DVector::from_row_slice(h.transpose().as_slice());
        let mixed = &prop * flat;
        h = DMatrix::from_row_slice(n, d, mixed.as_slice()) * dm(w);
        if l + 1 < ws.len() {
            h = h.map(|v| v.max(0.0));
        }
    }
    assert_close(&out.nodes.to_tensor(), &h, 1e-10);

    let edges = DMatrix::from_fn(lg.edges().len(), d, |e, j| {
        let (u, v) = lg.edges()[e];
        let ru = DMatrix::from_row_slice(d, d, sheaf.map(2 * e));
        let rv = DMatrix::from_row_slice(d, d, sheaf.map(2 * e + 1));
        let val = ru * h.row(u).transpose() + rv * h.row(v).transpose();
        0.5 * val[j]
    });
    assert_close(&out.edges.to_tensor(), &edges, 1e-10);
}

#[test]
fn edge_feature_of_agreeing_endpoints_is_their_restriction() {
    let lg = ring(4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shared = rand_tensor(&mut rng, &[1, 2]);
    let x = Tensor::new(vec![4, 2], shared.data().repeat(4)).unwrap();
    let tape = Tape::new();
    let maps = tape.constant(Tensor::new(vec![8, 2, 2], Tensor::eye(2).into_data().repeat(8)).unwrap()).unwrap();
    let e = edge_features(&lg, maps, tape.constant(x).unwrap()).unwrap().to_tensor();
    for r in 0..4 {
        assert_eq!(e.row(r), shared.data());
    }
}

#[test]
fn readout_sums_nodes_and_edges() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (nodes, edges) = (rand_tensor(&mut rng, &[6, 4]), rand_tensor(&mut rng, &[9, 4]));
    let tape = Tape::new();
    let r = readout(tape.constant(nodes.clone()).unwrap(), Some(tape.constant(edges.clone()).unwrap()))
        .unwrap()
        .to_tensor();
    assert_eq!(r.shape(), &[1, 8]);
    for j in 0..4 {
        let mut sn = 0.0;
        for i in 0..6 {
            sn += nodes.get2(i, j);
        }
        let mut se = 0.0;
        for i in 0..9 {
            se += edges.get2(i, j);
        }
        assert!((r.data()[j] - sn).abs() < 1e-12);
        assert!((r.data()[4 + j] - se).abs() < 1e-12);
    }
    let zeros = readout(tape.constant(Tensor::zeros(&[6, 4])).unwrap(), Some(tape.constant(Tensor::zeros(&[9, 4])).unwrap()))
        .unwrap()
        .to_tensor();
    assert!(zeros.data().iter().all(|&v| v == 0.0));
    let no_edges = readout(tape.constant(nodes).unwrap(), None).unwrap().to_tensor();
    assert!(no_edges.data()[4..].iter().all(|&v| v == 0.0));
}

#[test]
fn topology_hash_depends_only_on_structure() {
    let a = init_latent_graph(8, 4, 0.1, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let b = LatentGraph::from_topology(
        StalkGraph::new(8, a.edges().to_vec(), 4).unwrap(),
        Tensor::filled(&[8, 4], 3.0),
    )
    .unwrap();
    assert_eq!(a.topology_hash(), b.topology_hash());
    let c = ring(8, 4);
    assert_ne!(a.topology_hash(), c.topology_hash());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assignment_rows_are_distributions(seed in any::<u64>(), rows in 1usize..8, n in 1usize..10, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let w = tape.constant(rand_tensor(&mut rng, &[3, n]).map(|v| v * scale)).unwrap();
        let mlp = Mlp::new(vec![Linear { w, b: None }]).unwrap();
        let x = tape.constant(rand_tensor(&mut rng, &[rows, 3])).unwrap();
        let p = soft_assign(x, &mlp).unwrap().to_tensor();
        for r in 0..rows {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn latent_graph_has_no_isolated_nodes(seed in any::<u64>(), n in 2usize..20, d in 1usize..8, tau in -1.0f64..1.0) {
        let lg = init_latent_graph(n, d, tau, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!((0..n).all(|v| lg.graph().degree(v) >= 1));
        prop_assert!(lg.edges().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(lg.edges().iter().all(|&(u, v)| u < v && v < n));
    }

    #[test]
    fn readout_ignores_row_order(seed in any::<u64>(), n in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[n, 3]);
        let mut rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
        rows.reverse();
        let y = Tensor::from_rows(&rows).unwrap();
        let tape = Tape::new();
        let a = readout(tape.constant(x).unwrap(), None).unwrap().to_tensor();
        let b = readout(tape.constant(y).unwrap(), None).unwrap().to_tensor();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

#[test]
fn incidence_matrices_have_expected_layout() {
    let lg = ring(3, 1);
    assert_eq!(lg.edge_mean_matrix().shape(), &[3, 6]);
    assert_eq!(lg.edge_diff_matrix().row(0), &[1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(lg.node_sum_matrix().sum(), 6.0);
}
