//! Patient files, cohort manifests and the synthetic generator.

use std::fs;
use std::path::Path;

use mmsn::data::{load_patient, same_region_sets, save_patient, GraphNode, Modality, ModalityGraph, PatientSample};
use mmsn::encoder::encode_regions;
use mmsn::metrics::evaluate;
use mmsn::synth::{
    generate_patients, generate_synthetic_cohort, load_cohort, read_manifest, validate_cohort, GeneratorConfig,
    PROTOTYPE_DIM,
};
use mmsn::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn tiny(n: usize) -> GeneratorConfig {
    GeneratorConfig {
        n_patients: n,
        regions: 2,
        mri_nodes_per_region: 2,
        histo_nodes_per_region: 2,
        d_mri: 3,
        d_hist: 4,
        ..Default::default()
    }
}

#[test]
fn patient_round_trips_through_json() {
    let (_, patients) = generate_patients(&GeneratorConfig::default(), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for p in patients.iter().take(5) {
        let path = dir.path().join(format!("{}.json", p.patient_id));
        save_patient(&path, p).unwrap();
        assert_eq!(&load_patient(&path).unwrap(), p);
    }
    let leftovers: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| !e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".json"))
        .collect();
    assert!(leftovers.is_empty(), "temporary files left behind");
}

#[test]
fn minimal_hand_written_file_loads() {
    let text = r#"{
  "patient_id": "X1",
  "labels": [1, 0, 0, 1],
  "mri": {"nodes": [{"id": 0, "region": "a", "features": [0.5, 1]},
                    {"id": 1, "region": "b", "features": [2, -1]}],
          "edges": [[0, 1]]},
  "histo": {"nodes": [{"id": 0, "region": "a", "features": [1]}], "edges": []}
}"#;
    let p = PatientSample::from_json(text, Path::new("x.json")).unwrap();
    assert_eq!(p.labels, [1, 0, 0, 1]);
    assert_eq!(p.mri.edges, vec![(0, 1)]);
    assert_eq!(p.histo.feature_dim(), 1);
    assert_eq!(p.label_vector(), [1.0, 0.0, 0.0, 1.0]);
}

fn field_of(text: &str) -> Option<String> {
    match PatientSample::from_json(text, Path::new("bad.json")).unwrap_err() {
        Error::Validation { field, .. } => Some(field),
        _ => None,
    }
}

#[test]
fn invalid_files_name_the_offending_field() {
    let graph = |nodes: &str, edges: &str| format!(r#"{{"nodes": [{nodes}], "edges": [{edges}]}}"#);
    let node = |id: usize, region: &str, f: &str| format!(r#"{{"id": {id}, "region": "{region}", "features": [{f}]}}"#);
    let ok = graph(&node(0, "a", "1"), "");
    let file = |labels: &str, mri: &str| format!(r#"{{"patient_id": "p", "labels": [{labels}], "mri": {mri}, "histo": {ok}}}"#);

    assert_eq!(field_of(&file("1, 0, 0", &ok)).as_deref(), Some("labels"));
    assert_eq!(field_of(&file("1, 0, 2, 0", &ok)).as_deref(), Some("labels"));
    assert_eq!(field_of(&file("1, 0, 0, 0", &graph("", ""))).as_deref(), Some("graph.empty"));
    let two = format!("{}, {}", node(0, "a", "1"), node(1, "b", "2"));
    assert_eq!(field_of(&file("1, 0, 0, 0", &graph(&two, "[0, 5]"))).as_deref(), Some("edge.endpoint"));
    assert_eq!(field_of(&file("1, 0, 0, 0", &graph(&two, "[1, 1]"))).as_deref(), Some("edge.self_loop"));
    let ragged = format!("{}, {}", node(0, "a", "1"), node(1, "b", "2, 3"));
    assert_eq!(field_of(&file("1, 0, 0, 0", &graph(&ragged, ""))).as_deref(), Some("node.features"));
    let unlabeled = node(0, "", "1");
    assert_eq!(field_of(&file("1, 0, 0, 0", &graph(&unlabeled, ""))).as_deref(), Some("node.region"));
    let misnumbered = format!("{}, {}", node(0, "a", "1"), node(7, "b", "2"));
    assert_eq!(field_of(&file("1, 0, 0, 0", &graph(&misnumbered, ""))).as_deref(), Some("node.id"));
}

#[test]
fn syntax_errors_report_the_line() {
    let text = "{\n  \"patient_id\": \"p\",\n  \"labels\": [1, 0,, 0]\n}";
    match PatientSample::from_json(text, Path::new("broken.json")).unwrap_err() {
        Error::Parse { line, path, .. } => {
            assert_eq!(line, 3);
            assert_eq!(path, Path::new("broken.json"));
        }
        other => panic!("unexpected {other}"),
    }
    let unknown = r#"{"patient_id": "p", "labels": [0,0,0,0], "mri": {"nodes": [], "edges": []}, "histo": {"nodes": [], "edges": []}, "extra": 1}"#;
    assert!(matches!(PatientSample::from_json(unknown, Path::new("u.json")), Err(Error::Parse { .. })));
}

#[test]
fn noiseless_modalities_are_linked_by_an_exact_linear_map() {
    let cfg = GeneratorConfig {
        n_patients: 5,
        noise: 0.0,
        ..Default::default()
    };
    let (cohort, patients) = generate_patients(&cfg, 9).unwrap();
    for p in &patients {
        let (mri, histo) = (encode_regions(&p.mri).unwrap(), encode_regions(&p.histo).unwrap());
        for r in 0..cfg.regions {
            let am = DMatrix::from_row_slice(cfg.d_mri, PROTOTYPE_DIM, &cohort.mri_maps[r]);
            let ah = DMatrix::from_row_slice(cfg.d_hist, PROTOTYPE_DIM, &cohort.histo_maps[r]);
            let link = &ah * am.clone().pseudo_inverse(1e-12).unwrap();
            let xm = DVector::from_row_slice(mri.features.row(r));
            let xh = DVector::from_row_slice(histo.features.row(r));
            let err = (&link * xm - &xh).amax();
            assert!(err < 1e-9, "region {r}: {err}");
            // every node equals the region mean
            for n in p.mri.nodes.iter().filter(|n| n.region == mri.labels[r]) {
                let gap = n.features.iter().zip(mri.features.row(r)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(gap < 1e-12);
            }
        }
        let z = cohort.prototype(0, &p.labels);
        let am = DMatrix::from_row_slice(cfg.d_mri, PROTOTYPE_DIM, &cohort.mri_maps[0]);
        let want = am * DVector::from_row_slice(&z);
        assert!((want - DVector::from_row_slice(mri.features.row(0))).amax() < 1e-12);
    }
}

#[test]
fn cohort_on_disk_has_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic_cohort(&GeneratorConfig::default(), 0, dir.path()).unwrap();
    assert_eq!(manifest.patients.len(), 30);
    let (_, patients) = load_cohort(dir.path()).unwrap();
    for p in &patients {
        assert_eq!(p.mri.region_labels(), ["R0", "R1", "R2", "R3"]);
        assert!(same_region_sets(&p.mri, &p.histo));
        assert_eq!(p.mri.feature_dim(), 24);
        assert_eq!(p.histo.feature_dim(), 40);
    }
    let (via_file, _) = read_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(via_file, manifest);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn generation_is_byte_identical_per_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = GeneratorConfig {
        n_patients: 8,
        ..Default::default()
    };
    generate_synthetic_cohort(&cfg, 42, a.path()).unwrap();
    generate_synthetic_cohort(&cfg, 42, b.path()).unwrap();
    generate_synthetic_cohort(&cfg, 43, c.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
}

#[test]
fn validation_flags_an_injected_empty_graph() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic_cohort(&tiny(6), 1, dir.path()).unwrap();
    let report = validate_cohort(dir.path()).unwrap();
    assert!(report.all_passed());
    assert_eq!(report.passed_count, 6);

    let target = dir.path().join(&manifest.patients[2]);
    let mut broken = load_patient(&target).unwrap();
    broken.histo.nodes.clear();
    broken.histo.edges.clear();
    fs::write(&target, broken.to_json()).unwrap();

    let report = validate_cohort(dir.path()).unwrap();
    assert!(!report.all_passed());
    assert_eq!(report.passed_count, 5);
    let bad = &report.files[2];
    assert!(!bad.passed);
    assert_eq!(bad.field.as_deref(), Some("graph.empty"));
    assert!(load_cohort(dir.path()).is_err());
}

#[test]
fn feature_width_mismatch_fails_cohort_load() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic_cohort(&tiny(3), 2, dir.path()).unwrap();
    let target = dir.path().join(&manifest.patients[0]);
    let mut p = load_patient(&target).unwrap();
    for n in &mut p.mri.nodes {
        n.features.push(0.0);
    }
    save_patient(&target, &p).unwrap();
    match load_cohort(dir.path()).unwrap_err() {
        Error::Validation { field, .. } => assert_eq!(field, "node.features"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn label_marginals_match_the_prior() {
    let cfg = GeneratorConfig {
        regions: 1,
        mri_nodes_per_region: 1,
        histo_nodes_per_region: 1,
        ..tiny(1000)
    };
    let (_, patients) = generate_patients(&cfg, 5).unwrap();
    let prior = cfg.label_prior();
    assert!((prior - 0.4).abs() < 1e-12);
    let sigma = (prior * (1.0 - prior) / 1000.0).sqrt();
    for l in 0..4 {
        let frac = patients.iter().filter(|p| p.labels[l] == 1).count() as f64 / 1000.0;
        assert!((frac - prior).abs() < 3.0 * sigma, "label {l}: {frac}");
    }
    assert!(patients.iter().all(|p| p.labels.iter().any(|&v| v == 1)));
}

fn region_mean_features(p: &PatientSample) -> Vec<f64> {
    let mut x = encode_regions(&p.mri).unwrap().features.into_data();
    x.push(1.0);
    x
}

#[test]
fn region_means_are_linearly_separable() {
    let cfg = GeneratorConfig {
        n_patients: 900,
        ..Default::default()
    };
    let (_, patients) = generate_patients(&cfg, 6).unwrap();
    let (train, test) = patients.split_at(600);
    let dim = region_mean_features(&patients[0]).len();
    let x = DMatrix::from_fn(train.len(), dim, |i, j| region_mean_features(&train[i])[j]);
    let y = DMatrix::from_fn(train.len(), 4, |i, l| f64::from(train[i].labels[l]));
    let gram = x.transpose() * &x + DMatrix::<f64>::identity(dim, dim) * 1e-3;
    let w = gram.cholesky().unwrap().solve(&(x.transpose() * y));
    let preds: Vec<[bool; 4]> = test
        .iter()
        .map(|p| {
            let f = DMatrix::from_row_slice(1, dim, &region_mean_features(p));
            let s = f * &w;
            std::array::from_fn(|l| s[(0, l)] > 0.5)
        })
        .collect();
    let targets: Vec<[u8; 4]> = test.iter().map(|p| p.labels).collect();
    let m = evaluate(&preds, &targets);
    assert!(m.micro_f1 >= 90.0, "{}", m.micro_f1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn floats_survive_json_bit_for_bit(values in proptest::collection::vec(-1e300f64..1e300, 1..8), tiny_vals in proptest::collection::vec(-1e-300f64..1e-300, 1..4)) {
        let features: Vec<f64> = values.iter().chain(&tiny_vals).copied().collect();
        let node = GraphNode { id: 0, region: "r".into(), features: features.clone() };
        let g = ModalityGraph { modality: Modality::Mri, nodes: vec![node], edges: vec![] };
        let sample = PatientSample {
            patient_id: "p".into(),
            labels: [0, 1, 0, 1],
            mri: g.clone(),
            histo: ModalityGraph { modality: Modality::Histo, ..g },
        };
        let back = PatientSample::from_json(&sample.to_json(), Path::new("p.json")).unwrap();
        for (a, b) in back.mri.nodes[0].features.iter().zip(&features) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
