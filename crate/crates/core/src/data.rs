//! Patient records and their JSON file format.
//!
//! One document per patient:
//!
//! ```json
//! {"patient_id": "P000", "labels": [1, 0, 0, 1],
//!  "mri":   {"nodes": [{"id": 0, "region": "R0", "features": [0.5, 1.25]}], "edges": [[0, 1]]},
//!  "histo": {"nodes": [...], "edges": [...]}}
//! ```
//!
//! Floats are written with 17 significant digits so that a save/load cycle
//! reproduces every value bit for bit.

use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Subtype labels in file order.
pub const LABEL_NAMES: [&str; 4] = ["classical", "neural", "proneural", "mesenchymal"];
pub const NUM_LABELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Mri,
    Histo,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Mri => "mri",
            Modality::Histo => "histo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphNode {
    pub id: usize,
    pub region: String,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityGraph {
    pub modality: Modality,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<(usize, usize)>,
}

impl ModalityGraph {
    pub fn feature_dim(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.features.len())
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.modality.as_str();
        if self.nodes.is_empty() {
            return Err(Error::validation("graph.empty", format!("{m} graph has no nodes")));
        }
        let dim = self.feature_dim();
        if dim == 0 {
            return Err(Error::validation("node.features", format!("{m} nodes have empty feature vectors")));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.id != i {
                return Err(Error::validation(
                    "node.id",
                    format!("{m} node at position {i} has id {}", node.id),
                ));
            }
            if node.region.is_empty() {
                return Err(Error::validation("node.region", format!("{m} node {i} has an empty region label")));
            }
            if node.features.len() != dim {
                return Err(Error::validation(
                    "node.features",
                    format!("{m} node {i} has {} features, expected {dim}", node.features.len()),
                ));
            }
            if node.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("node.features", format!("{m} node {i} has a non-finite feature")));
            }
        }
        for &(u, v) in &self.edges {
            if u >= self.nodes.len() || v >= self.nodes.len() {
                return Err(Error::validation(
                    "edge.endpoint",
                    format!("{m} edge ({u}, {v}) out of range for {} nodes", self.nodes.len()),
                ));
            }
            if u == v {
                return Err(Error::validation("edge.self_loop", format!("{m} edge ({u}, {v}) is a self-loop")));
            }
        }
        Ok(())
    }

    pub fn region_labels(&self) -> Vec<&str> {
        let mut labels: Vec<&str> = self.nodes.iter().map(|n| n.region.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientSample {
    pub patient_id: String,
    pub labels: [u8; NUM_LABELS],
    pub mri: ModalityGraph,
    pub histo: ModalityGraph,
}

impl PatientSample {
    pub fn validate(&self) -> Result<()> {
        if self.patient_id.is_empty() {
            return Err(Error::validation("patient_id", "empty patient id"));
        }
        if self.labels.iter().any(|&l| l > 1) {
            return Err(Error::validation("labels", "labels must be 0 or 1"));
        }
        if self.labels.iter().all(|&l| l == 0) {
            return Err(Error::validation("labels", "at least one subtype label must be set"));
        }
        self.mri.validate()?;
        self.histo.validate()
    }

    pub fn label_vector(&self) -> [f64; NUM_LABELS] {
        self.labels.map(f64::from)
    }

    pub fn to_json(&self) -> String {
        let wire = PatientFile {
            patient_id: self.patient_id.clone(),
            labels: self.labels.iter().map(|&l| l as i64).collect(),
            mri: GraphFile::from(&self.mri),
            histo: GraphFile::from(&self.histo),
        };
        to_json_string(&wire)
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let wire: PatientFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if wire.labels.len() != NUM_LABELS {
            return Err(Error::validation(
                "labels",
                format!("expected {NUM_LABELS} labels, got {}", wire.labels.len()),
            ));
        }
        let mut labels = [0u8; NUM_LABELS];
        for (slot, &v) in labels.iter_mut().zip(&wire.labels) {
            *slot = match v {
                0 => 0,
                1 => 1,
                other => return Err(Error::validation("labels", format!("label value {other} is not 0/1"))),
            };
        }
        let sample = PatientSample {
            patient_id: wire.patient_id,
            labels,
            mri: wire.mri.into_graph(Modality::Mri),
            histo: wire.histo.into_graph(Modality::Histo),
        };
        sample.validate()?;
        Ok(sample)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientFile {
    patient_id: String,
    labels: Vec<i64>,
    mri: GraphFile,
    histo: GraphFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    nodes: Vec<GraphNode>,
    edges: Vec<[usize; 2]>,
}

impl From<&ModalityGraph> for GraphFile {
    fn from(g: &ModalityGraph) -> Self {
        Self {
            nodes: g.nodes.clone(),
            edges: g.edges.iter().map(|&(u, v)| [u, v]).collect(),
        }
    }
}

impl GraphFile {
    fn into_graph(self, modality: Modality) -> ModalityGraph {
        ModalityGraph {
            modality,
            nodes: self.nodes,
            edges: self.edges.into_iter().map(|[u, v]| (u, v)).collect(),
        }
    }
}

pub fn load_patient(path: &Path) -> Result<PatientSample> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PatientSample::from_json(&text, path)
}

pub fn save_patient(path: &Path, sample: &PatientSample) -> Result<()> {
    write_atomic(path, sample.to_json().as_bytes())
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_sibling(path);
    let write = || -> io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Pretty JSON with every float rendered as `{:.16e}` (17 significant digits).
pub fn to_json_string<T: Serialize>(value: &T) -> String {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FullPrecision::default());
    value.serialize(&mut ser).expect("in-memory JSON serialization");
    out.push(b'\n');
    String::from_utf8(out).expect("JSON is UTF-8")
}

#[derive(Default)]
struct FullPrecision {
    inner: serde_json::ser::PrettyFormatter<'static>,
    // depth of arrays whose elements are all numbers; those print on one line
    flat: Vec<bool>,
}

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, f64::from(value))
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.flat.push(true);
        w.write_all(b"[")
    }

    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.flat.pop();
        w.write_all(b"]")
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        if first {
            Ok(())
        } else {
            w.write_all(b", ")
        }
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, _w: &mut W) -> io::Result<()> {
        Ok(())
    }

    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object(w)
    }

    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.inner.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.inner.end_object_value(w)
    }
}

/// Checks a set of region-label sets for the shared-topology property.
pub fn same_region_sets(a: &ModalityGraph, b: &ModalityGraph) -> bool {
    let sa: HashSet<&str> = a.nodes.iter().map(|n| n.region.as_str()).collect();
    let sb: HashSet<&str> = b.nodes.iter().map(|n| n.region.as_str()).collect();
    sa == sb
}
