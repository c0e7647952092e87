//! Edge extraction, degree statistics and graph export for synaptic matrices.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Default presence threshold on `|w|`.
pub const DEFAULT_EDGE_THRESHOLD: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub node_count: usize,
    /// Sorted by `(from, to)`.
    pub edges: Vec<Edge>,
    pub labels: Vec<String>,
}

/// Directed graph of a weight matrix: `w[(i, j)]` is an edge `j -> i` when
/// `i != j` and `|w[(i, j)]| > threshold`. Rectangular matrices use
/// `max(rows, cols)` nodes. Missing labels default to the node index.
pub fn extract_graph(w: &Mat, threshold: f64, labels: Option<&[String]>) -> Result<NetworkGraph> {
    if !(threshold >= 0.0) {
        return Err(Error::Parameter(format!(
            "edge threshold must be nonnegative, got {threshold}"
        )));
    }
    let node_count = w.nrows().max(w.ncols());
    let mut edges = Vec::new();
    for j in 0..w.ncols() {
        for i in 0..w.nrows() {
            let weight = w[(i, j)];
            if i != j && weight.abs() > threshold {
                edges.push(Edge { from: j, to: i, weight });
            }
        }
    }
    let labels = (0..node_count)
        .map(|k| labels.and_then(|l| l.get(k)).cloned().unwrap_or_else(|| k.to_string()))
        .collect();
    Ok(NetworkGraph {
        node_count,
        edges,
        labels,
    })
}

/// `counts[d]` is the number of nodes with degree `d`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DegreeHistogram {
    pub counts: Vec<usize>,
}

impl DegreeHistogram {
    fn from_degrees(degrees: &[usize]) -> Self {
        let max = degrees.iter().copied().max().unwrap_or(0);
        let mut counts = vec![0; max + 1];
        for &d in degrees {
            counts[d] += 1;
        }
        Self { counts }
    }

    pub fn count(&self, degree: usize) -> usize {
        self.counts.get(degree).copied().unwrap_or(0)
    }

    /// `sum_d d * counts[d]`.
    pub fn total_degree(&self) -> usize {
        self.counts.iter().enumerate().map(|(d, c)| d * c).sum()
    }
}

impl NetworkGraph {
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for e in &self.edges {
            deg[e.to] += 1;
        }
        deg
    }

    pub fn out_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for e in &self.edges {
            deg[e.from] += 1;
        }
        deg
    }
}

/// In- and out-degree histograms.
pub fn degree_distributions(graph: &NetworkGraph) -> (DegreeHistogram, DegreeHistogram) {
    (
        DegreeHistogram::from_degrees(&graph.in_degrees()),
        DegreeHistogram::from_degrees(&graph.out_degrees()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Dot,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "dot" => Ok(Self::Dot),
            _ => Err(Error::Unknown {
                kind: "export format",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonNode {
    id: usize,
    label: String,
}

#[derive(Serialize, Deserialize)]
struct JsonGraph {
    nodes: Vec<JsonNode>,
    edges: Vec<Edge>,
}

fn sorted_edges(graph: &NetworkGraph) -> Vec<Edge> {
    let mut edges = graph.edges.clone();
    edges.sort_by_key(|e| (e.from, e.to));
    edges
}

/// Serializes a graph; output is byte-identical for identical graphs.
pub fn export_graph(graph: &NetworkGraph, format: ExportFormat) -> Result<Vec<u8>> {
    let edges = sorted_edges(graph);
    match format {
        ExportFormat::Json => {
            let doc = JsonGraph {
                nodes: graph
                    .labels
                    .iter()
                    .enumerate()
                    .map(|(id, label)| JsonNode {
                        id,
                        label: label.clone(),
                    })
                    .collect(),
                edges,
            };
            Ok(serde_json::to_vec_pretty(&doc)?)
        }
        ExportFormat::Dot => {
            let mut out = String::from("digraph network {\n");
            for (id, label) in graph.labels.iter().enumerate() {
                let _ = writeln!(out, "  {id} [label=\"{}\"];", label.replace('"', "\\\""));
            }
            for e in &edges {
                let _ = writeln!(out, "  {} -> {} [weight={:e}];", e.from, e.to, e.weight);
            }
            out.push_str("}\n");
            Ok(out.into_bytes())
        }
    }
}

/// Inverse of the JSON export.
pub fn import_graph_json(bytes: &[u8]) -> Result<NetworkGraph> {
    let doc: JsonGraph = serde_json::from_slice(bytes)?;
    let node_count = doc.nodes.len();
    for (k, n) in doc.nodes.iter().enumerate() {
        if n.id != k {
            return Err(Error::Config(format!("node ids must be 0..{node_count} in order")));
        }
    }
    if let Some(e) = doc.edges.iter().find(|e| e.from >= node_count || e.to >= node_count) {
        return Err(Error::Config(format!(
            "edge {} -> {} references a missing node",
            e.from, e.to
        )));
    }
    Ok(NetworkGraph {
        node_count,
        edges: doc.edges,
        labels: doc.nodes.into_iter().map(|n| n.label).collect(),
    })
}
