//! Graph representation, dataset I/O and split management.
//!
//! A dataset lives on disk as a *bundle directory*:
//!
//! ```text
//! meta.json      {"num_nodes": .., "num_features": .., "num_classes": .., "name": ".."}
//! edges.tsv      two 0-based integer columns, one undirected edge per line
//! features.f32   raw little-endian float32, row-major, num_nodes x num_features
//! labels.tsv     one integer per line
//! split.json     {"train": [..], "val": [..], "test": [..]}
//! ```
//!
//! Graphs are undirected and simple: edge lists are symmetrized on load,
//! self-loops and duplicates dropped. Isolated nodes are legal and keep a
//! zero row in the normalized adjacency.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Train/validation/test node index lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    fn validate(&self, num_nodes: usize) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Validation("train split is empty".into()));
        }
        let mut seen = vec![false; num_nodes];
        for (name, part) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &i in part {
                if i >= num_nodes {
                    return Err(Error::Validation(format!(
                        "{name} split index {i} out of range (num_nodes = {num_nodes})"
                    )));
                }
                if seen[i] {
                    return Err(Error::Validation(format!(
                        "node {i} appears in more than one split partition"
                    )));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

/// An attributed graph with labels and a node split.
#[derive(Debug, Clone)]
pub struct GraphBundle {
    pub name: String,
    pub num_nodes: usize,
    pub num_features: usize,
    pub num_classes: usize,
    pub adjacency: CsrMatrix,
    /// Row-major (num_nodes, num_features); f32 is the authoritative on-disk
    /// precision so round-trips are bit-exact.
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
    pub split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    num_nodes: usize,
    num_features: usize,
    num_classes: usize,
    name: String,
}

impl GraphBundle {
    /// Assemble and validate a bundle from parts. Edges may be directed,
    /// duplicated or self-looped; they are cleaned here.
    pub fn new(
        name: impl Into<String>,
        num_nodes: usize,
        num_features: usize,
        num_classes: usize,
        edges: &[(usize, usize)],
        features: Vec<f32>,
        labels: Vec<usize>,
        split: Split,
    ) -> Result<Self> {
        if num_nodes == 0 || num_features == 0 || num_classes == 0 {
            return Err(Error::Validation(
                "num_nodes, num_features and num_classes must be positive".into(),
            ));
        }
        let mut cleaned: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Validation(format!(
                    "edge ({u}, {v}) out of range (num_nodes = {num_nodes})"
                )));
            }
            if u == v {
                continue;
            }
            cleaned.push((u.min(v), u.max(v)));
        }
        cleaned.sort_unstable();
        cleaned.dedup();
        let adjacency = CsrMatrix::symmetric_adjacency(num_nodes, &cleaned);

        if features.len() != num_nodes * num_features {
            return Err(Error::Validation(format!(
                "feature block has {} values, expected {}",
                features.len(),
                num_nodes * num_features
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite feature at node {}, column {}",
                pos / num_features,
                pos % num_features
            )));
        }
        if labels.len() != num_nodes {
            return Err(Error::Validation(format!(
                "{} labels for {} nodes",
                labels.len(),
                num_nodes
            )));
        }
        let mut class_seen = vec![false; num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::Validation(format!(
                    "label {y} of node {i} exceeds num_classes = {num_classes}"
                )));
            }
            class_seen[y] = true;
        }
        if let Some(c) = class_seen.iter().position(|&s| !s) {
            return Err(Error::Validation(format!("class {c} has no nodes")));
        }
        split.validate(num_nodes)?;

        Ok(GraphBundle {
            name: name.into(),
            num_nodes,
            num_features,
            num_classes,
            adjacency,
            features,
            labels,
            split,
        })
    }

    /// Undirected edge count.
    pub fn num_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    /// Undirected edges as (u, v) with u < v, ascending.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for u in 0..self.num_nodes {
            let (cols, _) = self.adjacency.row(u);
            for &v in cols {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Feature row of one node, widened to f64.
    pub fn feature_row(&self, i: usize) -> Vec<f64> {
        self.features[i * self.num_features..(i + 1) * self.num_features]
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    /// Full feature matrix widened to f64, row-major.
    pub fn features_f64(&self) -> Vec<f64> {
        self.features.iter().map(|&v| v as f64).collect()
    }

    /// Train-split node ids of one class, ascending.
    pub fn train_nodes_of_class(&self, class: usize) -> Vec<usize> {
        let mut nodes: Vec<usize> = self
            .split
            .train
            .iter()
            .copied()
            .filter(|&i| self.labels[i] == class)
            .collect();
        nodes.sort_unstable();
        nodes
    }
}

/// Dense symmetric weighted graph with zero diagonal, weights in [0, 1].
/// Carrier for synthetic adjacencies during evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    pub num_nodes: usize,
    /// Row-major (num_nodes, num_nodes).
    pub weights: Vec<f64>,
}

impl WeightedGraph {
    pub fn new(num_nodes: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != num_nodes * num_nodes {
            return Err(Error::Validation(format!(
                "weight matrix has {} entries, expected {}",
                weights.len(),
                num_nodes * num_nodes
            )));
        }
        let w = WeightedGraph { num_nodes, weights };
        for i in 0..num_nodes {
            if w.get(i, i) != 0.0 {
                return Err(Error::Validation(format!("nonzero diagonal at {i}")));
            }
            for j in 0..num_nodes {
                let v = w.get(i, j);
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Validation(format!(
                        "weight ({i}, {j}) = {v} outside [0, 1]"
                    )));
                }
                if v.to_bits() != w.get(j, i).to_bits() {
                    return Err(Error::Validation(format!(
                        "weights not bit-symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(w)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.num_nodes + j]
    }

    /// Sparse view of the weight matrix (zero entries dropped).
    pub fn to_csr(&self) -> CsrMatrix {
        let mut triplets = Vec::new();
        for i in 0..self.num_nodes {
            for j in 0..self.num_nodes {
                let v = self.get(i, j);
                if v != 0.0 {
                    triplets.push((i, j, v));
                }
            }
        }
        CsrMatrix::from_triplets(self.num_nodes, &triplets)
    }
}

/// D^{-1/2} (A + I?) D^{-1/2} over any symmetric nonnegative CSR matrix.
/// Zero-degree rows stay zero.
pub fn normalize_symmetric(adj: &CsrMatrix, add_self_loops: bool) -> CsrMatrix {
    let n = adj.n();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(adj.nnz() + n);
    for i in 0..n {
        let (cols, vals) = adj.row(i);
        for (c, v) in cols.iter().zip(vals) {
            triplets.push((i, *c, *v));
        }
    }
    if add_self_loops {
        for i in 0..n {
            triplets.push((i, i, 1.0));
        }
    }
    let tilde = CsrMatrix::from_triplets(n, &triplets);
    let deg = tilde.row_sums();
    let dinv_sqrt: Vec<f64> = deg
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let scaled: Vec<(usize, usize, f64)> = {
        let mut out = Vec::with_capacity(tilde.nnz());
        for i in 0..n {
            let (cols, vals) = tilde.row(i);
            for (c, v) in cols.iter().zip(vals) {
                out.push((i, *c, dinv_sqrt[i] * v * dinv_sqrt[*c]));
            }
        }
        out
    };
    CsrMatrix::from_triplets(n, &scaled)
}

/// Symmetrically normalized adjacency of a bundle,
/// D^{-1/2} (A + I) D^{-1/2} when `add_self_loops` is set.
pub fn normalized_adjacency(g: &GraphBundle, add_self_loops: bool) -> CsrMatrix {
    normalize_symmetric(&g.adjacency, add_self_loops)
}

/// Per-class node counts over the given indices.
pub fn class_distribution(g: &GraphBundle, indices: &[usize]) -> Vec<usize> {
    let mut counts = vec![0usize; g.num_classes];
    for &i in indices {
        counts[g.labels[i]] += 1;
    }
    counts
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn read_string(path: &Path) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|_| Error::parse(path, "file is not valid UTF-8"))
}

/// Load a bundle directory. Symmetrizes edges, drops self-loops and
/// duplicates, and validates every invariant.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<GraphBundle> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_str(&read_string(&meta_path)?)
        .map_err(|e| Error::parse(&meta_path, e.to_string()))?;

    let edges_path = dir.join("edges.tsv");
    let mut edges = Vec::new();
    for (lineno, line) in read_string(&edges_path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<usize> {
            tok.ok_or_else(|| Error::parse(&edges_path, format!("line {}: missing column", lineno + 1)))?
                .parse::<usize>()
                .map_err(|_| Error::parse(&edges_path, format!("line {}: bad integer", lineno + 1)))
        };
        let u = parse(it.next())?;
        let v = parse(it.next())?;
        edges.push((u, v));
    }

    let feat_path = dir.join("features.f32");
    let raw = read_file(&feat_path)?;
    if raw.len() % 4 != 0 {
        return Err(Error::parse(&feat_path, "length not a multiple of 4"));
    }
    let features: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let labels_path = dir.join("labels.tsv");
    let labels: Vec<usize> = read_string(&labels_path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(lineno, l)| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| Error::parse(&labels_path, format!("line {}: bad label", lineno + 1)))
        })
        .collect::<Result<_>>()?;

    let split_path = dir.join("split.json");
    let split: Split = serde_json::from_str(&read_string(&split_path)?)
        .map_err(|e| Error::parse(&split_path, e.to_string()))?;

    GraphBundle::new(
        meta.name,
        meta.num_nodes,
        meta.num_features,
        meta.num_classes,
        &edges,
        features,
        labels,
        split,
    )
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

/// Save a bundle directory (creates it if needed). Inverse of [`load_bundle`].
pub fn save_bundle(g: &GraphBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let meta = Meta {
        num_nodes: g.num_nodes,
        num_features: g.num_features,
        num_classes: g.num_classes,
        name: g.name.clone(),
    };
    let meta_json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    write_file(&dir.join("meta.json"), meta_json.as_bytes())?;

    let mut edges_out = String::new();
    for (u, v) in g.edges() {
        edges_out.push_str(&format!("{u}\t{v}\n"));
    }
    write_file(&dir.join("edges.tsv"), edges_out.as_bytes())?;

    let mut feat_bytes = Vec::with_capacity(g.features.len() * 4);
    for v in &g.features {
        feat_bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(&dir.join("features.f32"), &feat_bytes)?;

    let mut labels_out = String::new();
    for y in &g.labels {
        labels_out.push_str(&format!("{y}\n"));
    }
    write_file(&dir.join("labels.tsv"), labels_out.as_bytes())?;

    let split_json = serde_json::to_string_pretty(&g.split).expect("split serializes");
    write_file(&dir.join("split.json"), split_json.as_bytes())?;
    Ok(())
}

/// Where a bundle's files live, for size accounting.
pub fn bundle_files(dir: impl AsRef<Path>) -> Vec<PathBuf> {
    let dir = dir.as_ref();
    ["meta.json", "edges.tsv", "features.f32", "labels.tsv", "split.json"]
        .iter()
        .map(|f| dir.join(f))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_bundle() -> GraphBundle {
        GraphBundle::new(
            "toy",
            4,
            2,
            2,
            &[(0, 1), (1, 2), (2, 3), (3, 0)],
            vec![0.5, -1.0, 2.0, 0.0, 1.5, 3.0, -0.5, 0.25],
            vec![0, 0, 1, 1],
            Split {
                train: vec![0, 2],
                val: vec![1],
                test: vec![3],
            },
        )
        .unwrap()
    }

    #[test]
    fn symmetrization_stores_two_nonzeros() {
        let g = GraphBundle::new(
            "pair",
            2,
            1,
            2,
            &[(0, 1)],
            vec![0.0, 1.0],
            vec![0, 1],
            Split {
                train: vec![0, 1],
                val: vec![],
                test: vec![],
            },
        )
        .unwrap();
        assert_eq!(g.adjacency.nnz(), 2);
        assert_eq!(g.num_edges(), 1);
    }

    #[test]
    fn duplicate_and_reversed_edges_collapse() {
        let g = GraphBundle::new(
            "dups",
            3,
            1,
            1,
            &[(0, 1), (1, 0), (0, 1), (1, 2), (2, 2)],
            vec![0.0; 3],
            vec![0, 0, 0],
            Split {
                train: vec![0],
                val: vec![],
                test: vec![],
            },
        )
        .unwrap();
        assert_eq!(g.num_edges(), 2);
        assert_eq!(g.adjacency.value_at(2, 2), 0.0);
    }

    #[test]
    fn out_of_range_edge_rejected() {
        let err = GraphBundle::new(
            "bad",
            10,
            1,
            1,
            &[(0, 99)],
            vec![0.0; 10],
            vec![0; 10],
            Split {
                train: vec![0],
                val: vec![],
                test: vec![],
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn non_finite_feature_rejected() {
        let err = GraphBundle::new(
            "nan",
            2,
            1,
            1,
            &[(0, 1)],
            vec![0.0, f32::NAN],
            vec![0, 0],
            Split {
                train: vec![0],
                val: vec![],
                test: vec![],
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn missing_class_rejected() {
        let err = GraphBundle::new(
            "gap",
            3,
            1,
            3,
            &[(0, 1)],
            vec![0.0; 3],
            vec![0, 0, 2],
            Split {
                train: vec![0],
                val: vec![],
                test: vec![],
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn overlapping_split_rejected() {
        let err = GraphBundle::new(
            "overlap",
            3,
            1,
            1,
            &[(0, 1)],
            vec![0.0; 3],
            vec![0; 3],
            Split {
                train: vec![0, 1],
                val: vec![1],
                test: vec![],
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn normalized_adjacency_degree_one_edge() {
        let g = GraphBundle::new(
            "pair",
            2,
            1,
            1,
            &[(0, 1)],
            vec![0.0, 0.0],
            vec![0, 0],
            Split {
                train: vec![0],
                val: vec![],
                test: vec![],
            },
        )
        .unwrap();
        let s = normalized_adjacency(&g, false);
        assert_eq!(s.value_at(0, 1), 1.0);
        assert_eq!(s.value_at(1, 0), 1.0);
    }

    #[test]
    fn normalized_adjacency_k3() {
        let g = GraphBundle::new(
            "k3",
            3,
            1,
            1,
            &[(0, 1), (1, 2), (0, 2)],
            vec![0.0; 3],
            vec![0; 3],
            Split {
                train: vec![0],
                val: vec![],
                test: vec![],
            },
        )
        .unwrap();
        let plain = normalized_adjacency(&g, false);
        for (i, j) in [(0, 1), (1, 2), (0, 2)] {
            assert!((plain.value_at(i, j) - 0.5).abs() < 1e-15);
        }
        let looped = normalized_adjacency(&g, true);
        for i in 0..3 {
            for j in 0..3 {
                assert!((looped.value_at(i, j) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn isolated_node_keeps_zero_row() {
        let g = GraphBundle::new(
            "iso",
            3,
            1,
            1,
            &[(0, 1)],
            vec![0.0; 3],
            vec![0; 3],
            Split {
                train: vec![0],
                val: vec![],
                test: vec![],
            },
        )
        .unwrap();
        let s = normalized_adjacency(&g, false);
        assert_eq!(s.row(2).0.len(), 0);
    }

    #[test]
    fn class_distribution_counts() {
        let g = toy_bundle();
        assert_eq!(class_distribution(&g, &[0, 1, 2]), vec![2, 1]);
        assert_eq!(class_distribution(&g, &[]), vec![0, 0]);
        let train = class_distribution(&g, &g.split.train);
        assert_eq!(train.iter().sum::<usize>(), g.split.train.len());
    }

    #[test]
    fn bundle_round_trip_is_bit_exact() {
        let g = toy_bundle();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&g, dir.path()).unwrap();
        let g2 = load_bundle(dir.path()).unwrap();
        assert_eq!(g.adjacency, g2.adjacency);
        assert_eq!(
            g.features.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.features.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(g.labels, g2.labels);
        assert_eq!(g.split, g2.split);

        // saving again reproduces identical bytes
        let dir2 = tempfile::tempdir().unwrap();
        save_bundle(&g2, dir2.path()).unwrap();
        for f in ["meta.json", "edges.tsv", "features.f32", "labels.tsv", "split.json"] {
            let a = std::fs::read(dir.path().join(f)).unwrap();
            let b = std::fs::read(dir2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs");
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_bundle(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn weighted_graph_validates_symmetry() {
        let ok = WeightedGraph::new(2, vec![0.0, 0.3, 0.3, 0.0]).unwrap();
        assert_eq!(ok.get(0, 1), 0.3);
        assert!(WeightedGraph::new(2, vec![0.0, 0.3, 0.2, 0.0]).is_err());
        assert!(WeightedGraph::new(2, vec![0.1, 0.3, 0.3, 0.0]).is_err());
        assert!(WeightedGraph::new(2, vec![0.0, 1.5, 1.5, 0.0]).is_err());
    }
}
