//! Labeled graphs, label alphabets and per-node score matrices.
//!
//! A [`LabeledGraph`] carries a fixed topology (undirected edges with bond
//! orders 1..=3), one categorical label per node and optional Cartesian
//! coordinates. Scores live in a dense row-major [`ScoreMatrix`] with one row
//! per node and one column per alphabet label.

mod rings;
pub(crate) mod wl;

pub use rings::{
    expand_tree, extract_ring_vocabulary, ring_basis, tree_decompose, ClusterVocabulary,
    RingPattern, TreeDecomposition, TreeLink,
};
pub use wl::{wl_hash, WlHash};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of distinct bond orders (single, double, triple).
pub const BOND_ARITY: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("alphabet needs at least two labels, got {0}")]
    AlphabetTooSmall(usize),
    #[error("duplicate alphabet label {0:?}")]
    DuplicateLabel(String),
    #[error("atom label {0:?} has no valence entry")]
    MissingValence(String),
    #[error("label index {index} out of range for alphabet of size {size}")]
    LabelOutOfRange { index: usize, size: usize },
    #[error("edge ({0}, {1}) references a node outside the graph")]
    NodeOutOfRange(usize, usize),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("bond order {0} not in 1..=3")]
    BadBondOrder(u8),
    #[error("coordinate dimension {0} not supported (expected 2 or 3)")]
    BadDimension(usize),
    #[error("coordinate block has {got} values, expected {expected}")]
    CoordinateShape { got: usize, expected: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite score at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("smoothing epsilon {0} outside [0, 1]")]
    BadEpsilon(f64),
    #[error("ring with pattern {0} is not in the cluster vocabulary")]
    RingNotInVocabulary(String),
    #[error("graph is not in atom mode")]
    NotAtomMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Atom,
    Tree,
}

/// Ordered set of node labels. In atom mode every label is an element symbol
/// with a maximum bond-order sum; in tree mode trailing labels name ring
/// clusters and carry no valence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomAlphabet {
    labels: Vec<String>,
    valences: Vec<Option<u8>>,
    mode: LabelMode,
}

impl AtomAlphabet {
    pub fn new(
        labels: Vec<String>,
        valences: Vec<Option<u8>>,
        mode: LabelMode,
    ) -> Result<Self, GraphError> {
        if labels.len() < 2 {
            return Err(GraphError::AlphabetTooSmall(labels.len()));
        }
        if valences.len() != labels.len() {
            return Err(GraphError::ShapeMismatch(format!(
                "{} labels but {} valence entries",
                labels.len(),
                valences.len()
            )));
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(GraphError::DuplicateLabel(l.clone()));
            }
        }
        if mode == LabelMode::Atom {
            if let Some(i) = valences.iter().position(Option::is_none) {
                return Err(GraphError::MissingValence(labels[i].clone()));
            }
        }
        Ok(Self {
            labels,
            valences,
            mode,
        })
    }

    /// Atom-mode alphabet from `(symbol, max valence)` pairs.
    pub fn atoms<S: AsRef<str>>(entries: &[(S, u8)]) -> Result<Self, GraphError> {
        Self::new(
            entries.iter().map(|(s, _)| s.as_ref().to_string()).collect(),
            entries.iter().map(|(_, v)| Some(*v)).collect(),
            LabelMode::Atom,
        )
    }

    /// Extends an atom alphabet with `n_clusters` cluster labels `R0, R1, ...`.
    pub fn with_clusters(&self, n_clusters: usize) -> Result<Self, GraphError> {
        let mut labels = self.labels.clone();
        let mut valences = self.valences.clone();
        for r in 0..n_clusters {
            labels.push(format!("R{r}"));
            valences.push(None);
        }
        Self::new(labels, valences, LabelMode::Tree)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn valence(&self, index: usize) -> Option<u8> {
        self.valences[index]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Number of plain atom labels (all labels in atom mode).
    pub fn atom_count(&self) -> usize {
        self.valences.iter().take_while(|v| v.is_some()).count()
    }

    pub fn is_cluster(&self, index: usize) -> bool {
        self.valences[index].is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub order: u8,
}

impl Edge {
    pub fn other(&self, node: usize) -> usize {
        if self.a == node {
            self.b
        } else {
            self.a
        }
    }
}

/// Row-major node coordinates with a uniform dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coords {
    dim: usize,
    data: Vec<f64>,
}

impl Coords {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self, GraphError> {
        if !(2..=3).contains(&dim) {
            return Err(GraphError::BadDimension(dim));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(GraphError::CoordinateShape {
                got: data.len(),
                expected: data.len().div_ceil(dim) * dim,
            });
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn squared_distance(&self, i: usize, j: usize) -> f64 {
        self.point(i)
            .iter()
            .zip(self.point(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn centroid(&self, nodes: &[usize]) -> Vec<f64> {
        let mut c = vec![0.0; self.dim];
        for &n in nodes {
            for (acc, v) in c.iter_mut().zip(self.point(n)) {
                *acc += v;
            }
        }
        let inv = 1.0 / nodes.len().max(1) as f64;
        c.iter_mut().for_each(|v| *v *= inv);
        c
    }
}

/// A molecule (or any labeled graph): fixed topology plus per-node labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledGraph {
    labels: Vec<usize>,
    edges: Vec<Edge>,
    coords: Option<Coords>,
}

impl LabeledGraph {
    /// Builds a graph, normalizing each edge so that `a < b` and sorting the
    /// edge list.
    pub fn new(
        labels: Vec<usize>,
        edges: impl IntoIterator<Item = (usize, usize, u8)>,
        coords: Option<Coords>,
    ) -> Result<Self, GraphError> {
        let m = labels.len();
        let mut list = Vec::new();
        for (a, b, order) in edges {
            if a >= m || b >= m {
                return Err(GraphError::NodeOutOfRange(a, b));
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            if !(1..=3).contains(&order) {
                return Err(GraphError::BadBondOrder(order));
            }
            list.push(Edge {
                a: a.min(b),
                b: a.max(b),
                order,
            });
        }
        list.sort();
        for w in list.windows(2) {
            if w[0].a == w[1].a && w[0].b == w[1].b {
                return Err(GraphError::DuplicateEdge(w[0].a, w[0].b));
            }
        }
        if let Some(c) = &coords {
            if c.len() != m {
                return Err(GraphError::CoordinateShape {
                    got: c.as_slice().len(),
                    expected: m * c.dim(),
                });
            }
        }
        Ok(Self {
            labels,
            edges: list,
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn coords(&self) -> Option<&Coords> {
        self.coords.as_ref()
    }

    pub fn with_coords(mut self, coords: Coords) -> Result<Self, GraphError> {
        if coords.len() != self.len() {
            return Err(GraphError::CoordinateShape {
                got: coords.as_slice().len(),
                expected: self.len() * coords.dim(),
            });
        }
        self.coords = Some(coords);
        Ok(self)
    }

    pub fn without_coords(mut self) -> Self {
        self.coords = None;
        self
    }

    /// Same topology and coordinates with new labels.
    pub fn relabeled(&self, labels: Vec<usize>) -> Result<Self, GraphError> {
        if labels.len() != self.len() {
            return Err(GraphError::ShapeMismatch(format!(
                "{} labels for {} nodes",
                labels.len(),
                self.len()
            )));
        }
        Ok(Self {
            labels,
            edges: self.edges.clone(),
            coords: self.coords.clone(),
        })
    }

    /// Topology with every label reset to 0.
    pub fn skeleton(&self) -> Self {
        Self {
            labels: vec![0; self.len()],
            edges: self.edges.clone(),
            coords: self.coords.clone(),
        }
    }

    /// Node `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let labels = perm.iter().map(|&old| self.labels[old]).collect();
        let edges = self
            .edges
            .iter()
            .map(|e| (inverse[e.a], inverse[e.b], e.order));
        let coords = self.coords.as_ref().map(|c| {
            let data = perm.iter().flat_map(|&old| c.point(old).to_vec()).collect();
            Coords { dim: c.dim, data }
        });
        Self::new(labels, edges, coords).expect("permutation preserves validity")
    }

    /// Neighbor lists `(neighbor, bond order)` sorted by neighbor index.
    pub fn adjacency(&self) -> Vec<Vec<(usize, u8)>> {
        let mut adj = vec![Vec::new(); self.len()];
        for e in &self.edges {
            adj[e.a].push((e.b, e.order));
            adj[e.b].push((e.a, e.order));
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Sum of incident bond orders per node.
    pub fn bond_sums(&self) -> Vec<u32> {
        let mut s = vec![0u32; self.len()];
        for e in &self.edges {
            s[e.a] += e.order as u32;
            s[e.b] += e.order as u32;
        }
        s
    }

    pub fn check_labels(&self, alphabet_len: usize) -> Result<(), GraphError> {
        match self.labels.iter().find(|&&l| l >= alphabet_len) {
            Some(&index) => Err(GraphError::LabelOutOfRange {
                index,
                size: alphabet_len,
            }),
            None => Ok(()),
        }
    }

    pub fn is_connected(&self) -> bool {
        if self.is_empty() {
            return true;
        }
        let adj = self.adjacency();
        let mut seen = vec![false; self.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Dense `rows x cols` matrix of real scores, one row per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, GraphError> {
        if data.len() != rows * cols {
            return Err(GraphError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, GraphError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(GraphError::ShapeMismatch("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.cols + k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn check_finite(&self) -> Result<(), GraphError> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(p) => Err(GraphError::NonFinite {
                row: p / self.cols.max(1),
                col: p % self.cols.max(1),
            }),
            None => Ok(()),
        }
    }

    /// Mean over rows (length `cols`).
    pub fn mean_row(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.rows.max(1) as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }
}

/// `(1 - eps) * onehot(labels) + eps / K` for every node.
pub fn onehot_smooth(
    graph: &LabeledGraph,
    alphabet_len: usize,
    eps: f64,
) -> Result<ScoreMatrix, GraphError> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(GraphError::BadEpsilon(eps));
    }
    graph.check_labels(alphabet_len)?;
    let base = eps / alphabet_len as f64;
    let mut z = ScoreMatrix::from_vec(
        graph.len(),
        alphabet_len,
        vec![base; graph.len() * alphabet_len],
    )?;
    for (i, &l) in graph.labels().iter().enumerate() {
        z.row_mut(i)[l] += 1.0 - eps;
    }
    Ok(z)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(z: &ScoreMatrix) -> Result<ScoreMatrix, GraphError> {
    z.check_finite()?;
    let mut out = z.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok(out)
}

/// Per-row argmax; ties go to the lowest index.
pub fn argmax_labels(probs: &ScoreMatrix) -> Vec<usize> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// `sum_i log softmax(z_i)[label_i]`.
pub fn log_graph_likelihood(graph: &LabeledGraph, z: &ScoreMatrix) -> Result<f64, GraphError> {
    if z.rows() != graph.len() {
        return Err(GraphError::ShapeMismatch(format!(
            "{} score rows for {} nodes",
            z.rows(),
            graph.len()
        )));
    }
    graph.check_labels(z.cols())?;
    z.check_finite()?;
    let mut total = 0.0;
    for (i, &l) in graph.labels().iter().enumerate() {
        let row = z.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += row[l] - lse;
    }
    Ok(total)
}
