//! Graph data model, GCN normalization, bundle I/O, synthetic generation,
//! and the inductive evaluation split.

mod io;
mod ledger;
mod split;
mod synth;

use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, SparseMatrix};

pub use io::{load_graph, save_graph, Bundle};
pub use ledger::{AttackKind, Perturbation, PoisonLedger, TriggerPattern};
pub use split::{split_inductive, Split, TEST_FRACTION};
pub use synth::{generate_synthetic, SyntheticSpec};

/// Undirected graph with dense node features and class labels.
///
/// Edges are stored once as `(u, v)` with `u < v`, sorted and deduplicated.
/// Self-loops never appear in the edge list; they are added by
/// [`normalize_adjacency`].
#[derive(Debug, Clone)]
pub struct Graph {
    num_classes: usize,
    features: Matrix,
    labels: Vec<usize>,
    edges: Vec<(usize, usize)>,
    neighbors: OnceLock<Arc<Neighbors>>,
    adjacency: OnceLock<Arc<SparseMatrix>>,
}

impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.num_classes == other.num_classes
            && self.labels == other.labels
            && self.edges == other.edges
            && self.features == other.features
    }
}

/// Sorted adjacency lists in CSR form.
#[derive(Debug)]
pub struct Neighbors {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Neighbors {
    pub fn of(&self, v: usize) -> &[usize] {
        &self.targets[self.offsets[v]..self.offsets[v + 1]]
    }
}

impl Graph {
    /// Validates and canonicalizes the edge list.
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        num_classes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::dim(
                "Graph::new",
                format!("{} labels for {n} nodes", labels.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::contract(format!("label {l} >= num_classes {num_classes}")));
        }
        if !features.is_finite() {
            return Err(Error::contract("non-finite feature value"));
        }
        let mut list = Vec::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::contract(format!("edge ({u}, {v}) outside {n} nodes")));
            }
            if u == v {
                return Err(Error::contract(format!("self-loop on node {u}")));
            }
            list.push((u.min(v), u.max(v)));
        }
        list.sort_unstable();
        list.dedup();
        Ok(Self {
            num_classes,
            features,
            labels,
            edges: list,
            neighbors: OnceLock::new(),
            adjacency: OnceLock::new(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.binary_search(&(u.min(v), u.max(v))).is_ok()
    }

    pub fn adjacency_lists(&self) -> Arc<Neighbors> {
        Arc::clone(self.neighbors.get_or_init(|| {
            let n = self.num_nodes();
            let mut deg = vec![0usize; n];
            for &(u, v) in &self.edges {
                deg[u] += 1;
                deg[v] += 1;
            }
            let mut offsets = vec![0usize; n + 1];
            for i in 0..n {
                offsets[i + 1] = offsets[i] + deg[i];
            }
            let mut fill = offsets.clone();
            let mut targets = vec![0usize; offsets[n]];
            for &(u, v) in &self.edges {
                targets[fill[u]] = v;
                fill[u] += 1;
                targets[fill[v]] = u;
                fill[v] += 1;
            }
            for i in 0..n {
                targets[offsets[i]..offsets[i + 1]].sort_unstable();
            }
            Arc::new(Neighbors { offsets, targets })
        }))
    }

    /// Neighbors of `v` (excluding `v`) in ascending order.
    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        self.adjacency_lists().of(v).to_vec()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adjacency_lists().of(v).len()
    }

    /// Cached `D^{-1/2}(A+I)D^{-1/2}`.
    pub fn normalized_adjacency(&self) -> Arc<SparseMatrix> {
        Arc::clone(self.adjacency.get_or_init(|| Arc::new(normalize_adjacency(self))))
    }

    /// Subgraph induced by `keep` (ascending node ids). Returns the graph and,
    /// for every original node, its new id if kept.
    pub fn induced_subgraph(&self, keep: &[usize]) -> Result<(Graph, Vec<Option<usize>>)> {
        let n = self.num_nodes();
        let mut map = vec![None; n];
        for (i, &v) in keep.iter().enumerate() {
            if v >= n {
                return Err(Error::contract(format!("node {v} outside graph")));
            }
            map[v] = Some(i);
        }
        let features = self.features.select_rows(keep);
        let labels = keep.iter().map(|&v| self.labels[v]).collect();
        let edges = self
            .edges
            .iter()
            .filter_map(|&(u, v)| Some((map[u]?, map[v]?)))
            .collect::<Vec<_>>();
        Ok((Graph::new(features, labels, self.num_classes, edges)?, map))
    }

    /// New graph with additional nodes appended (ids `n..n+k`) and extra edges.
    pub fn with_appended(&self, features: &Matrix, labels: &[usize], extra_edges: &[(usize, usize)]) -> Result<Graph> {
        if features.cols() != self.feature_dim() && features.rows() > 0 {
            return Err(Error::dim("with_appended", "feature width"));
        }
        let mut data = self.features.data().to_vec();
        data.extend_from_slice(features.data());
        let rows = self.num_nodes() + features.rows();
        let all = Matrix::from_vec(rows, self.feature_dim(), data)?;
        let mut all_labels = self.labels.clone();
        all_labels.extend_from_slice(labels);
        Graph::new(
            all,
            all_labels,
            self.num_classes,
            self.edges.iter().copied().chain(extra_edges.iter().copied()),
        )
    }

    /// New graph with each listed edge toggled (removed if present, added otherwise).
    pub fn with_flipped(&self, flips: &[(usize, usize)]) -> Result<Graph> {
        let mut set: std::collections::BTreeSet<(usize, usize)> = self.edges.iter().copied().collect();
        for &(u, v) in flips {
            let e = (u.min(v), u.max(v));
            if !set.remove(&e) {
                set.insert(e);
            }
        }
        Graph::new(self.features.clone(), self.labels.clone(), self.num_classes, set)
    }

    pub(crate) fn with_labels(&self, labels: Vec<usize>) -> Result<Graph> {
        Graph::new(
            self.features.clone(),
            labels,
            self.num_classes,
            self.edges.iter().copied(),
        )
    }

    /// First `n` nodes and the edges among them.
    pub(crate) fn truncated(&self, n: usize) -> Result<Graph> {
        let keep: Vec<usize> = (0..n.min(self.num_nodes())).collect();
        Ok(self.induced_subgraph(&keep)?.0)
    }
}

/// Symmetric GCN normalization with self-loops: entry `(i, j)` of `A+I`
/// becomes `1/sqrt(d_i d_j)` where `d` are the degrees of `A+I`.
pub fn normalize_adjacency(g: &Graph) -> SparseMatrix {
    let n = g.num_nodes();
    let nb = g.adjacency_lists();
    let inv_sqrt: Vec<f64> = (0..n).map(|v| 1.0 / ((nb.of(v).len() + 1) as f64).sqrt()).collect();
    let mut triplets = Vec::with_capacity(n + 2 * g.num_edges());
    for v in 0..n {
        triplets.push((v, v, inv_sqrt[v] * inv_sqrt[v]));
        for &u in nb.of(v) {
            triplets.push((v, u, inv_sqrt[v] * inv_sqrt[u]));
        }
    }
    SparseMatrix::from_triplets(n, n, triplets).expect("indices in range")
}
