//! Network topology and combination weights.
//!
//! A [`Network`] is an undirected connected graph over `N` nodes; every node
//! is its own neighbor, so the adjacency diagonal is always true. Weight
//! matrices are stored with entry `[l][k]` (row `l`, column `k`) holding the
//! weight node `k` applies to information arriving from node `l`. Under that
//! convention every valid weight matrix is column-stochastic: for each node
//! `k` the weights it applies sum to one,
//!
//! ```text
//! sum_l  w[l][k] = 1,      w[l][k] = 0  whenever l is not a neighbor of k.
//! ```
//!
//! The same convention covers the two estimate-combination matrices and the
//! gradient-combination matrix of the general diffusion update; see
//! [`crate::strategies`].

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Stochasticity and sparsity checks accept residuals up to this tolerance.
pub const WEIGHT_TOLERANCE: f64 = 1e-12;

const MAX_TOPOLOGY_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("network must have at least one node")]
    Empty,
    #[error("no connected geometry found for n_nodes={n_nodes}, radius={radius} after {attempts} attempts")]
    Disconnected {
        n_nodes: usize,
        radius: f64,
        attempts: usize,
    },
    #[error("edge ({i}, {j}) is out of range for {n_nodes} nodes")]
    EdgeOutOfRange { i: usize, j: usize, n_nodes: usize },
    #[error("self edges are implicit; remove ({0}, {0}) from the edge list")]
    ExplicitSelfEdge(usize),
    #[error("positions list has {got} entries for {expected} nodes")]
    PositionCount { got: usize, expected: usize },
    #[error("matrix {name} is {rows}x{cols}, expected {n}x{n}")]
    DimensionMismatch {
        name: &'static str,
        rows: usize,
        cols: usize,
        n: usize,
    },
    #[error("step-size vector has {got} entries for {expected} nodes")]
    StepSizeCount { got: usize, expected: usize },
    #[error("matrix {name} is not column-stochastic: column {column} sums to {sum}")]
    NotStochastic {
        name: &'static str,
        column: usize,
        sum: f64,
    },
    #[error("matrix {name} has a negative entry at ({row}, {col}): {value}")]
    NegativeEntry {
        name: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },
}

/// Undirected connected graph with implicit self-loops.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "NetworkDoc", into = "NetworkDoc")]
pub struct Network {
    n_nodes: usize,
    positions: Option<Vec<[f64; 2]>>,
    adjacency: Vec<Vec<bool>>,
}

/// Wire format: node count, optional planar positions, and the undirected
/// edge list with 0-based endpoints and no self edges.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    n_nodes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    positions: Option<Vec<[f64; 2]>>,
    edges: Vec<[usize; 2]>,
}

impl TryFrom<NetworkDoc> for Network {
    type Error = GraphError;

    fn try_from(doc: NetworkDoc) -> Result<Self, GraphError> {
        let edges: Vec<(usize, usize)> = doc.edges.iter().map(|e| (e[0], e[1])).collect();
        Network::from_edges(doc.n_nodes, doc.positions, &edges)
    }
}

impl From<Network> for NetworkDoc {
    fn from(net: Network) -> NetworkDoc {
        NetworkDoc {
            n_nodes: net.n_nodes,
            positions: net.positions.clone(),
            edges: net.edge_list().iter().map(|&(i, j)| [i, j]).collect(),
        }
    }
}

impl Network {
    /// Build a network from an undirected edge list. Self-loops are implicit
    /// and must not appear in `edges`.
    pub fn from_edges(
        n_nodes: usize,
        positions: Option<Vec<[f64; 2]>>,
        edges: &[(usize, usize)],
    ) -> Result<Self, GraphError> {
        if n_nodes == 0 {
            return Err(GraphError::Empty);
        }
        if let Some(p) = &positions {
            if p.len() != n_nodes {
                return Err(GraphError::PositionCount {
                    got: p.len(),
                    expected: n_nodes,
                });
            }
        }
        let mut adjacency = vec![vec![false; n_nodes]; n_nodes];
        for k in 0..n_nodes {
            adjacency[k][k] = true;
        }
        for &(i, j) in edges {
            if i >= n_nodes || j >= n_nodes {
                return Err(GraphError::EdgeOutOfRange { i, j, n_nodes });
            }
            if i == j {
                return Err(GraphError::ExplicitSelfEdge(i));
            }
            adjacency[i][j] = true;
            adjacency[j][i] = true;
        }
        Ok(Network {
            n_nodes,
            positions,
            adjacency,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn positions(&self) -> Option<&[[f64; 2]]> {
        self.positions.as_deref()
    }

    pub fn is_neighbor(&self, l: usize, k: usize) -> bool {
        self.adjacency[l][k]
    }

    /// Neighbors of `k` in ascending order, including `k` itself.
    pub fn neighbors(&self, k: usize) -> Vec<usize> {
        (0..self.n_nodes).filter(|&l| self.adjacency[l][k]).collect()
    }

    /// Neighborhood size `|N_k|`, counting the node itself.
    pub fn degree(&self, k: usize) -> usize {
        self.adjacency[k].iter().filter(|&&a| a).count()
    }

    /// Undirected edge list with `i < j`, excluding self-loops.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for i in 0..self.n_nodes {
            for j in (i + 1)..self.n_nodes {
                if self.adjacency[i][j] {
                    edges.push((i, j));
                }
            }
        }
        edges
    }

    /// Breadth-first reachability from node 0.
    pub fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n_nodes];
        let mut queue = std::collections::VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(k) = queue.pop_front() {
            for l in 0..self.n_nodes {
                if self.adjacency[k][l] && !seen[l] {
                    seen[l] = true;
                    queue.push_back(l);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Drop `n_nodes` points uniformly on the unit square and connect every pair
/// within `radius` (Euclidean). Redraws the geometry until it is connected,
/// giving up after 100 attempts. The same seed always yields the same
/// network, bit for bit.
pub fn geometric_topology(n_nodes: usize, radius: f64, seed: u64) -> Result<Network, GraphError> {
    if n_nodes == 0 {
        return Err(GraphError::Empty);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for _ in 0..MAX_TOPOLOGY_ATTEMPTS {
        let positions: Vec<[f64; 2]> = (0..n_nodes)
            .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let mut edges = Vec::new();
        for i in 0..n_nodes {
            for j in (i + 1)..n_nodes {
                let dx = positions[i][0] - positions[j][0];
                let dy = positions[i][1] - positions[j][1];
                if (dx * dx + dy * dy).sqrt() <= radius {
                    edges.push((i, j));
                }
            }
        }
        let net = Network::from_edges(n_nodes, Some(positions), &edges)?;
        if net.is_connected() {
            return Ok(net);
        }
    }
    Err(GraphError::Disconnected {
        n_nodes,
        radius,
        attempts: MAX_TOPOLOGY_ATTEMPTS,
    })
}

/// Uniform averaging: node `k` weighs each of its neighbors (itself included)
/// by `1/|N_k|`.
pub fn averaging_weights(net: &Network) -> DMatrix<f64> {
    let n = net.n_nodes();
    DMatrix::from_fn(n, n, |l, k| {
        if net.is_neighbor(l, k) {
            1.0 / net.degree(k) as f64
        } else {
            0.0
        }
    })
}

/// Metropolis weights: `1/max(|N_k|, |N_l|)` between distinct neighbors, with
/// the leftover mass on the diagonal. Symmetric and doubly stochastic.
pub fn metropolis_weights(net: &Network) -> DMatrix<f64> {
    let n = net.n_nodes();
    let mut a = DMatrix::zeros(n, n);
    for k in 0..n {
        for l in 0..n {
            if l != k && net.is_neighbor(l, k) {
                a[(l, k)] = 1.0 / net.degree(k).max(net.degree(l)) as f64;
            }
        }
    }
    for k in 0..n {
        let off: f64 = (0..n).filter(|&l| l != k).map(|l| a[(l, k)]).sum();
        a[(k, k)] = 1.0 - off;
    }
    a
}

/// Weights that use only local information: the identity.
pub fn identity_weights(n_nodes: usize) -> DMatrix<f64> {
    DMatrix::identity(n_nodes, n_nodes)
}

/// The three weight matrices and per-node step-sizes of the general
/// diffusion update: `p1` blends estimates before the gradient step, `s`
/// blends gradients, `p2` blends the updated estimates.
#[derive(Clone, Debug)]
pub struct CombinationMatrices {
    pub p1: DMatrix<f64>,
    pub p2: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub mu: DVector<f64>,
}

/// Which of the two combination slots the estimate-averaging matrix fills.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffusionKind {
    /// Gradient step first, then combine: `p1 = I`, `p2 = a`.
    AdaptThenCombine,
    /// Combine first, then gradient step: `p1 = a`, `p2 = I`.
    CombineThenAdapt,
    /// No cooperation at all: all three matrices are the identity.
    NonCooperative,
}

impl CombinationMatrices {
    pub fn new(
        p1: DMatrix<f64>,
        p2: DMatrix<f64>,
        s: DMatrix<f64>,
        mu: DVector<f64>,
    ) -> CombinationMatrices {
        CombinationMatrices { p1, p2, s, mu }
    }

    pub fn n_nodes(&self) -> usize {
        self.p1.ncols()
    }

    /// Assemble the matrix triple for a named strategy from an
    /// estimate-averaging matrix `a` and a gradient-exchange matrix `c`.
    /// Both inputs must be square, nonnegative, and column-stochastic.
    pub fn for_strategy(
        kind: DiffusionKind,
        a: &DMatrix<f64>,
        c: &DMatrix<f64>,
        mu: DVector<f64>,
    ) -> Result<CombinationMatrices, GraphError> {
        check_stochastic("a", a)?;
        check_stochastic("c", c)?;
        let n = a.ncols();
        if c.ncols() != n {
            return Err(GraphError::DimensionMismatch {
                name: "c",
                rows: c.nrows(),
                cols: c.ncols(),
                n,
            });
        }
        if mu.len() != n {
            return Err(GraphError::StepSizeCount {
                got: mu.len(),
                expected: n,
            });
        }
        let eye = DMatrix::identity(n, n);
        let (p1, p2, s) = match kind {
            DiffusionKind::AdaptThenCombine => (eye, a.clone(), c.clone()),
            DiffusionKind::CombineThenAdapt => (a.clone(), eye, c.clone()),
            DiffusionKind::NonCooperative => (eye.clone(), eye.clone(), eye),
        };
        Ok(CombinationMatrices { p1, p2, s, mu })
    }
}

fn check_stochastic(name: &'static str, m: &DMatrix<f64>) -> Result<(), GraphError> {
    if m.nrows() != m.ncols() {
        return Err(GraphError::DimensionMismatch {
            name,
            rows: m.nrows(),
            cols: m.ncols(),
            n: m.ncols(),
        });
    }
    for k in 0..m.ncols() {
        for l in 0..m.nrows() {
            if m[(l, k)] < 0.0 {
                return Err(GraphError::NegativeEntry {
                    name,
                    row: l,
                    col: k,
                    value: m[(l, k)],
                });
            }
        }
        let sum: f64 = m.column(k).iter().sum();
        if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(GraphError::NotStochastic {
                name,
                column: k,
                sum,
            });
        }
    }
    Ok(())
}

/// One failed invariant found by [`validate`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    /// Column `column` of `matrix` sums to `1 + residual`.
    ColumnSum {
        matrix: &'static str,
        column: usize,
        residual: f64,
    },
    /// `matrix[(row, col)]` is nonzero although `row` is not a neighbor of `col`.
    OffNeighborhood {
        matrix: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },
    /// `matrix[(row, col)]` is negative.
    Negative {
        matrix: &'static str,
        row: usize,
        col: usize,
        value: f64,
    },
    /// `mu[node]` is not strictly positive.
    NonPositiveStepSize { node: usize, value: f64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::ColumnSum {
                matrix,
                column,
                residual,
            } => write!(f, "{matrix}: column {column} sum off by {residual:e}"),
            Violation::OffNeighborhood {
                matrix,
                row,
                col,
                value,
            } => write!(
                f,
                "{matrix}: entry ({row}, {col}) = {value:e} outside the neighborhood"
            ),
            Violation::Negative {
                matrix,
                row,
                col,
                value,
            } => write!(f, "{matrix}: entry ({row}, {col}) = {value:e} is negative"),
            Violation::NonPositiveStepSize { node, value } => {
                write!(f, "mu: node {node} has non-positive step-size {value:e}")
            }
        }
    }
}

/// Check every combination-matrix invariant against a network: column sums
/// within [`WEIGHT_TOLERANCE`] of one, nonnegativity, zeros outside each
/// node's neighborhood, strictly positive step-sizes. Returns all violations
/// found (empty means valid); dimension mismatches are errors.
pub fn validate(cm: &CombinationMatrices, net: &Network) -> Result<Vec<Violation>, GraphError> {
    let n = net.n_nodes();
    for (name, m) in [("p1", &cm.p1), ("p2", &cm.p2), ("s", &cm.s)] {
        if m.nrows() != n || m.ncols() != n {
            return Err(GraphError::DimensionMismatch {
                name,
                rows: m.nrows(),
                cols: m.ncols(),
                n,
            });
        }
    }
    if cm.mu.len() != n {
        return Err(GraphError::StepSizeCount {
            got: cm.mu.len(),
            expected: n,
        });
    }

    let mut violations = Vec::new();
    for (name, m) in [("p1", &cm.p1), ("p2", &cm.p2), ("s", &cm.s)] {
        for k in 0..n {
            let sum: f64 = m.column(k).iter().sum();
            if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
                violations.push(Violation::ColumnSum {
                    matrix: name,
                    column: k,
                    residual: sum - 1.0,
                });
            }
            for l in 0..n {
                let value = m[(l, k)];
                if value < 0.0 {
                    violations.push(Violation::Negative {
                        matrix: name,
                        row: l,
                        col: k,
                        value,
                    });
                }
                if value != 0.0 && !net.is_neighbor(l, k) {
                    violations.push(Violation::OffNeighborhood {
                        matrix: name,
                        row: l,
                        col: k,
                        value,
                    });
                }
            }
        }
    }
    for k in 0..n {
        if cm.mu[k] <= 0.0 {
            violations.push(Violation::NonPositiveStepSize {
                node: k,
                value: cm.mu[k],
            });
        }
    }
    Ok(violations)
}
