//! Graph loading and the weight matrix `W` that drives every path statistic.
//!
//! A [`WeightedGraph`] holds dense affinity and cost matrices. The standard
//! weight matrix is `W = P_ref ∘ exp(-β C)` where `P_ref` is the natural
//! random walk on the affinities. A [`WeightMatrix`] is only ever constructed
//! when its spectral radius is strictly below `1 - SPECTRAL_MARGIN`, so the
//! Neumann series of `W` converges and `(I - W)` is safely invertible.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Matrices with `ρ(W) >= 1 - SPECTRAL_MARGIN` are rejected.
pub const SPECTRAL_MARGIN: f64 = 1e-9;

const POWER_ITERATION_CAP: usize = 10_000;
const POWER_ITERATION_TOL: f64 = 1e-12;
const DENSE_EIGEN_FALLBACK_MAX_N: usize = 64;

/// Directed graph with affinities `A` and costs `C`, stored densely.
///
/// Costs on non-edges are `+∞` and never read.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    node_ids: Vec<u64>,
    adjacency: DMatrix<f64>,
    cost: DMatrix<f64>,
}

/// One parsed edge line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: u64,
    pub dst: u64,
    pub affinity: f64,
    pub cost: Option<f64>,
}

impl WeightedGraph {
    /// Builds a graph from an edge list. Node ids are sorted and mapped to
    /// internal indices `0..n`. When an edge has no explicit cost, its cost is
    /// the reciprocal of its affinity.
    pub fn from_edges(edges: &[Edge]) -> Result<Self> {
        let lines: Vec<(usize, Edge)> = edges.iter().copied().enumerate().map(|(k, e)| (k + 1, e)).collect();
        Self::from_numbered_edges(&lines)
    }

    fn from_numbered_edges(edges: &[(usize, Edge)]) -> Result<Self> {
        let mut node_ids: Vec<u64> = edges.iter().flat_map(|(_, e)| [e.src, e.dst]).collect();
        node_ids.sort_unstable();
        node_ids.dedup();
        if node_ids.is_empty() {
            return Err(Error::InvalidArgument("graph has no edges".into()));
        }
        let index: HashMap<u64, usize> = node_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        let n = node_ids.len();
        let mut adjacency = DMatrix::zeros(n, n);
        let mut cost = DMatrix::from_element(n, n, f64::INFINITY);
        for &(line, e) in edges {
            if !(e.affinity > 0.0) || !e.affinity.is_finite() {
                return Err(Error::NonPositiveWeight {
                    line,
                    field: "affinity",
                    value: e.affinity,
                });
            }
            let c = match e.cost {
                Some(c) if !(c > 0.0) || !c.is_finite() => {
                    return Err(Error::NonPositiveWeight {
                        line,
                        field: "cost",
                        value: c,
                    })
                }
                Some(c) => c,
                None => 1.0 / e.affinity,
            };
            let (i, j) = (index[&e.src], index[&e.dst]);
            if adjacency[(i, j)] > 0.0 {
                return Err(Error::DuplicateEdge {
                    line,
                    src: e.src,
                    dst: e.dst,
                });
            }
            adjacency[(i, j)] = e.affinity;
            cost[(i, j)] = c;
        }
        let graph = WeightedGraph {
            node_ids,
            adjacency,
            cost,
        };
        graph.check_strongly_connected()?;
        Ok(graph)
    }

    /// Parses the edge-list format: `src dst affinity [cost]` per line,
    /// whitespace separated, `#` comments and blank lines ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = k + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split_whitespace().collect();
            if fields.len() != 3 && fields.len() != 4 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 3 or 4 fields, found {}", fields.len()),
                });
            }
            let src = parse_node_id(fields[0], line)?;
            let dst = parse_node_id(fields[1], line)?;
            let affinity = parse_float(fields[2], line)?;
            let cost = fields.get(3).map(|f| parse_float(f, line)).transpose()?;
            edges.push((
                line,
                Edge {
                    src,
                    dst,
                    affinity,
                    cost,
                },
            ));
        }
        Self::from_numbered_edges(&edges)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Builds a graph directly from an affinity matrix, with node ids `1..=n`
    /// and costs `1 / a_ij`.
    pub fn from_adjacency(adjacency: DMatrix<f64>) -> Result<Self> {
        let n = adjacency.nrows();
        if adjacency.ncols() != n {
            return Err(Error::NotSquare {
                rows: n,
                cols: adjacency.ncols(),
            });
        }
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let a = adjacency[(i, j)];
                if a < 0.0 || !a.is_finite() {
                    return Err(Error::NegativeEntry {
                        row: i,
                        col: j,
                        value: a,
                    });
                }
                if a > 0.0 {
                    edges.push(Edge {
                        src: i as u64 + 1,
                        dst: j as u64 + 1,
                        affinity: a,
                        cost: None,
                    });
                }
            }
        }
        let graph = Self::from_edges(&edges)?;
        if graph.n() != n {
            // an isolated node never appears in the edge list
            return Err(Error::NotStronglyConnected {
                node: (0..n as u64).find(|k| !graph.node_ids.contains(&(k + 1))).unwrap_or(0) + 1,
            });
        }
        Ok(graph)
    }

    pub fn n(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_ids(&self) -> &[u64] {
        &self.node_ids
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.node_ids.binary_search(&id).ok()
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    pub fn cost(&self) -> &DMatrix<f64> {
        &self.cost
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&a| a > 0.0).count()
    }

    /// Edges in row-major order, using external node ids.
    pub fn edges(&self) -> Vec<Edge> {
        let n = self.n();
        let mut out = Vec::with_capacity(self.edge_count());
        for i in 0..n {
            for j in 0..n {
                let a = self.adjacency[(i, j)];
                if a > 0.0 {
                    out.push(Edge {
                        src: self.node_ids[i],
                        dst: self.node_ids[j],
                        affinity: a,
                        cost: Some(self.cost[(i, j)]),
                    });
                }
            }
        }
        out
    }

    fn check_strongly_connected(&self) -> Result<()> {
        let forward = reachable(&self.adjacency, 0, false);
        let backward = reachable(&self.adjacency, 0, true);
        match (0..self.n()).find(|&k| !forward[k] || !backward[k]) {
            Some(k) => Err(Error::NotStronglyConnected { node: self.node_ids[k] }),
            None => Ok(()),
        }
    }
}

/// Breadth-first reachability from `start` along edges with positive weight,
/// or against them when `reverse` is set.
pub(crate) fn reachable(m: &DMatrix<f64>, start: usize, reverse: bool) -> Vec<bool> {
    let n = m.nrows();
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::from([start]);
    seen[start] = true;
    while let Some(v) = queue.pop_front() {
        for u in 0..n {
            let w = if reverse { m[(u, v)] } else { m[(v, u)] };
            if w > 0.0 && !seen[u] {
                seen[u] = true;
                queue.push_back(u);
            }
        }
    }
    seen
}

/// Strong connectivity of the support of a non-negative matrix.
pub fn is_strongly_connected(m: &DMatrix<f64>) -> bool {
    m.nrows() > 0
        && reachable(m, 0, false)
            .into_iter()
            .chain(reachable(m, 0, true))
            .all(|b| b)
}

fn parse_node_id(field: &str, line: usize) -> Result<u64> {
    let id: u64 = field.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid node id {field:?}"),
    })?;
    if id == 0 {
        return Err(Error::Parse {
            line,
            message: "node ids are 1-based".into(),
        });
    }
    Ok(id)
}

fn parse_float(field: &str, line: usize) -> Result<f64> {
    field.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid number {field:?}"),
    })
}

/// Natural random walk `P_ref = Diag(A e)^{-1} A`.
pub fn reference_transition_matrix(g: &WeightedGraph) -> Result<DMatrix<f64>> {
    let a = g.adjacency();
    let mut p = a.clone();
    for (i, mut row) in p.row_iter_mut().enumerate() {
        let sum: f64 = row.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::ZeroOutDegree { node: i });
        }
        row /= sum;
    }
    Ok(p)
}

/// Validated non-negative weight matrix with `ρ(W) < 1 - SPECTRAL_MARGIN`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    w: DMatrix<f64>,
    rho: f64,
    beta: Option<f64>,
}

impl WeightMatrix {
    /// Accepts any square non-negative matrix whose spectral radius is below
    /// the margin. The support graph need not be strongly connected, which
    /// admits killed (absorbing) chains.
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        check_non_negative(&w)?;
        let rho = spectral_radius(&w)?;
        if rho >= 1.0 - SPECTRAL_MARGIN {
            return Err(Error::SpectralRadius {
                rho,
                margin: SPECTRAL_MARGIN,
            });
        }
        Ok(WeightMatrix { w, rho, beta: None })
    }

    /// `W = P_ref ∘ exp(-β C)`.
    pub fn from_graph(g: &WeightedGraph, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidBeta(beta));
        }
        let p = reference_transition_matrix(g)?;
        let w = p.zip_map(g.cost(), |p, c| if p > 0.0 { p * (-beta * c).exp() } else { 0.0 });
        let mut out = Self::new(w)?;
        out.beta = Some(beta);
        Ok(out)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn spectral_radius(&self) -> f64 {
        self.rho
    }

    pub fn beta(&self) -> Option<f64> {
        self.beta
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.w
    }
}

/// Same as [`WeightMatrix::from_graph`].
pub fn build_weight_matrix(g: &WeightedGraph, beta: f64) -> Result<WeightMatrix> {
    WeightMatrix::from_graph(g, beta)
}

/// Same as [`WeightMatrix::new`].
pub fn validate_weight_matrix(w: DMatrix<f64>) -> Result<WeightMatrix> {
    WeightMatrix::new(w)
}

fn check_non_negative(w: &DMatrix<f64>) -> Result<()> {
    if w.nrows() != w.ncols() {
        return Err(Error::NotSquare {
            rows: w.nrows(),
            cols: w.ncols(),
        });
    }
    for j in 0..w.ncols() {
        for i in 0..w.nrows() {
            let v = w[(i, j)];
            if !v.is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
            if v < 0.0 {
                return Err(Error::NegativeEntry {
                    row: i,
                    col: j,
                    value: v,
                });
            }
        }
    }
    Ok(())
}

/// Perron root of a non-negative matrix.
///
/// Runs power iteration on `|W| + I` (the shift makes every irreducible block
/// aperiodic) and brackets `ρ(|W|)` with the Collatz–Wielandt bounds
/// `min_i (|W|x)_i / x_i <= ρ <= max_i (|W|x)_i / x_i`, valid for any positive
/// `x`. Stops when the bracket is narrower than 1e-12. If the cap is hit, small
/// matrices fall back to a dense eigenvalue computation.
pub fn spectral_radius(w: &DMatrix<f64>) -> Result<f64> {
    let n = w.nrows();
    if w.ncols() != n {
        return Err(Error::NotSquare {
            rows: n,
            cols: w.ncols(),
        });
    }
    if n == 0 {
        return Ok(0.0);
    }
    let abs = w.abs();
    if abs.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("matrix has non-finite entries".into()));
    }
    let mut x = nalgebra::DVector::from_element(n, 1.0 / n as f64);
    for _ in 0..POWER_ITERATION_CAP {
        let wx = &abs * &x;
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for k in 0..n {
            let r = wx[k] / x[k];
            lo = lo.min(r);
            hi = hi.max(r);
        }
        if hi - lo <= POWER_ITERATION_TOL {
            return Ok(hi);
        }
        let mut next = wx + &x;
        let norm: f64 = next.iter().sum();
        next /= norm;
        x = next;
    }
    if n <= DENSE_EIGEN_FALLBACK_MAX_N {
        let rho = abs.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max);
        return Ok(rho);
    }
    Err(Error::NoConvergence {
        iterations: POWER_ITERATION_CAP,
    })
}
