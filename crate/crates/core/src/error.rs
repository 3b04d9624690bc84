use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: non-positive {field} {value}")]
    NonPositiveWeight {
        line: usize,
        field: &'static str,
        value: f64,
    },

    #[error("line {line}: duplicate edge {src} -> {dst}")]
    DuplicateEdge { line: usize, src: u64, dst: u64 },

    #[error("graph is not strongly connected (node {node} unreachable in one direction)")]
    NotStronglyConnected { node: u64 },

    #[error("node {node} has zero out-degree")]
    ZeroOutDegree { node: usize },

    #[error("inverse temperature must be positive and finite, got {0}")]
    InvalidBeta(f64),

    #[error("spectral radius {rho} >= 1 - margin ({margin:e}); (I - W) is not safely invertible")]
    SpectralRadius { rho: f64, margin: f64 },

    #[error("negative weight {value} at ({row}, {col})")]
    NegativeEntry { row: usize, col: usize, value: f64 },

    #[error("non-finite weight at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("spectral radius iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("(I - W) is numerically singular (condition estimate {condition:e})")]
    Singular { condition: f64 },

    #[error("node index {index} out of range for n = {n}")]
    InvalidNode { index: usize, n: usize },

    #[error("pair operation requires distinct nodes, got i = j = {0}")]
    SameNode(usize),

    #[error("node set must be non-empty")]
    EmptySet,

    #[error("node set contains duplicate node {0}")]
    DuplicateNode(usize),

    #[error("node set of size {size} exceeds the inclusion-exclusion cap {cap}")]
    SetTooLarge { size: usize, cap: usize },

    #[error("numerical degeneracy: denominator {value:e} for destination {dest} avoiding {avoided:?}")]
    NumericalDegeneracy {
        dest: usize,
        avoided: Vec<usize>,
        value: f64,
    },

    #[error("degenerate variance {variance:e} at node {node}")]
    DegenerateVariance { node: usize, variance: f64 },

    #[error("hitting weight z^h[{s}][{t}] is zero; distance undefined")]
    ZeroHittingWeight { s: usize, t: usize },

    #[error("no absorbing node reachable from start node {0}")]
    NoAbsorbingReachable(usize),

    #[error("matrix is not symmetric (max deviation {0:e})")]
    Asymmetric(f64),

    #[error("kernel has no positive eigenvalue")]
    NoPositiveEigenvalue,

    #[error("feature row {0} is the zero vector and cannot be normalized")]
    ZeroFeatureRow(usize),

    #[error("class {0} has no labeled example")]
    MissingClass(i64),

    #[error("enumeration guard violated: {0}")]
    Guard(String),

    #[error("could not draw a strongly connected graph in {0} attempts")]
    ConnectivityRetries(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for I/O failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            _ => 1,
        }
    }
}
