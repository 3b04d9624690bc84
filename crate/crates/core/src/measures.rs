//! Expectations of node presence and occurrence under the path distribution,
//! the covariance/correlation kernels built from them, the bag-of-paths
//! distance, and absorption probabilities of killed chains.
//!
//! Regular-path moments normalize by `z_{••}` and hitting-path moments by
//! `z^h_{••}`. Hitting second moments need a sum over destinations `t`; every
//! term of that sum is `O(1)` from `Z`, `Z^h` and the per-destination column
//! sums, so the whole matrix costs `O(n³)` time and `O(n²)` memory. Rows are
//! evaluated in parallel; each entry sums over `t` in a fixed order, so the
//! result does not depend on the thread count.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::WeightMatrix;
use crate::paths::{Framework, PathWeightTables, DENOMINATOR_GUARD};

/// Variances at or below this value make a correlation undefined.
pub const VARIANCE_FLOOR: f64 = 1e-14;

/// Presence indicator `δ(i ∈ ℘)` or occurrence count `η(i ∈ ℘)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Statistic {
    Presence,
    Occurrence,
}

/// First and second moments of one node statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    pub first: DVector<f64>,
    pub second: DMatrix<f64>,
    pub framework: Framework,
    pub statistic: Statistic,
}

impl MomentSet {
    /// `E[x_i x_j] - E[x_i] E[x_j]`, symmetrized.
    pub fn covariance(&self) -> DMatrix<f64> {
        let raw = &self.second - &self.first * self.first.transpose();
        (&raw + raw.transpose()) * 0.5
    }
}

/// `E[δ(i ∈ ℘)]` for every node.
pub fn presence_betweenness(t: &PathWeightTables, framework: Framework) -> DVector<f64> {
    let n = t.n();
    match framework {
        Framework::Regular => {
            let total = t.z_total();
            DVector::from_fn(n, |i, _| t.zh_col_sums()[i] * t.z_row_sums()[i] / total)
        }
        Framework::Hitting => {
            let total = t.zh_total();
            DVector::from_fn(n, |i, _| {
                let through: f64 = (0..n)
                    .filter(|&d| d != i)
                    .map(|d| t.zh_avoid_col_sum(i, d) * t.zh(i, d))
                    .sum();
                (through + t.zh_col_sums()[i]) / total
            })
        }
    }
}

/// `E[η(i ∈ ℘)]` for every node.
pub fn occurrence_betweenness(t: &PathWeightTables, framework: Framework) -> DVector<f64> {
    let n = t.n();
    match framework {
        Framework::Regular => {
            let total = t.z_total();
            DVector::from_fn(n, |i, _| t.z_col_sums()[i] * t.z_row_sums()[i] / total)
        }
        Framework::Hitting => {
            let total = t.zh_total();
            DVector::from_fn(n, |i, _| {
                let through: f64 = (0..n)
                    .filter(|&d| d != i)
                    .map(|d| t.z_avoid_col_sum(i, d) * t.zh(i, d))
                    .sum();
                (through + t.zh_col_sums()[i]) / total
            })
        }
    }
}

fn kron(i: usize, j: usize) -> f64 {
    if i == j {
        1.0
    } else {
        0.0
    }
}

fn assemble_rows(n: usize, row: impl Fn(usize) -> Result<Vec<f64>> + Sync + Send) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = (0..n).into_par_iter().map(row).collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// `E[δ(i ∈ ℘) δ(j ∈ ℘)]` with its first moments.
pub fn copresence_moments(t: &PathWeightTables, framework: Framework) -> Result<MomentSet> {
    let n = t.n();
    let first = presence_betweenness(t, framework);
    let second = match framework {
        Framework::Regular => {
            let total = t.z_total();
            let (zh_col, z_row) = (t.zh_col_sums(), t.z_row_sums());
            // z^{h(+i)}_{•j}
            let visit_col = |i: usize, j: usize| {
                if i == j {
                    zh_col[i]
                } else {
                    t.zh_avoid_col_sum(i, j) * t.zh(i, j)
                }
            };
            DMatrix::from_fn(n, n, |i, j| {
                (visit_col(i, j) * z_row[j] + visit_col(j, i) * z_row[i] - kron(i, j) * zh_col[i] * z_row[i]) / total
            })
        }
        Framework::Hitting => {
            // col[(d, b)] = z^{h(-d)}_{•b}
            let col = DMatrix::from_fn(n, n, |d, b| t.zh_avoid_col_sum(b, d));
            let total = t.zh_total();
            assemble_rows(n, |i| {
                let mut row = vec![0.0; n];
                for (j, out) in row.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for d in 0..n {
                        if d == i || d == j {
                            continue;
                        }
                        if i == j {
                            acc += col[(d, i)] * t.zh(i, d);
                            continue;
                        }
                        let s_ij = t.zh_avoid(i, j, d);
                        let s_ji = t.zh_avoid(j, i, d);
                        let den = 1.0 - s_ij * s_ji;
                        if !(den >= DENOMINATOR_GUARD) {
                            return Err(Error::NumericalDegeneracy {
                                dest: i,
                                avoided: vec![j, d],
                                value: den,
                            });
                        }
                        // z^{h(-{j,d})}_{•i} and z^{h(-{i,d})}_{•j}
                        let avoid_jd = (col[(d, i)] - col[(d, j)] * s_ji) / den;
                        let avoid_id = (col[(d, j)] - col[(d, i)] * s_ij) / den;
                        acc += avoid_jd * s_ij * t.zh(j, d) + avoid_id * s_ji * t.zh(i, d);
                    }
                    let boundary = t.zh_avoid_col_sum(i, j) * t.zh(i, j)
                        + t.zh_avoid_col_sum(j, i) * t.zh(j, i)
                        + kron(i, j) * t.zh_col_sums()[i];
                    *out = (acc + boundary) / total;
                }
                Ok(row)
            })?
        }
    };
    Ok(MomentSet {
        first,
        second,
        framework,
        statistic: Statistic::Presence,
    })
}

/// `E[η(i ∈ ℘) η(j ∈ ℘)]` with its first moments.
pub fn cooccurrence_moments(t: &PathWeightTables, framework: Framework) -> Result<MomentSet> {
    let n = t.n();
    let first = occurrence_betweenness(t, framework);
    let second = match framework {
        Framework::Regular => {
            let total = t.z_total();
            let (z_col, z_row) = (t.z_col_sums(), t.z_row_sums());
            DMatrix::from_fn(n, n, |i, j| {
                (z_col[i] * t.z(i, j) * z_row[j] + z_col[j] * t.z(j, i) * z_row[i] - kron(i, j) * z_col[i] * z_row[j])
                    / total
            })
        }
        Framework::Hitting => {
            let total = t.zh_total();
            assemble_rows(n, |i| {
                let mut row = vec![0.0; n];
                for (j, out) in row.iter_mut().enumerate() {
                    let delta = kron(i, j);
                    let mut acc = 0.0;
                    for d in 0..n {
                        if d == i || d == j {
                            continue;
                        }
                        let col_i = t.z_avoid_col_sum(i, d);
                        let col_j = t.z_avoid_col_sum(j, d);
                        acc += col_i * t.z_avoid(i, j, d) * t.zh(j, d) + col_j * t.z_avoid(j, i, d) * t.zh(i, d)
                            - delta * col_i * t.zh(i, d);
                    }
                    let boundary = t.z_avoid_col_sum(i, j) * t.zh(i, j)
                        + t.z_avoid_col_sum(j, i) * t.zh(j, i)
                        + delta * t.zh_col_sums()[i];
                    *out = (acc + boundary) / total;
                }
                Ok(row)
            })?
        }
    };
    Ok(MomentSet {
        first,
        second,
        framework,
        statistic: Statistic::Occurrence,
    })
}

/// The eight covariance/correlation kernels and the bag-of-paths distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KernelMethod {
    Cov,
    Cor,
    CovH,
    CorH,
    NCov,
    NCor,
    NCovH,
    NCorH,
    BopDist,
}

impl KernelMethod {
    pub const ALL: [KernelMethod; 9] = [
        KernelMethod::Cov,
        KernelMethod::Cor,
        KernelMethod::CovH,
        KernelMethod::CorH,
        KernelMethod::NCov,
        KernelMethod::NCor,
        KernelMethod::NCovH,
        KernelMethod::NCorH,
        KernelMethod::BopDist,
    ];

    pub const KERNELS: [KernelMethod; 8] = [
        KernelMethod::Cov,
        KernelMethod::Cor,
        KernelMethod::CovH,
        KernelMethod::CorH,
        KernelMethod::NCov,
        KernelMethod::NCor,
        KernelMethod::NCovH,
        KernelMethod::NCorH,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelMethod::Cov => "cov",
            KernelMethod::Cor => "cor",
            KernelMethod::CovH => "covh",
            KernelMethod::CorH => "corh",
            KernelMethod::NCov => "ncov",
            KernelMethod::NCor => "ncor",
            KernelMethod::NCovH => "ncovh",
            KernelMethod::NCorH => "ncorh",
            KernelMethod::BopDist => "bopdist",
        }
    }

    /// `(framework, statistic, is_correlation)`, or `None` for the distance.
    pub fn parts(self) -> Option<(Framework, Statistic, bool)> {
        use Framework::*;
        use Statistic::*;
        Some(match self {
            KernelMethod::Cov => (Regular, Presence, false),
            KernelMethod::Cor => (Regular, Presence, true),
            KernelMethod::CovH => (Hitting, Presence, false),
            KernelMethod::CorH => (Hitting, Presence, true),
            KernelMethod::NCov => (Regular, Occurrence, false),
            KernelMethod::NCor => (Regular, Occurrence, true),
            KernelMethod::NCovH => (Hitting, Occurrence, false),
            KernelMethod::NCorH => (Hitting, Occurrence, true),
            KernelMethod::BopDist => return None,
        })
    }

    pub fn is_distance(self) -> bool {
        self == KernelMethod::BopDist
    }
}

impl fmt::Display for KernelMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelMethod::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

/// Node-by-node similarity (or distance) matrix tagged with its method.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub method: KernelMethod,
    pub values: DMatrix<f64>,
    pub beta: Option<f64>,
}

impl KernelMatrix {
    /// Smallest and largest eigenvalue of the symmetric part.
    pub fn eigen_range(&self) -> (f64, f64) {
        eigen_range(&self.values)
    }

    /// `λ_min >= -tol · λ_max`.
    pub fn is_psd(&self, tol: f64) -> bool {
        let (lo, hi) = self.eigen_range();
        lo >= -tol * hi.abs().max(f64::MIN_POSITIVE)
    }
}

/// Smallest and largest eigenvalue of `(K + Kᵀ) / 2`.
pub fn eigen_range(k: &DMatrix<f64>) -> (f64, f64) {
    let sym = (k + k.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym).eigenvalues;
    let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Moments for a kernel method's framework and statistic.
pub fn moments(t: &PathWeightTables, framework: Framework, statistic: Statistic) -> Result<MomentSet> {
    match statistic {
        Statistic::Presence => copresence_moments(t, framework),
        Statistic::Occurrence => cooccurrence_moments(t, framework),
    }
}

/// Computes a kernel: moments, then covariance, then (optionally) correlation.
pub fn kernel(t: &PathWeightTables, method: KernelMethod, beta: Option<f64>) -> Result<KernelMatrix> {
    let Some((framework, statistic, correlation)) = method.parts() else {
        let mut k = bop_distance(t)?;
        k.beta = beta;
        return Ok(k);
    };
    let cov = moments(t, framework, statistic)?.covariance();
    let values = if correlation { correlation_from(&cov)? } else { cov };
    Ok(KernelMatrix { method, values, beta })
}

/// `cor_ij = cov_ij / sqrt(cov_ii cov_jj)` with an exact unit diagonal.
pub fn correlation_from(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    let mut scale = Vec::with_capacity(n);
    for i in 0..n {
        let v = cov[(i, i)];
        if !(v > VARIANCE_FLOOR) {
            return Err(Error::DegenerateVariance { node: i, variance: v });
        }
        scale.push(v.sqrt());
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            cov[(i, j)] / (scale[i] * scale[j])
        }
    }))
}

/// `d_ij = (φ(i,j) + φ(j,i)) / 2` with `φ(i,j) = -ln z^h_ij`, zero diagonal.
pub fn bop_distance(t: &PathWeightTables) -> Result<KernelMatrix> {
    let n = t.n();
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (t.zh(i, j), t.zh(j, i));
            if !(a > 0.0) {
                return Err(Error::ZeroHittingWeight { s: i, t: j });
            }
            if !(b > 0.0) {
                return Err(Error::ZeroHittingWeight { s: j, t: i });
            }
            let v = 0.5 * (-a.ln() - b.ln());
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(KernelMatrix {
        method: KernelMethod::BopDist,
        values: d,
        beta: None,
    })
}

/// Probability that a killed walk started at `s` is absorbed at each node of
/// `absorbing`: `z_st / Σ_{a ∈ absorbing} z_sa`.
pub fn absorption_probability(w: &WeightMatrix, absorbing: &[usize], s: usize) -> Result<DVector<f64>> {
    let n = w.n();
    if absorbing.is_empty() {
        return Err(Error::EmptySet);
    }
    for (k, &a) in absorbing.iter().enumerate() {
        if a >= n {
            return Err(Error::InvalidNode { index: a, n });
        }
        if absorbing[..k].contains(&a) {
            return Err(Error::DuplicateNode(a));
        }
        if w.matrix().row(a).iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidArgument(format!(
                "absorbing node {a} has outgoing weight"
            )));
        }
    }
    if s >= n {
        return Err(Error::InvalidNode { index: s, n });
    }
    let t = PathWeightTables::new(w)?;
    let denom: f64 = absorbing.iter().map(|&a| t.z(s, a)).sum();
    if !(denom > 0.0) {
        return Err(Error::NoAbsorbingReachable(s));
    }
    Ok(DVector::from_iterator(
        absorbing.len(),
        absorbing.iter().map(|&a| t.z(s, a) / denom),
    ))
}
