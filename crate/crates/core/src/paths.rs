//! Path-weight tables: the fundamental matrix `Z = (I - W)^{-1}`, the hitting
//! matrix `Z^h`, and every constrained path-set weight derived from them.
//!
//! Notation used in the docs below: `z_st` is the total weight of regular
//! paths from `s` to `t`, `z^h_st` the weight of hitting paths (the target
//! appears only once, at the end). A superscript `(+i)` restricts to paths
//! visiting `i`, `(-i)` to paths avoiding `i`, and `(-I)` / `(+I)` extend this
//! to node sets. All node arguments are internal indices `0..n`.
//!
//! Per-destination avoidance slices such as `z^{(-t)}` and `z^{h(-t)}` are
//! never stored: each entry is `O(1)` from `Z` and `Z^h`, so the tables stay
//! `O(n²)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::WeightMatrix;

/// Smallest admissible denominator in the hitting avoidance formulas.
pub const DENOMINATOR_GUARD: f64 = 1e-12;

/// `1 / (1 - ρ)` above which the tables are flagged as ill-conditioned.
pub const CONDITION_WARNING: f64 = 1e8;

/// Largest node set accepted by inclusion–exclusion (`2^|I|` terms).
pub const INCLUSION_EXCLUSION_CAP: usize = 20;

/// Regular paths or hitting paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Framework {
    Regular,
    Hitting,
}

/// Selects one of the three algebraically equivalent pair-avoidance formulas.
///
/// `First` eliminates both nodes at once from the unconstrained weights,
/// `Second` avoids `j` first and then `i`, `Third` avoids `i` first and then `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairForm {
    First,
    Second,
    Third,
}

impl PairForm {
    pub const ALL: [PairForm; 3] = [PairForm::First, PairForm::Second, PairForm::Third];
}

/// Matrix of path weights avoiding one node, indexed `[s, t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AvoidanceSlice {
    excluded: usize,
    values: DMatrix<f64>,
}

impl AvoidanceSlice {
    pub fn excluded(&self) -> usize {
        self.excluded
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.values
    }
}

impl std::ops::Index<(usize, usize)> for AvoidanceSlice {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.values[idx]
    }
}

/// Fundamental and hitting matrices with their marginal sums.
#[derive(Debug, Clone)]
pub struct PathWeightTables {
    w: DMatrix<f64>,
    rho: f64,
    z: DMatrix<f64>,
    zh: DMatrix<f64>,
    z_row: DVector<f64>,
    z_col: DVector<f64>,
    zh_row: DVector<f64>,
    zh_col: DVector<f64>,
    z_total: f64,
    zh_total: f64,
    condition: f64,
}

impl PathWeightTables {
    /// LU-factorizes `I - W` and solves against the identity.
    pub fn new(w: &WeightMatrix) -> Result<Self> {
        let n = w.n();
        let wm = w.matrix();
        let a = DMatrix::identity(n, n) - wm;
        let lu = a.clone().lu();
        let mut z = lu.try_inverse().ok_or(Error::Singular {
            condition: f64::INFINITY,
        })?;
        let condition = one_norm(&a) * one_norm(&z);
        if !condition.is_finite() || condition > 1.0 / f64::EPSILON || z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular { condition });
        }
        // Z is entrywise non-negative; LU may leave -0 or last-bit negatives
        // where the true weight is zero.
        z.apply(|v| *v = v.max(0.0));
        let mut zh = z.clone();
        for t in 0..n {
            let ztt = z[(t, t)];
            zh.column_mut(t).scale_mut(1.0 / ztt);
            zh[(t, t)] = 1.0;
        }
        let tables = Self::from_parts(wm.clone(), w.spectral_radius(), z, zh, condition);
        tables.check_single_denominators()?;
        Ok(tables)
    }

    fn from_parts(w: DMatrix<f64>, rho: f64, z: DMatrix<f64>, zh: DMatrix<f64>, condition: f64) -> Self {
        let n = z.nrows();
        let z_row = DVector::from_iterator(n, z.row_iter().map(|r| r.sum()));
        let z_col = DVector::from_iterator(n, z.column_iter().map(|c| c.sum()));
        let zh_row = DVector::from_iterator(n, zh.row_iter().map(|r| r.sum()));
        let zh_col = DVector::from_iterator(n, zh.column_iter().map(|c| c.sum()));
        let z_total = z_row.sum();
        let zh_total = zh_row.sum();
        PathWeightTables {
            w,
            rho,
            z,
            zh,
            z_row,
            z_col,
            zh_row,
            zh_col,
            z_total,
            zh_total,
            condition,
        }
    }

    // 1 - zh_ti zh_it = z^{(-i)}_tt / z_tt; positive whenever ρ < 1.
    fn check_single_denominators(&self) -> Result<()> {
        let n = self.n();
        for t in 0..n {
            for i in 0..n {
                if i == t {
                    continue;
                }
                let den = 1.0 - self.zh[(t, i)] * self.zh[(i, t)];
                if !(den >= DENOMINATOR_GUARD) {
                    return Err(Error::NumericalDegeneracy {
                        dest: t,
                        avoided: vec![i],
                        value: den,
                    });
                }
            }
        }
        Ok(())
    }

    /// Replaces one entry of `Z` without touching anything derived from it.
    /// Exists only to exercise the oracle's fault detection.
    #[doc(hidden)]
    pub fn with_corrupted_fundamental_entry(&self, s: usize, t: usize, delta: f64) -> Self {
        let mut z = self.z.clone();
        z[(s, t)] += delta;
        Self::from_parts(self.w.clone(), self.rho, z, self.zh.clone(), self.condition)
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn spectral_radius(&self) -> f64 {
        self.rho
    }

    /// 1-norm condition number of `I - W`.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// True when `1 / (1 - ρ)` exceeds [`CONDITION_WARNING`].
    pub fn is_ill_conditioned(&self) -> bool {
        1.0 / (1.0 - self.rho) > CONDITION_WARNING
    }

    pub fn fundamental(&self) -> &DMatrix<f64> {
        &self.z
    }

    /// `Z^h` with `z^h_st = z_st / z_tt` and unit diagonal.
    pub fn hitting(&self) -> &DMatrix<f64> {
        &self.zh
    }

    /// `z_{s•}`
    pub fn z_row_sums(&self) -> &DVector<f64> {
        &self.z_row
    }

    /// `z_{•t}`
    pub fn z_col_sums(&self) -> &DVector<f64> {
        &self.z_col
    }

    /// `z^h_{s•}`
    pub fn zh_row_sums(&self) -> &DVector<f64> {
        &self.zh_row
    }

    /// `z^h_{•t}`
    pub fn zh_col_sums(&self) -> &DVector<f64> {
        &self.zh_col
    }

    /// `z_{••}`, the total weight of all regular paths.
    pub fn z_total(&self) -> f64 {
        self.z_total
    }

    /// `z^h_{••}`, the total weight of all hitting paths.
    pub fn zh_total(&self) -> f64 {
        self.zh_total
    }

    #[inline]
    pub fn z(&self, s: usize, t: usize) -> f64 {
        self.z[(s, t)]
    }

    #[inline]
    pub fn zh(&self, s: usize, t: usize) -> f64 {
        self.zh[(s, t)]
    }

    /// `z^{(-i)}_st`: regular paths from `s` to `t` that never visit `i`.
    #[inline]
    pub fn z_avoid(&self, s: usize, t: usize, i: usize) -> f64 {
        if s == i || t == i {
            0.0
        } else {
            self.z[(s, t)] - self.zh[(s, i)] * self.z[(i, t)]
        }
    }

    /// `z^{h(-i)}_st`: hitting paths from `s` to `t` that never visit `i`.
    #[inline]
    pub fn zh_avoid(&self, s: usize, t: usize, i: usize) -> f64 {
        if s == i || t == i {
            0.0
        } else if s == t {
            1.0
        } else {
            let zh = &self.zh;
            (zh[(s, t)] - zh[(s, i)] * zh[(i, t)]) / (1.0 - zh[(t, i)] * zh[(i, t)])
        }
    }

    /// `z^{h(+i)}_st`: hitting paths from `s` to `t` visiting `i`.
    #[inline]
    pub fn zh_visit(&self, s: usize, t: usize, i: usize) -> f64 {
        if i == t || i == s {
            self.zh[(s, t)]
        } else {
            self.zh_avoid(s, i, t) * self.zh[(i, t)]
        }
    }

    /// `z^{(-t)}_{•i} = Σ_s z^{(-t)}_si`, in `O(1)`.
    #[inline]
    pub fn z_avoid_col_sum(&self, i: usize, t: usize) -> f64 {
        if i == t {
            0.0
        } else {
            self.z_col[i] - self.zh_col[t] * self.z[(t, i)]
        }
    }

    /// `z^{h(-t)}_{•i} = Σ_s z^{h(-t)}_si`, in `O(1)`.
    #[inline]
    pub fn zh_avoid_col_sum(&self, i: usize, t: usize) -> f64 {
        if i == t {
            0.0
        } else {
            let zh = &self.zh;
            (self.zh_col[i] - self.zh_col[t] * zh[(t, i)]) / (1.0 - zh[(i, t)] * zh[(t, i)])
        }
    }

    pub(crate) fn check_node(&self, i: usize) -> Result<()> {
        if i < self.n() {
            Ok(())
        } else {
            Err(Error::InvalidNode { index: i, n: self.n() })
        }
    }

    fn check_pair(&self, i: usize, j: usize) -> Result<()> {
        self.check_node(i)?;
        self.check_node(j)?;
        if i == j {
            return Err(Error::SameNode(i));
        }
        Ok(())
    }

    fn check_set(&self, set: &[usize]) -> Result<()> {
        if set.is_empty() {
            return Err(Error::EmptySet);
        }
        for (k, &i) in set.iter().enumerate() {
            self.check_node(i)?;
            if set[..k].contains(&i) {
                return Err(Error::DuplicateNode(i));
            }
        }
        Ok(())
    }

    fn tabulate(&self, f: impl FnMut(usize, usize) -> f64) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, f)
    }

    fn try_tabulate(&self, mut f: impl FnMut(usize, usize) -> Result<f64>) -> Result<DMatrix<f64>> {
        let n = self.n();
        let mut m = DMatrix::zeros(n, n);
        for t in 0..n {
            for s in 0..n {
                m[(s, t)] = f(s, t)?;
            }
        }
        Ok(m)
    }

    /// `z^{(+i)}_st = z^h_si z_it`.
    pub fn z_plus_node(&self, i: usize) -> Result<DMatrix<f64>> {
        self.check_node(i)?;
        Ok(self.tabulate(|s, t| {
            if t == i {
                self.z[(s, t)]
            } else {
                self.zh[(s, i)] * self.z[(i, t)]
            }
        }))
    }

    /// `z^{(-i)}_st = z_st - z^h_si z_it`, zero on row and column `i`.
    pub fn z_minus_node(&self, i: usize) -> Result<AvoidanceSlice> {
        self.check_node(i)?;
        Ok(AvoidanceSlice {
            excluded: i,
            values: self.tabulate(|s, t| self.z_avoid(s, t, i)),
        })
    }

    /// `z^{h(-i)}_st = (z^h_st - z^h_si z^h_it) / (1 - z^h_ti z^h_it)`.
    pub fn zh_minus_node(&self, i: usize) -> Result<AvoidanceSlice> {
        self.check_node(i)?;
        Ok(AvoidanceSlice {
            excluded: i,
            values: self.tabulate(|s, t| self.zh_avoid(s, t, i)),
        })
    }

    /// `z^{h(+i)}_st = z^{h(-t)}_si z^h_it` for `i != t`, `z^h_st` otherwise.
    pub fn zh_plus_node(&self, i: usize) -> Result<DMatrix<f64>> {
        self.check_node(i)?;
        Ok(self.tabulate(|s, t| self.zh_visit(s, t, i)))
    }

    /// Regular paths visiting both `i` and `j`:
    /// `z^{h(+i)}_sj z_jt + z^{h(+j)}_si z_it`.
    pub fn z_plus_pair(&self, i: usize, j: usize) -> Result<DMatrix<f64>> {
        self.check_pair(i, j)?;
        Ok(self.tabulate(|s, t| self.zh_visit(s, j, i) * self.z[(j, t)] + self.zh_visit(s, i, j) * self.z[(i, t)]))
    }

    fn z_minus_pair_entry(&self, s: usize, t: usize, i: usize, j: usize, form: PairForm) -> f64 {
        if s == i || s == j || t == i || t == j {
            return 0.0;
        }
        match form {
            PairForm::First => {
                self.z[(s, t)] - self.zh_avoid(s, i, j) * self.z[(i, t)] - self.zh_avoid(s, j, i) * self.z[(j, t)]
            }
            PairForm::Second => self.z_avoid(s, t, j) - self.zh_avoid(s, i, j) * self.z_avoid(i, t, j),
            PairForm::Third => self.z_avoid(s, t, i) - self.zh_avoid(s, j, i) * self.z_avoid(j, t, i),
        }
    }

    /// Regular paths avoiding both `i` and `j`, by any of the three forms.
    pub fn z_minus_pair(&self, i: usize, j: usize, form: PairForm) -> Result<DMatrix<f64>> {
        self.check_pair(i, j)?;
        Ok(self.tabulate(|s, t| self.z_minus_pair_entry(s, t, i, j, form)))
    }

    /// `z^{h(-{i,j})}_st`. Zero when `t ∈ {i, j}` or `s ∈ {i, j}`, one when
    /// `s == t` otherwise.
    pub fn zh_minus_pair_entry(&self, s: usize, t: usize, i: usize, j: usize, form: PairForm) -> Result<f64> {
        if t == i || t == j || s == i || s == j {
            return Ok(0.0);
        }
        if s == t {
            return Ok(1.0);
        }
        let zh = &self.zh;
        let (num, den) = match form {
            PairForm::First => (
                zh[(s, t)] - self.zh_avoid(s, i, j) * zh[(i, t)] - self.zh_avoid(s, j, i) * zh[(j, t)],
                1.0 - self.zh_avoid(t, i, j) * zh[(i, t)] - self.zh_avoid(t, j, i) * zh[(j, t)],
            ),
            PairForm::Second => (
                self.zh_avoid(s, t, j) - self.zh_avoid(s, i, j) * self.zh_avoid(i, t, j),
                1.0 - self.zh_avoid(t, i, j) * self.zh_avoid(i, t, j),
            ),
            PairForm::Third => (
                self.zh_avoid(s, t, i) - self.zh_avoid(s, j, i) * self.zh_avoid(j, t, i),
                1.0 - self.zh_avoid(t, j, i) * self.zh_avoid(j, t, i),
            ),
        };
        if !(den >= DENOMINATOR_GUARD) {
            return Err(Error::NumericalDegeneracy {
                dest: t,
                avoided: vec![i, j],
                value: den,
            });
        }
        Ok(num / den)
    }

    /// Hitting paths avoiding both `i` and `j`, by any of the three forms.
    pub fn zh_minus_pair(&self, i: usize, j: usize, form: PairForm) -> Result<DMatrix<f64>> {
        self.check_pair(i, j)?;
        self.try_tabulate(|s, t| self.zh_minus_pair_entry(s, t, i, j, form))
    }

    /// `z^{h(+{i,j})}_st` for `i != j`.
    pub fn zh_plus_pair_entry(&self, s: usize, t: usize, i: usize, j: usize) -> Result<f64> {
        if s == t {
            return Ok(0.0);
        }
        if t == j {
            return Ok(self.zh_visit(s, t, i));
        }
        if t == i {
            return Ok(self.zh_visit(s, t, j));
        }
        let first = self.zh_minus_pair_entry(s, i, j, t, PairForm::Second)? * self.zh_visit(i, t, j);
        let second = self.zh_minus_pair_entry(s, j, i, t, PairForm::Second)? * self.zh_visit(j, t, i);
        Ok(first + second)
    }

    /// Hitting paths visiting both `i` and `j`.
    pub fn zh_plus_pair(&self, i: usize, j: usize) -> Result<DMatrix<f64>> {
        self.check_pair(i, j)?;
        self.try_tabulate(|s, t| self.zh_plus_pair_entry(s, t, i, j))
    }

    /// `z^{(-I)}` by recursive elimination in the order given: removing node
    /// `i` from the current avoidance table `M` maps
    /// `M_st -> M_st - M_si M_it / M_ii`, which is the path-set recursion
    /// `z^{(-S ∪ i)} = z^{(-S)} - z^{h(-S)}_si z^{(-S)}_it`.
    pub fn z_minus_set(&self, set: &[usize]) -> Result<DMatrix<f64>> {
        self.check_set(set)?;
        let mut m = self.z.clone();
        for (k, &i) in set.iter().enumerate() {
            let pivot = m[(i, i)];
            if !(pivot >= DENOMINATOR_GUARD) {
                return Err(Error::NumericalDegeneracy {
                    dest: i,
                    avoided: set[..k].to_vec(),
                    value: pivot,
                });
            }
            let col = m.column(i).clone_owned();
            let row = m.row(i).clone_owned() / pivot;
            m -= col * row;
            m.row_mut(i).fill(0.0);
            m.column_mut(i).fill(0.0);
        }
        Ok(m)
    }

    /// `z^{h(-I)}_st = z^{(-I)}_st / z^{(-I)}_tt` for `t ∉ I`, zero otherwise.
    pub fn zh_minus_set(&self, set: &[usize]) -> Result<DMatrix<f64>> {
        let m = self.z_minus_set(set)?;
        let n = self.n();
        let mut out = DMatrix::zeros(n, n);
        for t in 0..n {
            if set.contains(&t) {
                continue;
            }
            let den = m[(t, t)];
            if !(den >= DENOMINATOR_GUARD) {
                return Err(Error::NumericalDegeneracy {
                    dest: t,
                    avoided: set.to_vec(),
                    value: den,
                });
            }
            for s in 0..n {
                out[(s, t)] = m[(s, t)] / den;
            }
            out[(t, t)] = 1.0;
        }
        Ok(out)
    }

    /// Paths visiting every node of `set`, by inclusion–exclusion over the
    /// avoidance tables of all subsets.
    pub fn z_plus_set(&self, set: &[usize], framework: Framework) -> Result<DMatrix<f64>> {
        self.check_set(set)?;
        if set.len() > INCLUSION_EXCLUSION_CAP {
            return Err(Error::SetTooLarge {
                size: set.len(),
                cap: INCLUSION_EXCLUSION_CAP,
            });
        }
        let mut acc = match framework {
            Framework::Regular => self.z.clone(),
            Framework::Hitting => self.zh.clone(),
        };
        for mask in 1u32..(1u32 << set.len()) {
            let subset: Vec<usize> = (0..set.len())
                .filter(|&k| mask & (1 << k) != 0)
                .map(|k| set[k])
                .collect();
            let term = match framework {
                Framework::Regular => self.z_minus_set(&subset)?,
                Framework::Hitting => self.zh_minus_set(&subset)?,
            };
            if subset.len() % 2 == 1 {
                acc -= term;
            } else {
                acc += term;
            }
        }
        Ok(acc)
    }

    /// `Σ_{℘ ∈ P_st} η(i ∈ ℘) w(℘) = z_si z_it`.
    pub fn occ_weight_node(&self, i: usize) -> Result<DMatrix<f64>> {
        self.check_node(i)?;
        Ok(self.tabulate(|s, t| self.z[(s, i)] * self.z[(i, t)]))
    }

    /// `Σ_{℘ ∈ P_st} η(i) η(j) w(℘) = z_si z_ij z_jt + z_sj z_ji z_it - δ_ij z_si z_jt`.
    pub fn occ_weight_pair(&self, i: usize, j: usize) -> Result<DMatrix<f64>> {
        self.check_node(i)?;
        self.check_node(j)?;
        let z = &self.z;
        let delta = if i == j { 1.0 } else { 0.0 };
        Ok(self.tabulate(|s, t| {
            z[(s, i)] * z[(i, j)] * z[(j, t)] + z[(s, j)] * z[(j, i)] * z[(i, t)] - delta * z[(s, i)] * z[(j, t)]
        }))
    }

    /// Occurrences of `i` on hitting paths: `z^{(-t)}_si z^h_it + δ_it z^h_st`.
    pub fn occ_hit_weight_node(&self, i: usize) -> Result<DMatrix<f64>> {
        self.check_node(i)?;
        Ok(self.tabulate(|s, t| self.occ_hit_node_entry(s, t, i)))
    }

    #[inline]
    pub(crate) fn occ_hit_node_entry(&self, s: usize, t: usize, i: usize) -> f64 {
        if i == t {
            self.zh[(s, t)]
        } else {
            self.z_avoid(s, i, t) * self.zh[(i, t)]
        }
    }

    /// Co-occurrences of `i` and `j` on hitting paths (`i == j` allowed).
    pub fn occ_hit_weight_pair(&self, i: usize, j: usize) -> Result<DMatrix<f64>> {
        self.check_node(i)?;
        self.check_node(j)?;
        Ok(self.tabulate(|s, t| self.occ_hit_pair_entry(s, t, i, j)))
    }

    pub(crate) fn occ_hit_pair_entry(&self, s: usize, t: usize, i: usize, j: usize) -> f64 {
        let zh = &self.zh;
        let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        self.z_avoid(s, i, t) * self.z_avoid(i, j, t) * zh[(j, t)]
            + self.z_avoid(s, j, t) * self.z_avoid(j, i, t) * zh[(i, t)]
            - d(i, j) * self.z_avoid(s, i, t) * zh[(j, t)]
            + d(j, t) * self.z_avoid(s, i, t) * zh[(i, t)]
            + d(i, t) * self.z_avoid(s, j, t) * zh[(j, t)]
            + d(i, t) * d(j, t) * zh[(s, t)]
    }

    /// Closed-form derivatives of `Z` with respect to the weight `w_ij`.
    pub fn weight_derivative_identities(&self, i: usize, j: usize) -> Result<DerivativeIdentities<'_>> {
        self.check_node(i)?;
        self.check_node(j)?;
        Ok(DerivativeIdentities {
            first: self.tabulate(|s, t| self.z[(s, i)] * self.z[(j, t)]),
            tables: self,
            i,
            j,
        })
    }

    /// `∂z_st / ∂w_ij = z_si z_jt`.
    #[inline]
    pub fn first_derivative(&self, s: usize, t: usize, i: usize, j: usize) -> f64 {
        self.z[(s, i)] * self.z[(j, t)]
    }

    /// `∂²z_st / ∂w_kl ∂w_ij = z_sk z_li z_jt + z_si z_jk z_lt`.
    #[inline]
    pub fn second_derivative(&self, s: usize, t: usize, i: usize, j: usize, k: usize, l: usize) -> f64 {
        let z = &self.z;
        z[(s, k)] * z[(l, i)] * z[(j, t)] + z[(s, i)] * z[(j, k)] * z[(l, t)]
    }
}

/// First-derivative matrix of `Z` with respect to one weight, plus an
/// evaluator for the mixed second derivatives.
#[derive(Debug)]
pub struct DerivativeIdentities<'a> {
    first: DMatrix<f64>,
    tables: &'a PathWeightTables,
    i: usize,
    j: usize,
}

impl DerivativeIdentities<'_> {
    /// `[∂z_st / ∂w_ij]_{s,t}`
    pub fn first(&self) -> &DMatrix<f64> {
        &self.first
    }

    /// `∂²z_st / ∂w_kl ∂w_ij`
    pub fn second(&self, s: usize, t: usize, k: usize, l: usize) -> f64 {
        self.tables.second_derivative(s, t, self.i, self.j, k, l)
    }
}

/// Same as [`PathWeightTables::new`].
pub fn fundamental_matrix(w: &WeightMatrix) -> Result<PathWeightTables> {
    PathWeightTables::new(w)
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.abs().sum()).fold(0.0, f64::max)
}
