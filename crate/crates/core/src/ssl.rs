//! Semi-supervised node classification on bag-of-paths features.
//!
//! Kernels (or the centred distance) are turned into low-dimensional node
//! features by classical MDS, a one-vs-rest logistic model is fitted on the
//! labeled nodes and evaluated on the rest, and `(β, reg)` are tuned by an
//! inner cross-validation on the labeled nodes only.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Edge, WeightMatrix, WeightedGraph};
use crate::measures::{bop_distance, correlation_from, moments, KernelMethod};
use crate::paths::{Framework, PathWeightTables};

pub const BETA_GRID: [f64; 8] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0];
pub const REG_GRID: [f64; 5] = [1e-2, 1e-1, 1.0, 10.0, 100.0];
pub const DEFAULT_DIMENSIONS: usize = 5;

const EIGEN_TIE: f64 = 1e-12;
const POSITIVE_EIGEN: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-8;
const NEWTON_MAX_ITER: usize = 200;
const GRADIENT_TOL: f64 = 1e-8;
const SCORE_TIE: f64 = 1e-9;
const SBM_RETRIES: usize = 100;

/// How eigenvectors are scaled into features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureOption {
    /// `u_k √λ_k`
    SqrtEigenvalue,
    /// sqrt-eigenvalue rows rescaled to unit length
    UnitNorm,
}

impl FeatureOption {
    pub const ALL: [FeatureOption; 2] = [FeatureOption::SqrtEigenvalue, FeatureOption::UnitNorm];

    pub fn name(self) -> &'static str {
        match self {
            FeatureOption::SqrtEigenvalue => "sqrt-eigenvalue",
            FeatureOption::UnitNorm => "unit-norm",
        }
    }
}

impl fmt::Display for FeatureOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub x: DMatrix<f64>,
    pub option: FeatureOption,
}

impl FeatureMatrix {
    pub fn dims(&self) -> usize {
        self.x.ncols()
    }
}

fn symmetry_error(m: &DMatrix<f64>) -> f64 {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() / scale
}

/// Classical MDS double centering `K = -½ H D⁽²⁾ H`.
pub fn center_distance_matrix(d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if d.nrows() != d.ncols() {
        return Err(Error::NotSquare {
            rows: d.nrows(),
            cols: d.ncols(),
        });
    }
    let asym = symmetry_error(d);
    if asym > SYMMETRY_TOL {
        return Err(Error::Asymmetric(asym));
    }
    let n = d.nrows();
    let sq = d.map(|v| v * v);
    let row_mean = DVector::from_fn(n, |i, _| sq.row(i).mean());
    let col_mean = DVector::from_fn(n, |j, _| sq.column(j).mean());
    let all = sq.mean();
    let k = DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - row_mean[i] - col_mean[j] + all));
    Ok((&k + k.transpose()) * 0.5)
}

/// Top-`p` eigenvectors of a symmetric kernel, scaled per `option`.
///
/// Eigenpairs are sorted by decreasing eigenvalue and only eigenvalues above
/// `1e-12 λ_max` are kept. Each eigenvector's largest-magnitude component is
/// made positive; eigenvalues within `1e-12` of each other are ordered by the
/// lexicographic order of their eigenvectors.
pub fn extract_features(k: &DMatrix<f64>, p: usize, option: FeatureOption) -> Result<FeatureMatrix> {
    let (values, vectors) = eigen_sorted(k)?;
    scale_features(&values, &vectors, p, option)
}

fn eigen_sorted(k: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
    if k.nrows() != k.ncols() {
        return Err(Error::NotSquare {
            rows: k.nrows(),
            cols: k.ncols(),
        });
    }
    let asym = symmetry_error(k);
    if asym > SYMMETRY_TOL {
        return Err(Error::Asymmetric(asym));
    }
    let sym = (k + k.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut pairs: Vec<(f64, DVector<f64>)> = (0..k.nrows())
        .map(|c| {
            let mut v: DVector<f64> = eig.eigenvectors.column(c).into_owned();
            let pivot = v
                .iter()
                .copied()
                .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
            if pivot < 0.0 {
                v.neg_mut();
            }
            (eig.eigenvalues[c], v)
        })
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let lex = |a: &DVector<f64>, b: &DVector<f64>| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    let mut start = 0;
    while start < pairs.len() {
        let mut end = start + 1;
        while end < pairs.len() && (pairs[end - 1].0 - pairs[end].0).abs() <= EIGEN_TIE {
            end += 1;
        }
        pairs[start..end].sort_by(|a, b| lex(&a.1, &b.1));
        start = end;
    }
    let top = pairs.first().map_or(0.0, |p| p.0);
    if !(top > 0.0) {
        return Err(Error::NoPositiveEigenvalue);
    }
    let kept: Vec<(f64, DVector<f64>)> = pairs.into_iter().filter(|p| p.0 > POSITIVE_EIGEN * top).collect();
    Ok(kept.into_iter().unzip())
}

fn scale_features(values: &[f64], vectors: &[DVector<f64>], p: usize, option: FeatureOption) -> Result<FeatureMatrix> {
    if p == 0 {
        return Err(Error::InvalidArgument("feature dimension must be positive".into()));
    }
    let dims = p.min(values.len());
    let n = vectors[0].len();
    let mut x = DMatrix::from_fn(n, dims, |i, c| vectors[c][i] * values[c].sqrt());
    if option == FeatureOption::UnitNorm {
        for i in 0..n {
            let norm = x.row(i).norm();
            if norm == 0.0 {
                return Err(Error::ZeroFeatureRow(i));
            }
            x.row_mut(i).unscale_mut(norm);
        }
    }
    Ok(FeatureMatrix { x, option })
}

/// One-vs-rest L2-regularized logistic regression.
///
/// Each class `c` gets weights minimizing
/// `Σ_i log(1 + exp(-y_i (wᵀx_i + b))) + (reg / 2)‖w‖²` with `y_i = ±1`;
/// the intercept `b` is not penalized. Newton iterations with step halving
/// stop once the gradient max-norm drops below `1e-8` or after 200 steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    classes: Vec<i64>,
    /// one row per class: weights followed by the intercept
    coef: DMatrix<f64>,
}

impl LogisticModel {
    pub fn fit(x: &DMatrix<f64>, labels: &[i64], reg: f64) -> Result<Self> {
        if x.nrows() != labels.len() || labels.is_empty() {
            return Err(Error::InvalidArgument(
                "feature rows and labels differ in length".into(),
            ));
        }
        if !(reg > 0.0) || !reg.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "regularization must be positive, got {reg}"
            )));
        }
        let mut classes: Vec<i64> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let design = x.clone().insert_column(x.ncols(), 1.0);
        let mut coef = DMatrix::zeros(classes.len(), design.ncols());
        for (c, &class) in classes.iter().enumerate() {
            let y: Vec<f64> = labels.iter().map(|&l| if l == class { 1.0 } else { 0.0 }).collect();
            let w = fit_binary(&design, &y, reg);
            coef.row_mut(c).copy_from(&w.transpose());
        }
        Ok(LogisticModel { classes, coef })
    }

    pub fn classes(&self) -> &[i64] {
        &self.classes
    }

    /// Decision values, one column per class.
    pub fn scores(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let design = x.clone().insert_column(x.ncols(), 1.0);
        design * self.coef.transpose()
    }

    /// Highest-scoring class; scores within `1e-9` of the best go to the
    /// lowest class id.
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<i64> {
        let scores = self.scores(x);
        (0..x.nrows())
            .map(|i| {
                let row = scores.row(i);
                let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let c = row.iter().position(|&s| s >= best - SCORE_TIE).unwrap_or(0);
                self.classes[c]
            })
            .collect()
    }
}

fn logistic_objective(design: &DMatrix<f64>, y: &[f64], w: &DVector<f64>, reg: f64) -> f64 {
    let p = w.len() - 1;
    let margins = design * w;
    let loss: f64 = margins
        .iter()
        .zip(y)
        .map(|(&m, &yi)| {
            let s = if yi > 0.5 { -m } else { m };
            // log(1 + e^s) without overflow
            if s > 0.0 {
                s + (-s).exp().ln_1p()
            } else {
                s.exp().ln_1p()
            }
        })
        .sum();
    loss + 0.5 * reg * w.rows(0, p).norm_squared()
}

fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

fn fit_binary(design: &DMatrix<f64>, y: &[f64], reg: f64) -> DVector<f64> {
    let (rows, d) = design.shape();
    let p = d - 1;
    let mut w = DVector::zeros(d);
    let mut objective = logistic_objective(design, y, &w, reg);
    for _ in 0..NEWTON_MAX_ITER {
        let margins = design * &w;
        let prob: Vec<f64> = margins.iter().map(|&m| sigmoid(m)).collect();
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        for i in 0..rows {
            let xi = design.row(i);
            let r = prob[i] - y[i];
            let s = prob[i] * (1.0 - prob[i]);
            for a in 0..d {
                grad[a] += r * xi[a];
                for b in 0..d {
                    hess[(a, b)] += s * xi[a] * xi[b];
                }
            }
        }
        for a in 0..p {
            grad[a] += reg * w[a];
            hess[(a, a)] += reg;
        }
        if grad.amax() < GRADIENT_TOL {
            break;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                // only the intercept can be flat; a tiny ridge keeps it solvable
                for a in 0..d {
                    hess[(a, a)] += 1e-10;
                }
                match hess.lu().solve(&grad) {
                    Some(s) => s,
                    None => break,
                }
            }
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..50 {
            let trial = &w - &step * t;
            let value = logistic_objective(design, y, &trial, reg);
            if value <= objective {
                w = trial;
                objective = value;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    w
}

/// Fits on the labeled rows and predicts every row with `labels[i] == None`.
pub fn train_and_predict(features: &FeatureMatrix, labels: &[Option<i64>], reg: f64) -> Result<Vec<i64>> {
    let x = &features.x;
    if x.nrows() != labels.len() {
        return Err(Error::InvalidArgument(
            "feature rows and labels differ in length".into(),
        ));
    }
    let train: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    let test: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_none()).collect();
    if train.is_empty() {
        return Err(Error::InvalidArgument("no labeled rows".into()));
    }
    let y: Vec<i64> = train.iter().map(|&i| labels[i].unwrap()).collect();
    let model = LogisticModel::fit(&x.select_rows(&train), &y, reg)?;
    Ok(model.predict(&x.select_rows(&test)))
}

/// Nested cross-validation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub rate: f64,
    pub folds: usize,
    pub inner_folds: usize,
    pub reps: usize,
    pub dims: usize,
    pub betas: Vec<f64>,
    pub regs: Vec<f64>,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            rate: 0.2,
            folds: 5,
            inner_folds: 5,
            reps: 5,
            dims: DEFAULT_DIMENSIONS,
            betas: BETA_GRID.to_vec(),
            regs: REG_GRID.to_vec(),
        }
    }
}

impl CvConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.rate > 0.0 && self.rate < 1.0) {
            return bad("labeling rate must lie in (0, 1)");
        }
        if self.folds == 0 || self.reps == 0 || self.inner_folds < 2 {
            return bad("need folds >= 1, reps >= 1 and inner folds >= 2");
        }
        if self.dims == 0 {
            return bad("feature dimension must be positive");
        }
        if self.betas.is_empty() || self.regs.is_empty() {
            return bad("empty hyperparameter grid");
        }
        if self
            .betas
            .iter()
            .chain(&self.regs)
            .any(|v| !(*v > 0.0) || !v.is_finite())
        {
            return bad("grid values must be positive and finite");
        }
        Ok(())
    }
}

/// Features for every `(method, β, option)` that could be computed.
///
/// A `β` whose weight matrix or kernel is rejected (spectral radius, singular
/// `I - W`, degenerate variance, ...) is recorded in `skipped` and left out of
/// the grid for that method.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    betas: Vec<f64>,
    features: BTreeMap<(KernelMethod, usize, FeatureOption), FeatureMatrix>,
    skipped: Vec<(KernelMethod, f64, String)>,
}

impl FeatureBank {
    pub fn build(g: &WeightedGraph, methods: &[KernelMethod], betas: &[f64], dims: usize) -> Self {
        let per_beta: Vec<_> = betas
            .par_iter()
            .enumerate()
            .map(|(b, &beta)| (b, beta, features_at(g, methods, beta, dims)))
            .collect();
        let mut features = BTreeMap::new();
        let mut skipped = Vec::new();
        for (b, beta, results) in per_beta {
            for (method, result) in results {
                match result {
                    Ok(pair) => {
                        for f in pair {
                            features.insert((method, b, f.option), f);
                        }
                    }
                    Err(e) => skipped.push((method, beta, e.to_string())),
                }
            }
        }
        FeatureBank {
            betas: betas.to_vec(),
            features,
            skipped,
        }
    }

    pub fn get(&self, method: KernelMethod, beta_index: usize, option: FeatureOption) -> Option<&FeatureMatrix> {
        self.features.get(&(method, beta_index, option))
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn skipped(&self) -> &[(KernelMethod, f64, String)] {
        &self.skipped
    }
}

fn kernel_for(
    method: KernelMethod,
    tables: &PathWeightTables,
    cache: &mut BTreeMap<(Framework, bool), DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    let Some((framework, statistic, correlation)) = method.parts() else {
        return center_distance_matrix(&bop_distance(tables)?.values);
    };
    let key = (framework, statistic == crate::measures::Statistic::Occurrence);
    if let Entry::Vacant(slot) = cache.entry(key) {
        slot.insert(moments(tables, framework, statistic)?.covariance());
    }
    let cov = &cache[&key];
    if correlation {
        correlation_from(cov)
    } else {
        Ok(cov.clone())
    }
}

fn features_at(
    g: &WeightedGraph,
    methods: &[KernelMethod],
    beta: f64,
    dims: usize,
) -> Vec<(KernelMethod, Result<[FeatureMatrix; 2]>)> {
    let tables = WeightMatrix::from_graph(g, beta).and_then(|w| PathWeightTables::new(&w));
    let mut cache = BTreeMap::new();
    methods
        .iter()
        .map(|&m| {
            let result = tables.as_ref().map_err(clone_error).and_then(|t| {
                let k = kernel_for(m, t, &mut cache)?;
                let (values, vectors) = eigen_sorted(&k)?;
                Ok([
                    scale_features(&values, &vectors, dims, FeatureOption::SqrtEigenvalue)?,
                    scale_features(&values, &vectors, dims, FeatureOption::UnitNorm)?,
                ])
            });
            (m, result)
        })
        .collect()
}

fn clone_error(e: &Error) -> Error {
    Error::InvalidArgument(e.to_string())
}

/// Outcome of one outer fold for one feature option.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub rep: usize,
    pub fold: usize,
    pub option: FeatureOption,
    pub beta: f64,
    pub reg: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub method: KernelMethod,
    pub seed: u64,
    pub reps: usize,
    pub folds: usize,
    /// ordered by (rep, fold, option)
    pub results: Vec<FoldResult>,
    pub skipped_betas: Vec<f64>,
}

impl CvReport {
    pub fn mean_accuracy(&self, option: FeatureOption) -> f64 {
        let acc: Vec<f64> = self
            .results
            .iter()
            .filter(|r| r.option == option)
            .map(|r| r.accuracy)
            .collect();
        acc.iter().sum::<f64>() / acc.len() as f64
    }

    /// `reps × folds` accuracies for one option.
    pub fn grid(&self, option: FeatureOption) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.reps, self.folds);
        for r in self.results.iter().filter(|r| r.option == option) {
            g[(r.rep, r.fold)] = r.accuracy;
        }
        g
    }

    pub fn best_mean_accuracy(&self) -> f64 {
        FeatureOption::ALL
            .iter()
            .map(|&o| self.mean_accuracy(o))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// CSV: `rep,fold,option,beta,reg,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rep,fold,option,beta,reg,accuracy\n");
        for r in &self.results {
            out.push_str(&format!(
                "{},{},{},{:e},{:e},{:.6}\n",
                r.rep + 1,
                r.fold + 1,
                r.option,
                r.beta,
                r.reg,
                r.accuracy
            ));
        }
        out
    }
}

/// Labeled nodes per class: `rate · n_c`, rounded by largest remainder so the
/// total is `round(rate · n)`; ties in remainder go to the lower class id.
pub fn labeled_counts(class_sizes: &[usize], rate: f64) -> Vec<usize> {
    let n: usize = class_sizes.iter().sum();
    let total = (rate * n as f64).round() as usize;
    let exact: Vec<f64> = class_sizes.iter().map(|&c| rate * c as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..class_sizes.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut missing = total.saturating_sub(counts.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if counts[c] < class_sizes[c] {
            counts[c] += 1;
            missing -= 1;
        }
    }
    counts
}

/// Labeled node sets of the outer folds for one repetition.
///
/// Nodes of each class are shuffled once; outer fold `k` labels the `m_c`
/// nodes starting at position `k · m_c` of class `c`'s list (cyclically). With
/// `rate = 1 / folds` the labeled sets partition the nodes.
pub fn outer_folds<R: Rng>(labels: &[i64], rate: f64, folds: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    let by_class = class_members(labels);
    let sizes: Vec<usize> = by_class.values().map(Vec::len).collect();
    let counts = labeled_counts(&sizes, rate);
    let mut shuffled = Vec::new();
    for ((&class, members), &m) in by_class.iter().zip(&counts) {
        if m == 0 {
            return Err(Error::MissingClass(class));
        }
        let mut members = members.clone();
        members.shuffle(rng);
        shuffled.push((members, m));
    }
    Ok((0..folds)
        .map(|k| {
            let mut set: Vec<usize> = shuffled
                .iter()
                .flat_map(|(members, m)| (0..*m).map(move |q| members[(k * m + q) % members.len()]))
                .collect();
            set.sort_unstable();
            set
        })
        .collect())
}

/// Stratified split of `nodes` into `k` folds: shuffle within each class and
/// deal the classes, in class order, round-robin with one shared counter.
pub fn stratified_folds<R: Rng>(nodes: &[usize], labels: &[i64], k: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut by_class: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for &v in nodes {
        by_class.entry(labels[v]).or_default().push(v);
    }
    let mut folds = vec![Vec::new(); k];
    let mut counter = 0;
    for members in by_class.values_mut() {
        members.shuffle(rng);
        for &v in members.iter() {
            folds[counter % k].push(v);
            counter += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

fn class_members(labels: &[i64]) -> BTreeMap<i64, Vec<usize>> {
    let mut by_class: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (v, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(v);
    }
    by_class
}

fn accuracy(predicted: &[i64], truth: &[i64]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

fn fit_and_score(x: &DMatrix<f64>, labels: &[i64], train: &[usize], test: &[usize], reg: f64) -> Result<f64> {
    let y: Vec<i64> = train.iter().map(|&v| labels[v]).collect();
    let model = LogisticModel::fit(&x.select_rows(train), &y, reg)?;
    let truth: Vec<i64> = test.iter().map(|&v| labels[v]).collect();
    Ok(accuracy(&model.predict(&x.select_rows(test)), &truth))
}

/// Fold layout of one repetition: labeled sets and their inner splits.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    pub rep: usize,
    pub labeled: Vec<Vec<usize>>,
    pub inner: Vec<Vec<Vec<usize>>>,
}

/// Fold plans for every repetition; depends only on labels, config and seed.
pub fn fold_plans(labels: &[i64], config: &CvConfig, seed: u64) -> Result<Vec<FoldPlan>> {
    config.validate()?;
    let by_class = class_members(labels);
    (0..config.reps)
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(rep as u64);
            let labeled = outer_folds(labels, config.rate, config.folds, &mut rng)?;
            for set in &labeled {
                for &class in by_class.keys() {
                    if !set.iter().any(|&v| labels[v] == class) {
                        return Err(Error::MissingClass(class));
                    }
                }
            }
            let inner = labeled
                .iter()
                .map(|set| stratified_folds(set, labels, config.inner_folds, &mut rng))
                .collect();
            Ok(FoldPlan { rep, labeled, inner })
        })
        .collect()
}

/// Nested cross-validation of one method on a precomputed [`FeatureBank`].
pub fn nested_cv_with_bank(
    bank: &FeatureBank,
    labels: &[i64],
    method: KernelMethod,
    config: &CvConfig,
    seed: u64,
) -> Result<CvReport> {
    let plans = fold_plans(labels, config, seed)?;
    let n = labels.len();
    let usable: Vec<usize> = (0..bank.betas().len())
        .filter(|&b| bank.get(method, b, FeatureOption::SqrtEigenvalue).is_some())
        .collect();
    if usable.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no β in the grid yields a usable {method} kernel"
        )));
    }
    let jobs: Vec<(usize, usize, FeatureOption)> = plans
        .iter()
        .flat_map(|p| (0..config.folds).flat_map(move |f| FeatureOption::ALL.map(|o| (p.rep, f, o))))
        .collect();
    let results: Vec<FoldResult> = jobs
        .par_iter()
        .map(|&(rep, fold, option)| {
            let plan = &plans[rep];
            let labeled = &plan.labeled[fold];
            let inner = &plan.inner[fold];
            let mut best: Option<(f64, usize, f64)> = None;
            for &b in &usable {
                let x = &bank.get(method, b, option).expect("usable β").x;
                for &reg in &config.regs {
                    let mut correct = 0.0;
                    for (k, validation) in inner.iter().enumerate() {
                        if validation.is_empty() {
                            continue;
                        }
                        let train: Vec<usize> = inner
                            .iter()
                            .enumerate()
                            .filter(|&(q, _)| q != k)
                            .flat_map(|(_, f)| f.iter().copied())
                            .collect();
                        if train.is_empty() {
                            continue;
                        }
                        correct += fit_and_score(x, labels, &train, validation, reg)? * validation.len() as f64;
                    }
                    let score = correct / labeled.len() as f64;
                    if best.is_none_or(|(s, _, _)| score > s) {
                        best = Some((score, b, reg));
                    }
                }
            }
            let (_, b, reg) = best.expect("non-empty grid");
            let x = &bank.get(method, b, option).expect("usable β").x;
            let hidden: Vec<usize> = (0..n).filter(|v| labeled.binary_search(v).is_err()).collect();
            let acc = fit_and_score(x, labels, labeled, &hidden, reg)?;
            Ok(FoldResult {
                rep,
                fold,
                option,
                beta: bank.betas()[b],
                reg,
                accuracy: acc,
            })
        })
        .collect::<Result<_>>()?;
    let skipped_betas = bank.skipped().iter().filter(|s| s.0 == method).map(|s| s.1).collect();
    Ok(CvReport {
        method,
        seed,
        reps: config.reps,
        folds: config.folds,
        results,
        skipped_betas,
    })
}

/// Nested cross-validation of one method.
pub fn nested_cv(
    g: &WeightedGraph,
    labels: &[i64],
    method: KernelMethod,
    config: &CvConfig,
    seed: u64,
) -> Result<CvReport> {
    check_labels(g, labels, config)?;
    let bank = FeatureBank::build(g, &[method], &config.betas, config.dims);
    nested_cv_with_bank(&bank, labels, method, config, seed)
}

/// Labels must cover every node, with at least `folds` nodes per class.
pub fn check_labels(g: &WeightedGraph, labels: &[i64], config: &CvConfig) -> Result<()> {
    if labels.len() != g.n() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} nodes",
            labels.len(),
            g.n()
        )));
    }
    for (class, members) in class_members(labels) {
        if members.len() < config.folds {
            return Err(Error::InvalidArgument(format!(
                "class {class} has {} nodes, fewer than {} folds",
                members.len(),
                config.folds
            )));
        }
    }
    Ok(())
}

/// Parses a `node_id class_id` file into labels ordered like `g`'s nodes.
pub fn parse_labels(g: &WeightedGraph, text: &str) -> Result<Vec<i64>> {
    let mut labels = vec![None; g.n()];
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected `node_id class_id`, got {content:?}"),
            });
        }
        let parse_err = |what: &str| Error::Parse {
            line,
            message: format!("invalid {what}"),
        };
        let id: u64 = fields[0].parse().map_err(|_| parse_err("node id"))?;
        let class: i64 = fields[1].parse().map_err(|_| parse_err("class id"))?;
        let Some(v) = g.index_of(id) else {
            return Err(Error::Parse {
                line,
                message: format!("node {id} is not in the graph"),
            });
        };
        if labels[v].replace(class).is_some() {
            return Err(Error::Parse {
                line,
                message: format!("node {id} labeled twice"),
            });
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(v, l)| l.ok_or_else(|| Error::InvalidArgument(format!("node {} has no label", g.node_ids()[v]))))
        .collect()
}

pub fn load_labels(g: &WeightedGraph, path: impl AsRef<Path>) -> Result<Vec<i64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(g, &text)
}

pub fn format_labels(g: &WeightedGraph, labels: &[i64]) -> String {
    g.node_ids()
        .iter()
        .zip(labels)
        .map(|(id, c)| format!("{id}\t{c}\n"))
        .collect()
}

/// Undirected stochastic block model with contiguous equal-as-possible
/// blocks, stored as symmetric unit-affinity edge pairs. Draws are repeated
/// (up to 100 times) until the graph is strongly connected.
pub fn sbm_generate(n: usize, blocks: usize, p_in: f64, p_out: f64, seed: u64) -> Result<(WeightedGraph, Vec<i64>)> {
    if n < 2 || blocks == 0 || blocks > n {
        return Err(Error::InvalidArgument(format!(
            "need 2 <= n and 1 <= blocks <= n, got n={n}, blocks={blocks}"
        )));
    }
    for p in [p_in, p_out] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
        }
    }
    let labels: Vec<i64> = (0..n).map(|v| (v * blocks / n) as i64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..SBM_RETRIES {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let p = if labels[i] == labels[j] { p_in } else { p_out };
                if rng.random_bool(p) {
                    for (a, b) in [(i, j), (j, i)] {
                        edges.push(Edge {
                            src: a as u64 + 1,
                            dst: b as u64 + 1,
                            affinity: 1.0,
                            cost: None,
                        });
                    }
                }
            }
        }
        let mut seen = vec![false; n];
        for e in &edges {
            seen[e.src as usize - 1] = true;
        }
        if seen.iter().any(|s| !s) {
            continue;
        }
        match WeightedGraph::from_edges(&edges) {
            Ok(g) => return Ok((g, labels)),
            Err(Error::NotStronglyConnected { .. }) | Err(Error::ZeroOutDegree { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::ConnectivityRetries(SBM_RETRIES))
}
