//! Brute-force verification of every closed-form quantity.
//!
//! Path sums are computed without ever inverting `I - W`: paths are grown one
//! edge at a time from their anchor node and their weights accumulated up to
//! a truncation depth `L`. Two engines are provided:
//!
//! * [`enumerate_depth_first`] walks every individual path with a push/pop
//!   stack. Memory is `O(L)` but the cost grows like `deg^L`, so it is only
//!   usable for shallow depths.
//! * [`enumerate`] sums the same paths layer by layer, grouping paths that end
//!   in the same state (current node, which tracked nodes were visited, and
//!   the running occurrence moments). The sum over paths is identical; only
//!   the bookkeeping is shared, which makes depths of several hundred cheap.
//!
//! Every result carries a certified bound on the omitted tail, derived from
//! `Σ_{τ>L} (τ+1)^c W^τ`, which has an exact matrix expression in terms of
//! `W^{L+1}` and a reference inverse computed here by Neumann summation.

use std::fmt;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{spectral_radius, Edge, WeightMatrix, WeightedGraph, SPECTRAL_MARGIN};
use crate::measures::{cooccurrence_moments, copresence_moments};
use crate::paths::{Framework, PairForm, PathWeightTables};

/// Largest graph the oracle accepts.
pub const MAX_ORACLE_NODES: usize = 8;
/// Depth guard of the literal depth-first enumerator.
pub const MAX_DEPTH_FIRST_DEPTH: usize = 40;
/// Depth guard of the layered enumerator.
pub const MAX_LAYERED_DEPTH: usize = 4096;

const INITIAL_DEPTH: usize = 8;

/// Which quantity a [`QuantitySpec`] addresses, for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantityKind {
    R1,
    R2,
    R3,
    R4,
    R5,
    R6,
    R7,
    R8,
    R9,
    R10,
    R11,
    R12,
    R13,
    R14,
    R15,
    R16,
    R17,
    R18,
    PresenceMoment,
    OccurrenceMoment,
    Normalizer,
}

/// Path endpoints: one `(s, t)` pair or the sum over all pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoints {
    Pair(usize, usize),
    All,
}

/// Node-presence restriction on the summed paths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Constraint {
    None,
    /// every node of the set appears on the path
    Visits(Vec<usize>),
    /// no node of the set appears on the path
    Avoids(Vec<usize>),
}

impl Constraint {
    fn nodes(&self) -> &[usize] {
        match self {
            Constraint::None => &[],
            Constraint::Visits(v) | Constraint::Avoids(v) => v,
        }
    }
}

/// Uniform address of a path sum `Σ_℘ f(℘) w(℘)`.
///
/// `f` is the constraint indicator times the product of the occurrence counts
/// `η(c ∈ ℘)` of the nodes in `counts` (at most two; the same node twice gives
/// `η²`).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantitySpec {
    pub kind: QuantityKind,
    pub framework: Framework,
    pub endpoints: Endpoints,
    pub constraint: Constraint,
    pub counts: Vec<usize>,
}

impl QuantitySpec {
    pub fn new(kind: QuantityKind, framework: Framework, endpoints: Endpoints) -> Self {
        QuantitySpec {
            kind,
            framework,
            endpoints,
            constraint: Constraint::None,
            counts: Vec::new(),
        }
    }

    pub fn visiting(mut self, nodes: &[usize]) -> Self {
        self.constraint = Constraint::Visits(nodes.to_vec());
        self
    }

    pub fn avoiding(mut self, nodes: &[usize]) -> Self {
        self.constraint = Constraint::Avoids(nodes.to_vec());
        self
    }

    pub fn counting(mut self, nodes: &[usize]) -> Self {
        self.counts = nodes.to_vec();
        self
    }

    fn validate(&self, n: usize) -> Result<()> {
        let bad = |i: usize| Error::InvalidNode { index: i, n };
        if let Endpoints::Pair(s, t) = self.endpoints {
            for v in [s, t] {
                if v >= n {
                    return Err(bad(v));
                }
            }
        }
        for &v in self.constraint.nodes().iter().chain(&self.counts) {
            if v >= n {
                return Err(bad(v));
            }
        }
        if self.counts.len() > 2 {
            return Err(Error::Guard("at most two occurrence counts per quantity".into()));
        }
        if self.constraint.nodes().len() > MAX_ORACLE_NODES {
            return Err(Error::Guard("constraint set too large".into()));
        }
        Ok(())
    }

    /// `f(℘)` for one explicit path.
    pub fn path_factor(&self, path: &[usize]) -> f64 {
        let present = |v: usize| path.contains(&v);
        let ok = match &self.constraint {
            Constraint::None => true,
            Constraint::Visits(set) => set.iter().all(|&v| present(v)),
            Constraint::Avoids(set) => !set.iter().any(|&v| present(v)),
        };
        if !ok {
            return 0.0;
        }
        self.counts
            .iter()
            .map(|&c| path.iter().filter(|&&v| v == c).count() as f64)
            .product()
    }
}

/// Truncated path sum with a certified bound on the omitted tail.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnumerationResult {
    pub value: f64,
    pub depth: usize,
    pub remainder_bound: f64,
}

/// Tail sums `Σ_{τ>L} (τ+1)^c [W^τ]` for `c = 0, 1, 2`.
#[derive(Debug, Clone)]
pub struct TailBounds {
    w: DMatrix<f64>,
    z: DMatrix<f64>,
    wz2: DMatrix<f64>,
    wwz3: DMatrix<f64>,
}

impl TailBounds {
    pub fn new(w: &DMatrix<f64>) -> Result<Self> {
        let z = neumann_inverse(w)?;
        let z2 = &z * &z;
        let wz2 = w * &z2;
        let n = w.nrows();
        let wwz3 = w * (DMatrix::identity(n, n) + w) * &z2 * &z;
        Ok(TailBounds {
            w: w.clone(),
            z,
            wz2,
            wwz3,
        })
    }

    /// Reference inverse `Σ_τ W^τ`.
    pub fn reference_inverse(&self) -> &DMatrix<f64> {
        &self.z
    }

    /// `[Σ_{τ>L} (τ+1)^power W^τ]` for `power ∈ {0, 1, 2}`.
    pub fn tail(&self, depth: usize, power: usize) -> DMatrix<f64> {
        let head = matrix_power(&self.w, depth + 1);
        let a = (depth + 2) as f64;
        let inner = match power {
            0 => self.z.clone(),
            1 => &self.z * a + &self.wz2,
            _ => &self.z * (a * a) + &self.wz2 * (2.0 * a) + &self.wwz3,
        };
        (head * inner).map(|v| v.max(0.0))
    }
}

fn matrix_power(w: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = w.nrows();
    let mut result = DMatrix::identity(n, n);
    let mut base = w.clone();
    let mut k = k;
    while k > 0 {
        if k & 1 == 1 {
            result = &result * &base;
        }
        base = &base * &base;
        k >>= 1;
    }
    result
}

/// `Σ_τ W^τ`, summed until the terms vanish.
fn neumann_inverse(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = w.nrows();
    let mut sum = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for _ in 0..1_000_000 {
        term = &term * w;
        sum += &term;
        if term.amax() <= 1e-20 * sum.amax() {
            return Ok(sum);
        }
    }
    Err(Error::NoConvergence { iterations: 1_000_000 })
}

/// Accumulated path sums for one anchor node, indexed `[other * masks + mask]`.
///
/// Each entry holds `[Σ w, Σ η_a w, Σ η_b w, Σ η_a η_b w]` for the counted
/// nodes `a`, `b`. For regular paths the anchor is the source and `other` the
/// end; for hitting paths the anchor is the target and `other` the source.
#[derive(Debug, Clone)]
pub struct LayeredSums {
    masks: usize,
    tracked: Vec<usize>,
    sums: Vec<[f64; 4]>,
}

impl LayeredSums {
    pub fn run(
        w: &DMatrix<f64>,
        framework: Framework,
        anchor: usize,
        tracked: &[usize],
        counts: &[usize],
        depth: usize,
    ) -> Self {
        let n = w.nrows();
        let masks = 1usize << tracked.len();
        let bit = |v: usize| tracked.iter().position(|&x| x == v).map_or(0, |k| 1usize << k);
        let (ca, cb) = match counts {
            [] => (None, None),
            [a] => (Some(*a), None),
            [a, b, ..] => (Some(*a), Some(*b)),
        };
        let add_node = |m: [f64; 4], v: usize| -> [f64; 4] {
            let a = if ca == Some(v) { 1.0 } else { 0.0 };
            let b = if cb == Some(v) { 1.0 } else { 0.0 };
            [
                m[0],
                m[1] + a * m[0],
                m[2] + b * m[0],
                m[3] + b * m[1] + a * m[2] + a * b * m[0],
            ]
        };
        let mut current = vec![[0.0; 4]; n * masks];
        current[anchor * masks + bit(anchor)] = add_node([1.0, 0.0, 0.0, 0.0], anchor);
        let mut sums = current.clone();
        for _ in 0..depth {
            let mut next = vec![[0.0; 4]; n * masks];
            for v in 0..n {
                for mask in 0..masks {
                    let m = current[v * masks + mask];
                    if m == [0.0; 4] {
                        continue;
                    }
                    for u in 0..n {
                        let weight = match framework {
                            Framework::Regular => w[(v, u)],
                            // grow backwards; the target is never re-entered
                            Framework::Hitting if u == anchor => 0.0,
                            Framework::Hitting => w[(u, v)],
                        };
                        if weight == 0.0 {
                            continue;
                        }
                        let e = add_node(m, u);
                        let slot = &mut next[u * masks + (mask | bit(u))];
                        for k in 0..4 {
                            slot[k] += weight * e[k];
                        }
                    }
                }
            }
            for (acc, x) in sums.iter_mut().zip(&next) {
                for k in 0..4 {
                    acc[k] += x[k];
                }
            }
            current = next;
        }
        LayeredSums {
            masks,
            tracked: tracked.to_vec(),
            sums,
        }
    }

    fn bits(&self, nodes: &[usize]) -> usize {
        nodes
            .iter()
            .map(|v| {
                self.tracked
                    .iter()
                    .position(|x| x == v)
                    .map(|k| 1usize << k)
                    .expect("node is tracked")
            })
            .fold(0, |a, b| a | b)
    }

    /// Sum of moment `k` over masks satisfying the constraint.
    pub fn value(&self, other: usize, constraint: &Constraint, k: usize) -> f64 {
        let (need, forbid) = match constraint {
            Constraint::None => (0, 0),
            Constraint::Visits(set) => (self.bits(set), 0),
            Constraint::Avoids(set) => (0, self.bits(set)),
        };
        (0..self.masks)
            .filter(|&m| m & need == need && m & forbid == 0)
            .map(|m| self.sums[other * self.masks + m][k])
            .sum()
    }
}

fn check_oracle_size(n: usize) -> Result<()> {
    if n > MAX_ORACLE_NODES {
        return Err(Error::Guard(format!("oracle needs n <= {MAX_ORACLE_NODES}, got {n}")));
    }
    Ok(())
}

fn moment_index(counts: &[usize]) -> usize {
    match counts.len() {
        0 => 0,
        1 => 1,
        _ => 3,
    }
}

fn scope(endpoints: Endpoints, n: usize) -> Vec<(usize, usize)> {
    match endpoints {
        Endpoints::Pair(s, t) => vec![(s, t)],
        Endpoints::All => (0..n).flat_map(|s| (0..n).map(move |t| (s, t))).collect(),
    }
}

/// Sums `f(℘) w(℘)` over all paths of length `0..=depth` selected by `spec`.
pub fn enumerate(w: &WeightMatrix, spec: &QuantitySpec, depth: usize) -> Result<EnumerationResult> {
    let n = w.n();
    check_oracle_size(n)?;
    spec.validate(n)?;
    if depth > MAX_LAYERED_DEPTH {
        return Err(Error::Guard(format!("depth {depth} exceeds {MAX_LAYERED_DEPTH}")));
    }
    let tracked = spec.constraint.nodes();
    let k = moment_index(&spec.counts);
    let pairs = scope(spec.endpoints, n);
    let mut value = 0.0;
    let anchors: Vec<usize> = {
        let mut a: Vec<usize> = pairs
            .iter()
            .map(|&(s, t)| if spec.framework == Framework::Regular { s } else { t })
            .collect();
        a.sort_unstable();
        a.dedup();
        a
    };
    for anchor in anchors {
        let sums = LayeredSums::run(w.matrix(), spec.framework, anchor, tracked, &spec.counts, depth);
        for &(s, t) in &pairs {
            let (a, other) = match spec.framework {
                Framework::Regular => (s, t),
                Framework::Hitting => (t, s),
            };
            if a == anchor {
                value += sums.value(other, &spec.constraint, k);
            }
        }
    }
    let tail = TailBounds::new(w.matrix())?.tail(depth, spec.counts.len());
    let remainder_bound = pairs.iter().map(|&(s, t)| tail[(s, t)]).sum();
    Ok(EnumerationResult {
        value,
        depth,
        remainder_bound,
    })
}

/// Same sum as [`enumerate`], walking every path explicitly.
pub fn enumerate_depth_first(w: &WeightMatrix, spec: &QuantitySpec, depth: usize) -> Result<EnumerationResult> {
    let n = w.n();
    check_oracle_size(n)?;
    spec.validate(n)?;
    if depth > MAX_DEPTH_FIRST_DEPTH {
        return Err(Error::Guard(format!("depth {depth} exceeds {MAX_DEPTH_FIRST_DEPTH}")));
    }
    let pairs = scope(spec.endpoints, n);
    let mut value = 0.0;
    let mut path = Vec::with_capacity(depth + 1);
    let mut sources: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    sources.sort_unstable();
    sources.dedup();
    for s in sources {
        let targets: Vec<usize> = pairs.iter().filter(|p| p.0 == s).map(|p| p.1).collect();
        path.push(s);
        walk(w.matrix(), spec, &targets, depth, 1.0, &mut path, &mut value);
        path.pop();
    }
    let tail = TailBounds::new(w.matrix())?.tail(depth, spec.counts.len());
    let remainder_bound = pairs.iter().map(|&(s, t)| tail[(s, t)]).sum();
    Ok(EnumerationResult {
        value,
        depth,
        remainder_bound,
    })
}

fn walk(
    w: &DMatrix<f64>,
    spec: &QuantitySpec,
    targets: &[usize],
    remaining: usize,
    weight: f64,
    path: &mut Vec<usize>,
    acc: &mut f64,
) {
    let end = *path.last().expect("non-empty path");
    let hitting = spec.framework == Framework::Hitting;
    let end_repeats = path[..path.len() - 1].contains(&end);
    if targets.contains(&end) && !(hitting && end_repeats) {
        *acc += spec.path_factor(path) * weight;
    }
    if remaining == 0 {
        return;
    }
    // a hitting path to a single target cannot continue through it
    if hitting && targets.len() == 1 && end == targets[0] {
        return;
    }
    for u in 0..w.ncols() {
        let wt = w[(end, u)];
        if wt == 0.0 {
            continue;
        }
        path.push(u);
        walk(w, spec, targets, remaining - 1, weight * wt, path, acc);
        path.pop();
    }
}

/// One checked quantity family in a [`VerifyReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct KindReport {
    pub label: String,
    pub comparisons: usize,
    pub max_deviation: f64,
    pub max_bound: f64,
    /// first comparison that exceeded `tol + bound`: indices and deviation
    pub first_failure: Option<(String, f64)>,
}

impl KindReport {
    fn new(label: &str) -> Self {
        KindReport {
            label: label.to_string(),
            comparisons: 0,
            max_deviation: 0.0,
            max_bound: 0.0,
            first_failure: None,
        }
    }

    fn record(&mut self, tol: f64, closed: f64, enumerated: f64, bound: f64, at: impl FnOnce() -> String) {
        let dev = (closed - enumerated).abs();
        self.comparisons += 1;
        self.max_deviation = self.max_deviation.max(dev);
        self.max_bound = self.max_bound.max(bound);
        if !(dev <= tol + bound) && self.first_failure.is_none() {
            self.first_failure = Some((at(), dev));
        }
    }

    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }
}

/// Result of [`verify_all`].
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub n: usize,
    pub tol: f64,
    pub presence_depth: usize,
    pub occurrence_depth: usize,
    pub kinds: Vec<KindReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.kinds.iter().all(KindReport::passed)
    }

    pub fn first_failure(&self) -> Option<&KindReport> {
        self.kinds.iter().find(|k| !k.passed())
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "n = {}, tol = {:e}, depth = {} (presence) / {} (occurrence)",
            self.n, self.tol, self.presence_depth, self.occurrence_depth
        )?;
        writeln!(
            f,
            "{:<10} {:>8} {:>12} {:>12}  status",
            "quantity", "checks", "max dev", "max bound"
        )?;
        for k in &self.kinds {
            let status = match &k.first_failure {
                None => "ok".to_string(),
                Some((at, dev)) => format!("FAIL at {at} (deviation {dev:.3e})"),
            };
            writeln!(
                f,
                "{:<10} {:>8} {:>12.3e} {:>12.3e}  {}",
                k.label, k.comparisons, k.max_deviation, k.max_bound, status
            )?;
        }
        Ok(())
    }
}

fn subsets_of_size(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for v in start..n {
            cur.push(v);
            rec(v + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

fn depth_for(tails: &TailBounds, power: usize, target: f64) -> Result<usize> {
    let mut depth = INITIAL_DEPTH;
    loop {
        if tails.tail(depth, power).sum() < target {
            return Ok(depth);
        }
        depth *= 2;
        if depth > MAX_LAYERED_DEPTH {
            return Err(Error::Guard(format!(
                "tail bound does not drop below {target:e} within depth {MAX_LAYERED_DEPTH}"
            )));
        }
    }
}

/// Compares every closed-form quantity against truncated path sums.
pub fn verify_all(w: &WeightMatrix, tol: f64) -> Result<VerifyReport> {
    let tables = PathWeightTables::new(w)?;
    verify_tables(w, &tables, tol)
}

/// [`verify_all`] against externally supplied tables.
pub fn verify_tables(w: &WeightMatrix, tables: &PathWeightTables, tol: f64) -> Result<VerifyReport> {
    let n = w.n();
    check_oracle_size(n)?;
    let wm = w.matrix();
    let tails = TailBounds::new(wm)?;
    // deepen until even the all-pairs aggregate tail is below tol / 10
    let presence_depth = depth_for(&tails, 0, tol / 10.0)?;
    let occurrence_depth = depth_for(&tails, 2, tol / 10.0)?;
    let t0 = tails.tail(presence_depth, 0);
    let o0 = tails.tail(occurrence_depth, 0);
    let o1 = tails.tail(occurrence_depth, 1);
    let o2 = tails.tail(occurrence_depth, 2);

    // Presence sums: one forward run per source and one backward run per
    // target for every tracked subset of size min(3, n).
    let k = n.min(3);
    let configs = subsets_of_size(n, k);
    let runs: Vec<(Vec<LayeredSums>, Vec<LayeredSums>)> = configs
        .iter()
        .map(|set| {
            let fwd = (0..n)
                .map(|s| LayeredSums::run(wm, Framework::Regular, s, set, &[], presence_depth))
                .collect();
            let bwd = (0..n)
                .map(|t| LayeredSums::run(wm, Framework::Hitting, t, set, &[], presence_depth))
                .collect();
            (fwd, bwd)
        })
        .collect();
    let config_for = |nodes: &[usize]| -> usize {
        configs
            .iter()
            .position(|c| nodes.iter().all(|v| c.contains(v)))
            .expect("every small node set lies in some tracked subset")
    };
    let reg = |cfg: usize, s: usize, t: usize, c: &Constraint| runs[cfg].0[s].value(t, c, 0);
    let hit = |cfg: usize, s: usize, t: usize, c: &Constraint| runs[cfg].1[t].value(s, c, 0);

    let mut kinds = Vec::new();
    let check = |label: &str,
                 closed: &DMatrix<f64>,
                 enumerated: &dyn Fn(usize, usize) -> f64,
                 bound: &DMatrix<f64>,
                 tag: &str,
                 report: &mut Option<KindReport>| {
        let r = report.get_or_insert_with(|| KindReport::new(label));
        for s in 0..n {
            for t in 0..n {
                r.record(tol, closed[(s, t)], enumerated(s, t), bound[(s, t)], || {
                    format!("{tag} s={s} t={t}").trim_start().to_string()
                });
            }
        }
    };

    let none = Constraint::None;
    let mut r1 = None;
    check(
        "R1",
        tables.fundamental(),
        &|s, t| reg(0, s, t, &none),
        &t0,
        "",
        &mut r1,
    );
    let mut r2 = None;
    check("R2", tables.hitting(), &|s, t| hit(0, s, t, &none), &t0, "", &mut r2);
    kinds.extend([r1, r2].into_iter().flatten());

    let (mut r3, mut r4, mut r5, mut r6) = (None, None, None, None);
    for i in 0..n {
        let cfg = config_for(&[i]);
        let (vis, avo) = (Constraint::Visits(vec![i]), Constraint::Avoids(vec![i]));
        let tag = format!("i={i}");
        check(
            "R3",
            &tables.z_plus_node(i)?,
            &|s, t| reg(cfg, s, t, &vis),
            &t0,
            &tag,
            &mut r3,
        );
        check(
            "R4",
            tables.z_minus_node(i)?.values(),
            &|s, t| reg(cfg, s, t, &avo),
            &t0,
            &tag,
            &mut r4,
        );
        check(
            "R5",
            tables.zh_minus_node(i)?.values(),
            &|s, t| hit(cfg, s, t, &avo),
            &t0,
            &tag,
            &mut r5,
        );
        check(
            "R6",
            &tables.zh_plus_node(i)?,
            &|s, t| hit(cfg, s, t, &vis),
            &t0,
            &tag,
            &mut r6,
        );
    }
    kinds.extend([r3, r4, r5, r6].into_iter().flatten());

    let mut r7 = None;
    let mut r8 = [None, None, None];
    let mut r9 = [None, None, None];
    let mut r10 = None;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let cfg = config_for(&[i, j]);
            let (vis, avo) = (Constraint::Visits(vec![i, j]), Constraint::Avoids(vec![i, j]));
            let tag = format!("i={i} j={j}");
            check(
                "R7",
                &tables.z_plus_pair(i, j)?,
                &|s, t| reg(cfg, s, t, &vis),
                &t0,
                &tag,
                &mut r7,
            );
            for (f, form) in PairForm::ALL.into_iter().enumerate() {
                let label8 = format!("R8.{}", f + 1);
                let label9 = format!("R9.{}", f + 1);
                check(
                    &label8,
                    &tables.z_minus_pair(i, j, form)?,
                    &|s, t| reg(cfg, s, t, &avo),
                    &t0,
                    &tag,
                    &mut r8[f],
                );
                check(
                    &label9,
                    &tables.zh_minus_pair(i, j, form)?,
                    &|s, t| hit(cfg, s, t, &avo),
                    &t0,
                    &tag,
                    &mut r9[f],
                );
            }
            check(
                "R10",
                &tables.zh_plus_pair(i, j)?,
                &|s, t| hit(cfg, s, t, &vis),
                &t0,
                &tag,
                &mut r10,
            );
        }
    }
    kinds.extend(r7);
    kinds.extend(r8.into_iter().flatten());
    kinds.extend(r9.into_iter().flatten());
    kinds.extend(r10);

    let (mut r11, mut r12, mut r13, mut r14) = (None, None, None, None);
    for size in 1..=k {
        for set in subsets_of_size(n, size) {
            let cfg = config_for(&set);
            let (vis, avo) = (Constraint::Visits(set.clone()), Constraint::Avoids(set.clone()));
            let tag = format!("I={set:?}");
            check(
                "R11",
                &tables.z_minus_set(&set)?,
                &|s, t| reg(cfg, s, t, &avo),
                &t0,
                &tag,
                &mut r11,
            );
            check(
                "R12",
                &tables.zh_minus_set(&set)?,
                &|s, t| hit(cfg, s, t, &avo),
                &t0,
                &tag,
                &mut r12,
            );
            check(
                "R13",
                &tables.z_plus_set(&set, Framework::Regular)?,
                &|s, t| reg(cfg, s, t, &vis),
                &t0,
                &tag,
                &mut r13,
            );
            check(
                "R14",
                &tables.z_plus_set(&set, Framework::Hitting)?,
                &|s, t| hit(cfg, s, t, &vis),
                &t0,
                &tag,
                &mut r14,
            );
        }
    }
    kinds.extend([r11, r12, r13, r14].into_iter().flatten());

    // Occurrence sums: counted pairs i <= j, no tracked nodes.
    let mut occ_reg = vec![vec![None; n]; n];
    let mut occ_hit = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let fwd: Vec<LayeredSums> = (0..n)
                .map(|s| LayeredSums::run(wm, Framework::Regular, s, &[], &[i, j], occurrence_depth))
                .collect();
            let bwd: Vec<LayeredSums> = (0..n)
                .map(|t| LayeredSums::run(wm, Framework::Hitting, t, &[], &[i, j], occurrence_depth))
                .collect();
            occ_reg[i][j] = Some(fwd);
            occ_hit[i][j] = Some(bwd);
        }
    }
    let oreg = |i: usize, j: usize, s: usize, t: usize, m: usize| {
        let (a, b) = (i.min(j), i.max(j));
        occ_reg[a][b].as_ref().unwrap()[s].value(t, &Constraint::None, m)
    };
    let ohit = |i: usize, j: usize, s: usize, t: usize, m: usize| {
        let (a, b) = (i.min(j), i.max(j));
        occ_hit[a][b].as_ref().unwrap()[t].value(s, &Constraint::None, m)
    };
    let (mut r15, mut r16, mut r17, mut r18) = (None, None, None, None);
    for i in 0..n {
        let tag = format!("i={i}");
        check(
            "R15",
            &tables.occ_weight_node(i)?,
            &|s, t| oreg(i, i, s, t, 1),
            &o1,
            &tag,
            &mut r15,
        );
        check(
            "R17",
            &tables.occ_hit_weight_node(i)?,
            &|s, t| ohit(i, i, s, t, 1),
            &o1,
            &tag,
            &mut r17,
        );
    }
    for i in 0..n {
        for j in 0..n {
            let tag = format!("i={i} j={j}");
            check(
                "R16",
                &tables.occ_weight_pair(i, j)?,
                &|s, t| oreg(i, j, s, t, 3),
                &o2,
                &tag,
                &mut r16,
            );
            check(
                "R18",
                &tables.occ_hit_weight_pair(i, j)?,
                &|s, t| ohit(i, j, s, t, 3),
                &o2,
                &tag,
                &mut r18,
            );
        }
    }
    kinds.extend([r15, r16, r17, r18].into_iter().flatten());

    // Moments: Σ_{s,t} f w over Σ_{s,t} w, with the truncation bracket
    // N/D ∈ [N_L / (D_L + e_D), (N_L + e_N) / D_L].
    let all_pairs: Vec<(usize, usize)> = scope(Endpoints::All, n);
    let ratio_check =
        |r: &mut KindReport, closed: f64, num: f64, num_tail: f64, den: f64, den_tail: f64, at: String| {
            let est = num / den;
            let lo = num / (den + den_tail);
            let hi = (num + num_tail) / den;
            let bound = (est - lo).max(hi - est);
            r.record(tol, closed, est, bound, || at);
        };
    let sum_pairs = |f: &dyn Fn(usize, usize) -> f64| all_pairs.iter().map(|&(s, t)| f(s, t)).sum::<f64>();
    let t0_all = t0.sum();
    let (o0_all, o1_all, o2_all) = (o0.sum(), o1.sum(), o2.sum());

    let mut normalizer = KindReport::new("w(P)");
    let mut normalizer_h = KindReport::new("w(P^h)");
    let den_reg = sum_pairs(&|s, t| reg(0, s, t, &none));
    let den_hit = sum_pairs(&|s, t| hit(0, s, t, &none));
    normalizer.record(tol, tables.z_total(), den_reg, t0_all, String::new);
    normalizer_h.record(tol, tables.zh_total(), den_hit, t0_all, String::new);

    for (framework, label1, label2, den) in [
        (Framework::Regular, "E[δ]", "E[δδ]", den_reg),
        (Framework::Hitting, "E^h[δ]", "E^h[δδ]", den_hit),
    ] {
        let closed = copresence_moments(tables, framework)?;
        let mut first = KindReport::new(label1);
        let mut second = KindReport::new(label2);
        let value = |cfg: usize, s: usize, t: usize, c: &Constraint| match framework {
            Framework::Regular => reg(cfg, s, t, c),
            Framework::Hitting => hit(cfg, s, t, c),
        };
        for i in 0..n {
            for j in 0..n {
                let nodes = if i == j { vec![i] } else { vec![i, j] };
                let cfg = config_for(&nodes);
                let c = Constraint::Visits(nodes);
                let num = sum_pairs(&|s, t| value(cfg, s, t, &c));
                if i == j {
                    ratio_check(&mut first, closed.first[i], num, t0_all, den, t0_all, format!("i={i}"));
                }
                ratio_check(
                    &mut second,
                    closed.second[(i, j)],
                    num,
                    t0_all,
                    den,
                    t0_all,
                    format!("i={i} j={j}"),
                );
            }
        }
        kinds.push(first);
        kinds.push(second);
    }

    for (framework, label1, label2) in [
        (Framework::Regular, "E[η]", "E[ηη]"),
        (Framework::Hitting, "E^h[η]", "E^h[ηη]"),
    ] {
        let closed = cooccurrence_moments(tables, framework)?;
        let mut first = KindReport::new(label1);
        let mut second = KindReport::new(label2);
        let value = |i: usize, j: usize, s: usize, t: usize, m: usize| match framework {
            Framework::Regular => oreg(i, j, s, t, m),
            Framework::Hitting => ohit(i, j, s, t, m),
        };
        let den = sum_pairs(&|s, t| value(0, 0, s, t, 0));
        for i in 0..n {
            let num = sum_pairs(&|s, t| value(i, i, s, t, 1));
            ratio_check(&mut first, closed.first[i], num, o1_all, den, o0_all, format!("i={i}"));
            for j in 0..n {
                let num = sum_pairs(&|s, t| value(i, j, s, t, 3));
                ratio_check(
                    &mut second,
                    closed.second[(i, j)],
                    num,
                    o2_all,
                    den,
                    o0_all,
                    format!("i={i} j={j}"),
                );
            }
        }
        kinds.push(first);
        kinds.push(second);
    }
    kinds.push(normalizer);
    kinds.push(normalizer_h);

    Ok(VerifyReport {
        n,
        tol,
        presence_depth,
        occurrence_depth,
        kinds,
    })
}

/// Worst relative errors of [`finite_difference_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDifferenceReport {
    pub samples: usize,
    pub step: f64,
    pub max_first_error: f64,
    pub max_second_error: f64,
}

/// Central differences of `Z` under perturbations of single weights, compared
/// with `∂z_st/∂w_ij = z_si z_jt` and
/// `∂²z_st/∂w_kl∂w_ij = z_sk z_li z_jt + z_si z_jk z_lt`.
///
/// Errors are `|fd - closed| / max(1, |closed|)`. First differences subtract
/// two perturbed inverses directly. For the mixed second difference, each
/// perturbed inverse is formed as `Z + D` where `D` solves
/// `(I - W')D = (W' - W)Z`.
pub fn finite_difference_check(
    w: &WeightMatrix,
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<FiniteDifferenceReport> {
    let tables = PathWeightTables::new(w)?;
    let n = w.n();
    let wm = w.matrix();
    let base = inverse_of_complement(wm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FiniteDifferenceReport {
        samples,
        step,
        max_first_error: 0.0,
        max_second_error: 0.0,
    };
    let mut h = step;
    let mut reduced = false;
    let mut done = 0;
    while done < samples {
        let (s, t, i, j, k, l) = (
            rng.random_range(0..n),
            rng.random_range(0..n),
            rng.random_range(0..n),
            rng.random_range(0..n),
            rng.random_range(0..n),
            rng.random_range(0..n),
        );
        let perturbed = |a: f64, b: f64| {
            let mut p = wm.clone();
            p[(i, j)] += a;
            p[(k, l)] += b;
            p
        };
        let corners = [perturbed(h, h), perturbed(h, -h), perturbed(-h, h), perturbed(-h, -h)];
        let mut stable = true;
        for m in corners.iter().chain([&perturbed(h, 0.0), &perturbed(-h, 0.0)]) {
            if spectral_radius(m)? >= 1.0 - SPECTRAL_MARGIN {
                stable = false;
            }
        }
        if !stable {
            if reduced {
                return Err(Error::SpectralRadius {
                    rho: spectral_radius(&perturbed(h, h))?,
                    margin: SPECTRAL_MARGIN,
                });
            }
            h /= 10.0;
            reduced = true;
            report.step = h;
            continue;
        }

        let plus = inverse_of_complement(&perturbed(h, 0.0))?;
        let minus = inverse_of_complement(&perturbed(-h, 0.0))?;
        let fd1 = (plus[(s, t)] - minus[(s, t)]) / (2.0 * h);
        let cf1 = tables.first_derivative(s, t, i, j);
        report.max_first_error = report.max_first_error.max((fd1 - cf1).abs() / cf1.abs().max(1.0));

        let mut diffs = [0.0; 4];
        for (slot, m) in diffs.iter_mut().zip(&corners) {
            *slot = difference_of_inverse(m, wm, &base)?[(s, t)];
        }
        let fd2 = (diffs[0] - diffs[1] - diffs[2] + diffs[3]) / (4.0 * h * h);
        let cf2 = tables.second_derivative(s, t, i, j, k, l);
        report.max_second_error = report.max_second_error.max((fd2 - cf2).abs() / cf2.abs().max(1.0));
        done += 1;
    }
    Ok(report)
}

fn inverse_of_complement(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = w.nrows();
    (DMatrix::identity(n, n) - w).lu().try_inverse().ok_or(Error::Singular {
        condition: f64::INFINITY,
    })
}

// (I - W')^{-1} - (I - W)^{-1} from (I - W') D = (W' - W)(I - W)^{-1}
fn difference_of_inverse(perturbed: &DMatrix<f64>, w: &DMatrix<f64>, base: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = w.nrows();
    let rhs = (perturbed - w) * base;
    (DMatrix::identity(n, n) - perturbed)
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular {
            condition: f64::INFINITY,
        })
}

/// Directed Erdős–Rényi graph (edge probability 0.6) plus a random
/// Hamiltonian cycle, affinities uniform in `[0.5, 2]`.
pub fn oracle_graph<R: Rng>(n: usize, rng: &mut R) -> Result<WeightedGraph> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut on_cycle = vec![vec![false; n]; n];
    for k in 0..n {
        on_cycle[order[k]][order[(k + 1) % n]] = true;
    }
    let mut edges = Vec::new();
    for (i, cycle_row) in on_cycle.iter().enumerate() {
        for (j, &forced) in cycle_row.iter().enumerate() {
            if i == j {
                continue;
            }
            let keep = forced | rng.random_bool(0.6);
            let affinity = rng.random_range(0.5..=2.0);
            if keep {
                edges.push(Edge {
                    src: i as u64 + 1,
                    dst: j as u64 + 1,
                    affinity,
                    cost: None,
                });
            }
        }
    }
    WeightedGraph::from_edges(&edges)
}

/// `W = P_ref ∘ exp(-C)` on an [`oracle_graph`].
pub fn oracle_weight_matrix<R: Rng>(n: usize, rng: &mut R) -> Result<WeightMatrix> {
    WeightMatrix::from_graph(&oracle_graph(n, rng)?, 1.0)
}

/// A killed chain: `absorbing` nodes have zero rows; every other row is a
/// probability distribution over a random strongly connected support, scaled
/// by a factor in `[0.6, 0.95]` so walkers may also die in transit.
pub fn random_killed_chain<R: Rng>(n: usize, absorbing: &[usize], rng: &mut R) -> Result<WeightMatrix> {
    let g = oracle_graph(n, rng)?;
    let mut w = crate::graph::reference_transition_matrix(&g)?;
    for i in 0..n {
        if absorbing.contains(&i) {
            w.row_mut(i).fill(0.0);
        } else {
            let mass = rng.random_range(0.6..=0.95);
            w.row_mut(i).scale_mut(mass);
        }
    }
    WeightMatrix::new(w)
}

/// Monte-Carlo estimate of absorption probabilities: `(estimate, standard
/// error)` per absorbing node, conditioned on being absorbed.
pub fn monte_carlo_absorption<R: Rng>(
    w: &WeightMatrix,
    absorbing: &[usize],
    start: usize,
    walks: usize,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let wm = w.matrix();
    let n = w.n();
    let mut hits = vec![0usize; absorbing.len()];
    let mut absorbed = 0usize;
    for _ in 0..walks {
        let mut v = start;
        loop {
            if let Some(k) = absorbing.iter().position(|&a| a == v) {
                hits[k] += 1;
                absorbed += 1;
                break;
            }
            let mut u = rng.random::<f64>();
            let mut next = None;
            for c in 0..n {
                u -= wm[(v, c)];
                if u < 0.0 {
                    next = Some(c);
                    break;
                }
            }
            match next {
                Some(c) => v = c,
                None => break, // killed away from the absorbing set
            }
        }
    }
    let total = absorbed.max(1) as f64;
    let est: Vec<f64> = hits.iter().map(|&h| h as f64 / total).collect();
    let se = est.iter().map(|&p| (p * (1.0 - p) / total).sqrt()).collect();
    (est, se)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate_weight_matrix;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;

    fn g2() -> WeightMatrix {
        validate_weight_matrix(dmatrix![0.0, 0.5; 0.4, 0.0]).unwrap()
    }

    #[test]
    fn g2_fundamental_entry_by_enumeration() {
        let spec = QuantitySpec::new(QuantityKind::R1, Framework::Regular, Endpoints::Pair(0, 0));
        let r = enumerate(&g2(), &spec, 30).unwrap();
        assert!(r.remainder_bound < 1e-9, "{}", r.remainder_bound);
        assert!((r.value - 1.25).abs() <= 1e-9 + r.remainder_bound);
        let r = enumerate_depth_first(&g2(), &spec, 30).unwrap();
        assert!((r.value - 1.25).abs() <= 1e-9 + r.remainder_bound);
    }

    #[test]
    fn avoiding_the_target_is_zero() {
        let w = g2();
        for depth in [0, 3, 20] {
            let spec = QuantitySpec::new(QuantityKind::R5, Framework::Hitting, Endpoints::Pair(0, 1)).avoiding(&[1]);
            assert_eq!(enumerate(&w, &spec, depth).unwrap().value, 0.0);
            assert_eq!(enumerate_depth_first(&w, &spec, depth).unwrap().value, 0.0);
        }
    }

    #[test]
    fn zero_length_paths() {
        let w = g2();
        let other = QuantitySpec::new(QuantityKind::R3, Framework::Regular, Endpoints::Pair(0, 0)).visiting(&[1]);
        assert_eq!(enumerate(&w, &other, 0).unwrap().value, 0.0);
        let own = QuantitySpec::new(QuantityKind::R3, Framework::Regular, Endpoints::Pair(0, 0)).visiting(&[0]);
        assert_eq!(enumerate(&w, &own, 0).unwrap().value, 1.0);
    }

    #[test]
    fn layered_sums_equal_explicit_walks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = oracle_weight_matrix(4, &mut rng).unwrap();
        let specs = [
            QuantitySpec::new(QuantityKind::R1, Framework::Regular, Endpoints::All),
            QuantitySpec::new(QuantityKind::R2, Framework::Hitting, Endpoints::All),
            QuantitySpec::new(QuantityKind::R7, Framework::Regular, Endpoints::Pair(0, 3)).visiting(&[1, 2]),
            QuantitySpec::new(QuantityKind::R9, Framework::Hitting, Endpoints::Pair(1, 0)).avoiding(&[2, 3]),
            QuantitySpec::new(QuantityKind::R16, Framework::Regular, Endpoints::Pair(2, 2)).counting(&[1, 2]),
            QuantitySpec::new(QuantityKind::R18, Framework::Hitting, Endpoints::All).counting(&[3, 3]),
            QuantitySpec::new(QuantityKind::R17, Framework::Hitting, Endpoints::Pair(0, 1)).counting(&[1]),
        ];
        for spec in &specs {
            let a = enumerate(&w, spec, 7).unwrap();
            let b = enumerate_depth_first(&w, spec, 7).unwrap();
            assert_abs_diff_eq!(a.value, b.value, epsilon = 1e-13 * a.value.abs().max(1.0));
            assert_eq!(a.remainder_bound, b.remainder_bound);
        }
    }

    #[test]
    fn tail_bound_shrinks_and_sums_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = oracle_weight_matrix(5, &mut rng).unwrap();
        let spec = QuantitySpec::new(QuantityKind::R6, Framework::Hitting, Endpoints::Pair(0, 4)).visiting(&[2]);
        let tables = PathWeightTables::new(&w).unwrap();
        let closed = tables.zh_plus_node(2).unwrap()[(0, 4)];
        let mut last = (0.0, f64::INFINITY);
        for depth in [2, 4, 8, 16, 32] {
            let r = enumerate(&w, &spec, depth).unwrap();
            assert!(r.value >= last.0);
            assert!(r.remainder_bound <= last.1);
            assert!(r.value <= closed + 1e-12);
            assert!(closed - r.value <= r.remainder_bound + 1e-12);
            last = (r.value, r.remainder_bound);
        }
    }

    #[test]
    fn probabilities_sum_to_one_with_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = oracle_weight_matrix(4, &mut rng).unwrap();
        let total = PathWeightTables::new(&w).unwrap().z_total();
        let spec = QuantitySpec::new(QuantityKind::Normalizer, Framework::Regular, Endpoints::All);
        let mut prev = f64::INFINITY;
        for depth in [4, 8, 16, 32, 64] {
            let r = enumerate(&w, &spec, depth).unwrap();
            let gap = 1.0 - r.value / total;
            assert!(gap >= -1e-14 && gap <= r.remainder_bound / total + 1e-14);
            assert!(gap <= prev);
            prev = gap;
        }
        assert!(prev < 1e-9);
    }

    #[test]
    fn g2_verifies() {
        let report = verify_all(&g2(), 1e-8).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn corrupted_fundamental_fails_on_r1_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = oracle_weight_matrix(4, &mut rng).unwrap();
        let tables = PathWeightTables::new(&w)
            .unwrap()
            .with_corrupted_fundamental_entry(1, 2, 1e-3);
        let report = verify_tables(&w, &tables, 1e-8).unwrap();
        assert!(!report.passed());
        assert_eq!(report.first_failure().unwrap().label, "R1");
    }

    #[test]
    fn guards() {
        let w = validate_weight_matrix(DMatrix::zeros(9, 9)).unwrap();
        let spec = QuantitySpec::new(QuantityKind::R1, Framework::Regular, Endpoints::Pair(0, 0));
        assert!(matches!(enumerate(&w, &spec, 4), Err(Error::Guard(_))));
        assert!(matches!(enumerate_depth_first(&g2(), &spec, 41), Err(Error::Guard(_))));
        let bad = QuantitySpec::new(QuantityKind::R1, Framework::Regular, Endpoints::Pair(0, 5));
        assert!(matches!(enumerate(&g2(), &bad, 4), Err(Error::InvalidNode { .. })));
    }

    #[test]
    fn g2_derivative_sample() {
        let w = g2();
        let t = PathWeightTables::new(&w).unwrap();
        assert_abs_diff_eq!(t.first_derivative(0, 0, 0, 1), 0.625, epsilon = 1e-14);
        let r = finite_difference_check(&w, 50, 1e-6, 7).unwrap();
        assert!(r.max_first_error < 1e-4 && r.max_second_error < 1e-4, "{r:?}");
    }

    #[test]
    fn zero_matrix_derivatives() {
        let w = validate_weight_matrix(DMatrix::zeros(3, 3)).unwrap();
        let r = finite_difference_check(&w, 40, 1e-6, 1).unwrap();
        assert!(r.max_first_error < 1e-8 && r.max_second_error < 1e-6, "{r:?}");
    }
}
