//! The `bop` command-line interface.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{WeightMatrix, WeightedGraph};
use crate::measures::{kernel, occurrence_betweenness, presence_betweenness, KernelMethod};
use crate::oracle::{finite_difference_check, oracle_weight_matrix, verify_tables, MAX_ORACLE_NODES};
use crate::paths::{Framework, PathWeightTables, CONDITION_WARNING};
use crate::ssl::{
    check_labels, format_labels, load_labels, nested_cv_with_bank, sbm_generate, CvConfig, FeatureBank, FeatureOption,
};

const FD_STEP: f64 = 1e-6;
const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "bop", version, about = "Bag-of-paths kernels, betweenness and distances")]
pub struct Cli {
    /// Worker threads (0 = one per core)
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a graph, build W and report its spectral radius
    Validate {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        beta: f64,
    },
    /// Write one kernel (or the distance) as a matrix CSV
    Kernel {
        #[command(flatten)]
        input: WeightInput,
        #[arg(long)]
        method: KernelMethod,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a betweenness vector as `node_id value` lines
    Betweenness {
        #[command(flatten)]
        input: WeightInput,
        #[arg(long, value_enum)]
        measure: Measure,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every closed form against brute-force path sums on random graphs
    Verify {
        #[arg(long, default_value_t = 6)]
        max_n: usize,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        /// finite-difference samples per graph
        #[arg(long, default_value_t = 100)]
        fd_samples: usize,
        /// corrupt one entry of Z by this amount before checking
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
    /// Nested cross-validation of node classification
    Classify {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// comma-separated methods (default: all nine)
        #[arg(long, value_delimiter = ',')]
        methods: Vec<KernelMethod>,
        /// fix β instead of tuning it over the grid
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, default_value_t = 0.2)]
        rate: f64,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a stochastic block model graph and its labels
    Sbm {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 0.1)]
        p_in: f64,
        #[arg(long, default_value_t = 0.01)]
        p_out: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out_graph: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
    },
}

/// Either a graph with β, or a weight matrix given directly.
#[derive(Debug, clap::Args)]
pub struct WeightInput {
    #[arg(long, required_unless_present = "weights_direct", conflicts_with = "weights_direct")]
    graph: Option<PathBuf>,
    #[arg(long, required_unless_present = "weights_direct")]
    beta: Option<f64>,
    /// matrix CSV holding W itself
    #[arg(long)]
    weights_direct: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Measure {
    Presence,
    PresenceHitting,
    Occurrence,
    OccurrenceHitting,
}

impl clap::ValueEnum for KernelMethod {
    fn value_variants<'a>() -> &'a [Self] {
        &KernelMethod::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

impl WeightInput {
    fn load(&self) -> Result<(Vec<u64>, WeightMatrix)> {
        if let Some(path) = &self.weights_direct {
            let (ids, w) = read_matrix_csv(path)?;
            return Ok((ids, WeightMatrix::new(w)?));
        }
        let graph = self.graph.as_ref().expect("clap enforces --graph");
        let beta = self.beta.expect("clap enforces --beta");
        let g = WeightedGraph::load(graph)?;
        let w = WeightMatrix::from_graph(&g, beta)?;
        Ok((g.node_ids().to_vec(), w))
    }
}

/// Runs a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(&cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn execute(command: &Command) -> Result<i32> {
    match command {
        Command::Validate { graph, beta } => {
            let g = WeightedGraph::load(graph)?;
            let w = WeightMatrix::from_graph(&g, *beta)?;
            let tables = PathWeightTables::new(&w)?;
            println!("nodes\t{}", g.n());
            println!("edges\t{}", g.edge_count());
            println!("rho\t{:.16e}", w.spectral_radius());
            println!("condition\t{:.6e}", tables.condition());
            if tables.condition() > CONDITION_WARNING {
                eprintln!(
                    "warning: I - W is ill-conditioned (condition {:.3e})",
                    tables.condition()
                );
            }
            Ok(0)
        }
        Command::Kernel { input, method, out } => {
            let (ids, w) = input.load()?;
            let tables = PathWeightTables::new(&w)?;
            let k = kernel(&tables, *method, w.beta()).map_err(|e| with_node_ids(e, &ids))?;
            write_file(out, &format_matrix_csv(&ids, &k.values))?;
            Ok(0)
        }
        Command::Betweenness { input, measure, out } => {
            let (ids, w) = input.load()?;
            let tables = PathWeightTables::new(&w)?;
            let values = match measure {
                Measure::Presence => presence_betweenness(&tables, Framework::Regular),
                Measure::PresenceHitting => presence_betweenness(&tables, Framework::Hitting),
                Measure::Occurrence => occurrence_betweenness(&tables, Framework::Regular),
                Measure::OccurrenceHitting => occurrence_betweenness(&tables, Framework::Hitting),
            };
            let text: String = ids
                .iter()
                .zip(values.iter())
                .map(|(id, v)| format!("{id}\t{v:.16e}\n"))
                .collect();
            write_file(out, &text)?;
            Ok(0)
        }
        Command::Verify {
            max_n,
            trials,
            seed,
            tol,
            fd_samples,
            inject_fault,
        } => {
            let (text, passed) = verify_report(*max_n, *trials, *seed, *tol, *fd_samples, *inject_fault)?;
            print!("{text}");
            Ok(if passed { 0 } else { 1 })
        }
        Command::Classify {
            graph,
            labels,
            methods,
            beta,
            rate,
            folds,
            reps,
            seed,
            out,
        } => {
            let g = WeightedGraph::load(graph)?;
            let labels = load_labels(&g, labels)?;
            let methods = if methods.is_empty() {
                KernelMethod::ALL.to_vec()
            } else {
                methods.clone()
            };
            let mut config = CvConfig {
                rate: *rate,
                folds: *folds,
                reps: *reps,
                ..CvConfig::default()
            };
            if let Some(b) = beta {
                config.betas = vec![*b];
            }
            let files = classify(&g, &labels, &methods, &config, *seed)?;
            for (name, contents) in &files {
                write_file(&out.join(name), contents)?;
            }
            print!(
                "{}",
                files.iter().find(|f| f.0 == "summary.txt").map_or("", |f| f.1.as_str())
            );
            Ok(0)
        }
        Command::Sbm {
            n,
            blocks,
            p_in,
            p_out,
            seed,
            out_graph,
            out_labels,
        } => {
            if *blocks == 1 {
                eprintln!("warning: a single block yields a single-class graph");
            }
            if p_in < p_out {
                eprintln!("warning: inverted community structure (p_in < p_out)");
            }
            let (g, labels) = sbm_generate(*n, *blocks, *p_in, *p_out, *seed)?;
            write_file(out_graph, &format_edges(&g))?;
            write_file(out_labels, &format_labels(&g, &labels))?;
            Ok(0)
        }
    }
}

fn with_node_ids(e: Error, ids: &[u64]) -> Error {
    match e {
        Error::DegenerateVariance { node, variance } => Error::InvalidArgument(format!(
            "degenerate variance {variance:e} at node {}",
            ids.get(node).copied().unwrap_or(node as u64 + 1)
        )),
        other => other,
    }
}

/// Text report of the oracle suite on `trials` random graphs with
/// `n ∈ [3, max_n]`, and whether every check passed.
pub fn verify_report(
    max_n: usize,
    trials: usize,
    seed: u64,
    tol: f64,
    fd_samples: usize,
    inject_fault: Option<f64>,
) -> Result<(String, bool)> {
    if !(3..=MAX_ORACLE_NODES).contains(&max_n) {
        return Err(Error::InvalidArgument(format!(
            "--max-n must lie in [3, {MAX_ORACLE_NODES}]"
        )));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("--tol must be positive".into()));
    }
    let mut out = String::new();
    if trials == 0 {
        eprintln!("warning: no trials requested");
        return Ok((out, true));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passed = true;
    for trial in 0..trials {
        let n = rng.random_range(3..=max_n);
        let w = oracle_weight_matrix(n, &mut rng)?;
        let mut tables = PathWeightTables::new(&w)?;
        if let Some(delta) = inject_fault {
            tables = tables.with_corrupted_fundamental_entry(0, 1, delta);
        }
        let report = verify_tables(&w, &tables, tol)?;
        let fd = finite_difference_check(&w, fd_samples, FD_STEP, seed ^ trial as u64)?;
        let fd_ok = fd.max_first_error < FD_TOLERANCE && fd.max_second_error < FD_TOLERANCE;
        let _ = writeln!(out, "trial {} (rho {:.4})", trial + 1, w.spectral_radius());
        out.push_str(&report.to_string());
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>12.3e} {:>12.3e}  {}",
            "d/dw",
            fd.samples,
            fd.max_first_error,
            fd.max_second_error,
            if fd_ok { "ok" } else { "FAIL" }
        );
        if let Some(k) = report.first_failure() {
            let (at, dev) = k.first_failure.clone().unwrap_or_default();
            let _ = writeln!(out, "first failure: {} {at} deviation {dev:.3e}", k.label);
        }
        out.push('\n');
        passed &= report.passed() && fd_ok;
    }
    let _ = writeln!(out, "{}", if passed { "all checks passed" } else { "FAILED" });
    Ok((out, passed))
}

/// Runs nested CV for each method and renders the report files:
/// one `<method>.csv` grid per method plus `summary.csv` and `summary.txt`.
pub fn classify(
    g: &WeightedGraph,
    labels: &[i64],
    methods: &[KernelMethod],
    config: &CvConfig,
    seed: u64,
) -> Result<Vec<(String, String)>> {
    check_labels(g, labels, config)?;
    let bank = FeatureBank::build(g, methods, &config.betas, config.dims);
    let mut files = Vec::new();
    let mut csv = String::from("method,sqrt-eigenvalue,unit-norm\n");
    let mut txt = format!(
        "{:<8} {:>16} {:>16}\n",
        "method",
        FeatureOption::SqrtEigenvalue.name(),
        FeatureOption::UnitNorm.name()
    );
    for &m in methods {
        let report = nested_cv_with_bank(&bank, labels, m, config, seed)?;
        let (a, b) = (
            report.mean_accuracy(FeatureOption::SqrtEigenvalue),
            report.mean_accuracy(FeatureOption::UnitNorm),
        );
        let _ = writeln!(csv, "{m},{a:.6},{b:.6}");
        let _ = writeln!(txt, "{:<8} {:>16.4} {:>16.4}", m.name(), a, b);
        if !report.skipped_betas.is_empty() {
            let _ = writeln!(txt, "  ({m}: skipped β {:?})", report.skipped_betas);
        }
        files.push((format!("{m}.csv"), report.to_csv()));
    }
    files.push(("summary.csv".into(), csv));
    files.push(("summary.txt".into(), txt));
    Ok(files)
}

/// Matrix CSV: a `#nodes: id1,id2,…` header, then one row per line in
/// 17-significant-digit scientific notation.
pub fn format_matrix_csv(ids: &[u64], m: &DMatrix<f64>) -> String {
    let header: Vec<String> = ids.iter().map(u64::to_string).collect();
    let mut out = format!("#nodes: {}\n", header.join(","));
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_matrix_csv(text: &str) -> Result<(Vec<u64>, DMatrix<f64>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(Error::Parse {
            line: 1,
            message: "empty matrix file".into(),
        });
    };
    let ids_text = header.trim().strip_prefix("#nodes:").ok_or_else(|| Error::Parse {
        line: 1,
        message: "expected `#nodes:` header".into(),
    })?;
    let ids: Vec<u64> = ids_text
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            line: 1,
            message: format!("invalid node id: {e}"),
        })?;
    let n = ids.len();
    let mut values = Vec::with_capacity(n * n);
    let mut rows = 0;
    for (k, line) in lines {
        let row: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: k + 1,
                message: format!("invalid number: {e}"),
            })?;
        if row.len() != n {
            return Err(Error::Parse {
                line: k + 1,
                message: format!("expected {n} values, found {}", row.len()),
            });
        }
        values.extend(row);
        rows += 1;
    }
    if rows != n {
        return Err(Error::NotSquare { rows, cols: n });
    }
    Ok((ids, DMatrix::from_row_slice(n, n, &values)))
}

pub fn read_matrix_csv(path: &Path) -> Result<(Vec<u64>, DMatrix<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_csv(&text)
}

/// Edge-list TSV `src dst affinity`.
pub fn format_edges(g: &WeightedGraph) -> String {
    g.edges()
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.src, e.dst, e.affinity))
        .collect()
}
