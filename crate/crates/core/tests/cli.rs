use std::path::Path;
use std::process::{Command, Output};

use bagofpaths::cli::parse_matrix_csv;
use bagofpaths::WeightedGraph;

fn bop(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bop"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run bop")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

// W = [[0, 0.5], [0.4, 0]] at β = 1 through explicit costs ln 2 and ln 2.5
fn g2_file(dir: &Path) {
    let text = format!("1 2 1.0 {}\n2 1 1.0 {}\n", 2f64.ln(), 2.5f64.ln());
    std::fs::write(dir.join("g2.tsv"), text).unwrap();
}

fn dense_file(dir: &Path) {
    let mut text = String::new();
    for i in 1..=5 {
        for j in 1..=5 {
            if i != j {
                text.push_str(&format!("{i} {j} 1\n"));
            }
        }
    }
    std::fs::write(dir.join("dense.tsv"), text).unwrap();
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    g2_file(dir.path());
    dense_file(dir.path());
    let ok = bop(dir.path(), &["validate", "--graph", "g2.tsv", "--beta", "1"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stderr(&ok));
    let out = stdout(&ok);
    let rho: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("rho\t"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((rho - 0.2f64.sqrt()).abs() < 1e-12, "{out}");

    let tiny = bop(dir.path(), &["validate", "--graph", "dense.tsv", "--beta", "1e-9"]);
    assert_eq!(tiny.status.code(), Some(1));
    assert!(stderr(&tiny).contains("spectral radius"), "{}", stderr(&tiny));

    let missing = bop(dir.path(), &["validate", "--graph", "nope.tsv", "--beta", "1"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("I/O error"));
}

#[test]
fn kernel_outputs() {
    let dir = tempfile::tempdir().unwrap();
    dense_file(dir.path());
    let o = bop(
        dir.path(),
        &[
            "kernel",
            "--graph",
            "dense.tsv",
            "--beta",
            "1",
            "--method",
            "corh",
            "--out",
            "k.csv",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("k.csv")).unwrap();
    assert!(text.starts_with("#nodes: 1,2,3,4,5\n"));
    let (ids, k) = parse_matrix_csv(&text).unwrap();
    assert_eq!(ids, vec![1, 2, 3, 4, 5]);
    for i in 0..5 {
        assert_eq!(k[(i, i)], 1.0);
    }

    let o = bop(
        dir.path(),
        &[
            "kernel",
            "--graph",
            "dense.tsv",
            "--beta",
            "0.5",
            "--method",
            "bopdist",
            "--out",
            "d.csv",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let (_, d) = parse_matrix_csv(&std::fs::read_to_string(dir.path().join("d.csv")).unwrap()).unwrap();
    assert_eq!(d.clone(), d.transpose());
    assert!(d.diagonal().iter().all(|&v| v == 0.0));

    // the written text round-trips bit for bit
    let rewritten = bagofpaths::cli::format_matrix_csv(&ids, &k);
    assert_eq!(rewritten, text);
}

#[test]
fn kernel_from_direct_weights() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("w.csv"), "#nodes: 1,2,3\n0,0.5,0.5\n0,0,0\n0,0,0\n").unwrap();
    let o = bop(
        dir.path(),
        &[
            "kernel",
            "--weights-direct",
            "w.csv",
            "--method",
            "cov",
            "--out",
            "k.csv",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = bop(
        dir.path(),
        &["kernel", "--graph", "x.tsv", "--method", "cov", "--out", "k.csv"],
    );
    assert_eq!(o.status.code(), Some(1), "missing --beta is a usage error");
    let o = bop(dir.path(), &["validate", "--graph", "x.tsv", "--beta", "1", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn degenerate_variance_names_the_node() {
    let dir = tempfile::tempdir().unwrap();
    // a single node lies on every path, so its presence never varies
    std::fs::write(dir.path().join("w.csv"), "#nodes: 30\n0.5\n").unwrap();
    let o = bop(
        dir.path(),
        &[
            "kernel",
            "--weights-direct",
            "w.csv",
            "--method",
            "cor",
            "--out",
            "k.csv",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("node 30"), "{}", stderr(&o));
}

fn read_tsv(path: &Path) -> Vec<(u64, f64)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut f = l.split('\t');
            (f.next().unwrap().parse().unwrap(), f.next().unwrap().parse().unwrap())
        })
        .collect()
}

#[test]
fn betweenness_outputs() {
    let dir = tempfile::tempdir().unwrap();
    g2_file(dir.path());
    let o = bop(
        dir.path(),
        &[
            "betweenness",
            "--graph",
            "g2.tsv",
            "--beta",
            "1",
            "--measure",
            "presence",
            "--out",
            "p.tsv",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let p = read_tsv(&dir.path().join("p.tsv"));
    assert_eq!(p[0].0, 1);
    assert!((p[0].1 - 1.4 * 1.875 / 3.625).abs() < 1e-12);

    let o = bop(
        dir.path(),
        &[
            "betweenness",
            "--graph",
            "g2.tsv",
            "--beta",
            "1",
            "--measure",
            "occurrence",
            "--out",
            "o.tsv",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let occ = read_tsv(&dir.path().join("o.tsv"));
    for (a, b) in occ.iter().zip(&p) {
        assert!(a.1 >= b.1);
    }
}

#[test]
fn star_center_has_largest_betweenness() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::new();
    for leaf in 2..=5 {
        text.push_str(&format!("1 {leaf} 1\n{leaf} 1 1\n"));
    }
    std::fs::write(dir.path().join("star.tsv"), text).unwrap();
    for measure in ["presence", "presence-hitting", "occurrence", "occurrence-hitting"] {
        let o = bop(
            dir.path(),
            &[
                "betweenness",
                "--graph",
                "star.tsv",
                "--beta",
                "1",
                "--measure",
                measure,
                "--out",
                "b.tsv",
            ],
        );
        assert_eq!(o.status.code(), Some(0));
        let b = read_tsv(&dir.path().join("b.tsv"));
        for leaf in &b[1..] {
            assert!(b[0].1 > leaf.1, "{measure}: {b:?}");
        }
    }
}

#[test]
fn verify_passes_and_detects_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = bop(dir.path(), &["verify", "--trials", "3", "--max-n", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("all checks passed"));

    let o = bop(dir.path(), &["verify", "--trials", "1", "--inject-fault", "1e-3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("first failure: R1"), "{}", stdout(&o));

    let o = bop(dir.path(), &["verify", "--trials", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).is_empty());
    assert!(stderr(&o).contains("warning"));
}

#[test]
fn sbm_files_and_warnings() {
    let dir = tempfile::tempdir().unwrap();
    let o = bop(dir.path(), &["sbm", "--out-graph", "g.tsv", "--out-labels", "l.tsv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let g = WeightedGraph::load(dir.path().join("g.tsv")).unwrap();
    assert_eq!(g.n(), 100);
    let labels = bagofpaths::ssl::load_labels(&g, dir.path().join("l.tsv")).unwrap();
    assert_eq!(labels.iter().filter(|&&c| c == 1).count(), 50);

    let o = bop(
        dir.path(),
        &[
            "sbm",
            "--n",
            "20",
            "--blocks",
            "1",
            "--p-in",
            "0.5",
            "--out-graph",
            "a.tsv",
            "--out-labels",
            "b.tsv",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("single-class"));

    let o = bop(
        dir.path(),
        &[
            "sbm",
            "--n",
            "20",
            "--p-in",
            "0.2",
            "--p-out",
            "0.6",
            "--out-graph",
            "a.tsv",
            "--out-labels",
            "b.tsv",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("inverted community structure"));

    let o = bop(
        dir.path(),
        &[
            "sbm",
            "--n",
            "20",
            "--p-out",
            "0",
            "--out-graph",
            "a.tsv",
            "--out-labels",
            "b.tsv",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn classify_summary_lists_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let o = bop(
        dir.path(),
        &["sbm", "--seed", "3", "--out-graph", "g.tsv", "--out-labels", "l.tsv"],
    );
    assert_eq!(o.status.code(), Some(0));
    let o = bop(
        dir.path(),
        &[
            "classify", "--graph", "g.tsv", "--labels", "l.tsv", "--reps", "1", "--seed", "2", "--out", "out",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = std::fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "method,sqrt-eigenvalue,unit-norm");
    assert_eq!(lines.len(), 10);
    let grid = std::fs::read_to_string(dir.path().join("out/corh.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 5 * 2);
}

#[test]
fn classify_rejects_mismatched_labels() {
    let dir = tempfile::tempdir().unwrap();
    g2_file(dir.path());
    std::fs::write(dir.path().join("l.tsv"), "1 0\n3 1\n").unwrap();
    let o = bop(
        dir.path(),
        &["classify", "--graph", "g2.tsv", "--labels", "l.tsv", "--out", "out"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("node 3"), "{}", stderr(&o));
}
