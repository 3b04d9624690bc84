//! Acceptance suite: one PASS/FAIL line per criterion.

use std::process::Command;
use std::time::Instant;

use bagofpaths::cli::verify_report;
use bagofpaths::measures::{absorption_probability, bop_distance, copresence_moments, kernel, KernelMethod};
use bagofpaths::oracle::{
    enumerate, finite_difference_check, monte_carlo_absorption, oracle_weight_matrix, random_killed_chain, Endpoints,
    QuantityKind, QuantitySpec,
};
use bagofpaths::paths::{Framework, PairForm, PathWeightTables};
use bagofpaths::ssl::{nested_cv_with_bank, sbm_generate, CvConfig, FeatureBank, FeatureOption};
use bagofpaths::{validate_weight_matrix, WeightMatrix};
use nalgebra::{dmatrix, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn rel_dev(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y).abs();
            if d == 0.0 {
                0.0
            } else {
                d / x.abs().max(y.abs())
            }
        })
        .fold(0.0, f64::max)
}

// relative to the matching entry of Z, the magnitude every avoidance formula
// subtracts from
fn rel_dev_scaled(a: &DMatrix<f64>, b: &DMatrix<f64>, scale: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .zip(scale.iter())
        .map(|((&x, &y), &s)| (x - y).abs() / x.abs().max(y.abs()).max(s.abs()))
        .fold(0.0, f64::max)
}

fn random_w(seed: u64, n: usize) -> WeightMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    oracle_weight_matrix(n, &mut rng).expect("oracle graph")
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let (report, passed) = verify_report(6, 20, 42, 1e-8, 100, None).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    if !passed {
        let failing: Vec<&str> = report
            .lines()
            .filter(|l| l.contains("FAIL") || l.starts_with("first failure"))
            .collect();
        return Err(failing.join("; "));
    }
    if secs >= 120.0 {
        return Err(format!("took {secs:.1} s"));
    }
    Ok(format!("20 graphs, n in [3, 6], tol 1e-8, {secs:.2} s"))
}

fn identity_suite() -> Outcome {
    let mut worst = [0.0f64; 5];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for g in 0..50 {
        let n = rng.random_range(3..=12);
        let w = random_w(1000 + g, n);
        let t = PathWeightTables::new(&w).map_err(|e| e.to_string())?;
        let z = t.fundamental().clone();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let forms: Vec<_> = PairForm::ALL
                    .iter()
                    .map(|&f| t.z_minus_pair(i, j, f).unwrap())
                    .collect();
                let hforms: Vec<_> = PairForm::ALL
                    .iter()
                    .map(|&f| t.zh_minus_pair(i, j, f).unwrap())
                    .collect();
                for k in 1..3 {
                    worst[0] = worst[0].max(rel_dev_scaled(&forms[0], &forms[k], &z));
                    worst[0] = worst[0].max(rel_dev_scaled(&hforms[0], &hforms[k], t.hitting()));
                }
                let pair = [i, j];
                worst[1] = worst[1].max(rel_dev_scaled(
                    &t.z_plus_set(&pair, Framework::Regular).unwrap(),
                    &t.z_plus_pair(i, j).unwrap(),
                    &z,
                ));
                worst[1] = worst[1].max(rel_dev_scaled(
                    &t.z_plus_set(&pair, Framework::Hitting).unwrap(),
                    &t.zh_plus_pair(i, j).unwrap(),
                    t.hitting(),
                ));
            }
            let sum = t.z_plus_node(i).unwrap() + t.z_minus_node(i).unwrap().values();
            worst[3] = worst[3].max(rel_dev(&sum, &z));
            let sum = t.zh_plus_node(i).unwrap() + t.zh_minus_node(i).unwrap().values();
            worst[4] = worst[4].max(rel_dev(&sum, t.hitting()));
        }
        for _ in 0..5 {
            let mut set = Vec::new();
            while set.len() < 3 {
                let v = rng.random_range(0..n);
                if !set.contains(&v) {
                    set.push(v);
                }
            }
            let base = t.z_minus_set(&set).unwrap();
            for perm in [[0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
                let order: Vec<usize> = perm.iter().map(|&k| set[k]).collect();
                worst[2] = worst[2].max(rel_dev_scaled(&t.z_minus_set(&order).unwrap(), &base, &z));
            }
        }
    }
    let detail = format!(
        "pair forms {:.1e}, set vs pair {:.1e}, elimination order {:.1e}, partition {:.1e} / {:.1e}",
        worst[0], worst[1], worst[2], worst[3], worst[4]
    );
    if worst[0] < 1e-10 && worst[1] < 1e-10 && worst[2] < 1e-10 && worst[3] < 1e-12 && worst[4] < 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn kernel_properties() -> Outcome {
    let mut cases: Vec<(String, PathWeightTables)> = (0..20)
        .map(|g| {
            (
                format!("random #{g}"),
                PathWeightTables::new(&random_w(2000 + g, 30)).unwrap(),
            )
        })
        .collect();
    let (sbm, _) = sbm_generate(100, 2, 0.1, 0.01, 1).map_err(|e| e.to_string())?;
    for beta in [1e-2, 1.0] {
        let w = WeightMatrix::from_graph(&sbm, beta).map_err(|e| e.to_string())?;
        cases.push((
            format!("sbm beta={beta}"),
            PathWeightTables::new(&w).map_err(|e| e.to_string())?,
        ));
    }
    let (mut asym, mut psd, mut diag, mut presence) = (0.0f64, f64::INFINITY, 0.0f64, 0.0f64);
    for (name, t) in &cases {
        for m in KernelMethod::KERNELS {
            let k = kernel(t, m, None).map_err(|e| format!("{name} {m}: {e}"))?;
            asym = asym.max((&k.values - k.values.transpose()).amax());
            let (lo, hi) = k.eigen_range();
            psd = psd.min(lo / hi);
            if m.parts().unwrap().2 {
                diag = diag.max(k.values.diagonal().iter().map(|d| (d - 1.0).abs()).fold(0.0, f64::max));
            }
        }
        for fw in [Framework::Regular, Framework::Hitting] {
            let mom = copresence_moments(t, fw).unwrap();
            for i in 0..t.n() {
                presence = presence.max((mom.second[(i, i)] - mom.first[i]).abs());
            }
        }
    }
    let detail = format!(
        "{} graphs: asymmetry {asym:.1e}, min eig / max eig {psd:.1e}, cor diag {diag:.1e}, E[δiδi]-E[δi] {presence:.1e}",
        cases.len()
    );
    if asym <= 1e-12 && psd >= -1e-8 && diag <= 1e-10 && presence <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn metric_axioms() -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    for g in 0..20 {
        let t = PathWeightTables::new(&random_w(3000 + g, 20)).unwrap();
        let d = bop_distance(&t).map_err(|e| e.to_string())?.values;
        let n = d.nrows();
        for i in 0..n {
            if d[(i, i)] != 0.0 {
                return Err(format!("graph {g}: d[{i},{i}] = {}", d[(i, i)]));
            }
            for j in 0..n {
                if d[(i, j)] != d[(j, i)] {
                    return Err(format!("graph {g}: asymmetric at ({i}, {j})"));
                }
                for k in 0..n {
                    worst = worst.max(d[(i, k)] - d[(i, j)] - d[(j, k)]);
                }
            }
        }
    }
    let detail = format!("20 graphs n=20, max triangle excess {worst:.1e}");
    if worst <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn derivative_checks() -> Outcome {
    let (mut first, mut second) = (0.0f64, 0.0f64);
    for g in 0..10 {
        let r = finite_difference_check(&random_w(4000 + g, 4), 100, 1e-6, g).map_err(|e| e.to_string())?;
        first = first.max(r.max_first_error);
        second = second.max(r.max_second_error);
    }
    let detail = format!("10 graphs x 100 samples, max relative error {first:.1e} (first) / {second:.1e} (second)");
    if first < 1e-4 && second < 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fixture_regression() -> Outcome {
    let w = validate_weight_matrix(dmatrix![0.0, 0.5; 0.4, 0.0]).unwrap();
    let t = PathWeightTables::new(&w).unwrap();
    let depth = 60;
    let en = |spec: QuantitySpec| enumerate(&w, &spec, depth).unwrap();
    let pair = |k, fw, s, u| QuantitySpec::new(k, fw, Endpoints::Pair(s, u));
    let all = |k, fw| QuantitySpec::new(k, fw, Endpoints::All);
    let reg = Framework::Regular;
    let hit = Framework::Hitting;

    let z_total = en(all(QuantityKind::Normalizer, reg)).value;
    let zh_total = en(all(QuantityKind::Normalizer, hit)).value;
    let through = en(all(QuantityKind::PresenceMoment, reg).visiting(&[0])).value;
    let through_h = en(all(QuantityKind::PresenceMoment, hit).visiting(&[0])).value;
    let occ = en(all(QuantityKind::OccurrenceMoment, reg).counting(&[0])).value;
    let p = through / z_total;
    let dist =
        -(en(pair(QuantityKind::R2, hit, 0, 1)).value.ln() + en(pair(QuantityKind::R2, hit, 1, 0)).value.ln()) / 2.0;

    let presence = bagofpaths::presence_betweenness(&t, reg);
    let presence_h = bagofpaths::presence_betweenness(&t, hit);
    let occurrence = bagofpaths::occurrence_betweenness(&t, reg);
    let cov = kernel(&t, KernelMethod::Cov, None).unwrap().values;
    let d = bop_distance(&t).unwrap().values;

    // (label, listed value, closed form, enumerated)
    let mut rows = vec![];
    for s in 0..2 {
        for u in 0..2 {
            let listed_z = [[1.25, 0.625], [0.5, 1.25]][s][u];
            let listed_zh = [[1.0, 0.5], [0.4, 1.0]][s][u];
            rows.push(("z", listed_z, t.z(s, u), en(pair(QuantityKind::R1, reg, s, u)).value));
            rows.push(("zh", listed_zh, t.zh(s, u), en(pair(QuantityKind::R2, hit, s, u)).value));
        }
    }
    rows.push((
        "z(+2)11",
        0.25,
        t.z_plus_node(1).unwrap()[(0, 0)],
        en(pair(QuantityKind::R3, reg, 0, 0).visiting(&[1])).value,
    ));
    rows.push((
        "z(-2)11",
        1.0,
        t.z_minus_node(1).unwrap()[(0, 0)],
        en(pair(QuantityKind::R4, reg, 0, 0).avoiding(&[1])).value,
    ));
    rows.push(("presence", 1.4 * 1.875 / 3.625, presence[0], p));
    rows.push(("presence hitting", 1.9 / 2.9, presence_h[0], through_h / zh_total));
    rows.push(("occurrence", 1.75 * 1.875 / 3.625, occurrence[0], occ / z_total));
    rows.push(("cov(δ1,δ1)", p * (1.0 - p), cov[(0, 0)], p * (1.0 - p)));
    rows.push(("d12", -(0.5f64.ln() + 0.4f64.ln()) / 2.0, d[(0, 1)], dist));

    // the listed decimal prefixes
    let prefixes = [
        ("presence", 0.7241379),
        ("presence hitting", 0.6551724),
        ("occurrence", 0.9051724),
        ("cov(δ1,δ1)", 0.199762),
        ("d12", 0.8047189),
    ];
    let mut worst = 0.0f64;
    for (label, listed, closed, enumerated) in &rows {
        let dev = (closed - listed).abs().max((enumerated - listed).abs());
        worst = worst.max(dev);
        if dev > 1e-9 {
            return Err(format!(
                "{label}: listed {listed}, closed form {closed}, enumerated {enumerated}"
            ));
        }
    }
    for (label, prefix) in prefixes {
        let value = rows.iter().find(|r| r.0 == label).unwrap().1;
        let ulp = 10f64.powi(2 - format!("{prefix}").len() as i32);
        if !(value >= prefix && value - prefix < ulp) {
            return Err(format!("{label}: {value} does not start with {prefix}"));
        }
    }
    Ok(format!(
        "{} values, max deviation {worst:.1e}, each re-derived by path enumeration",
        rows.len()
    ))
}

fn semi_supervised() -> Outcome {
    let start = Instant::now();
    let config = CvConfig::default();
    let methods = KernelMethod::ALL;
    let mut sums = vec![[0.0f64; 2]; methods.len()];
    let seeds = 1..=5u64;
    for seed in seeds.clone() {
        let (g, labels) = sbm_generate(100, 2, 0.1, 0.01, seed).map_err(|e| e.to_string())?;
        let bank = FeatureBank::build(&g, &methods, &config.betas, config.dims);
        for (m, method) in methods.iter().enumerate() {
            let r = nested_cv_with_bank(&bank, &labels, *method, &config, seed).map_err(|e| e.to_string())?;
            for (o, opt) in FeatureOption::ALL.iter().enumerate() {
                sums[m][o] += r.mean_accuracy(*opt);
            }
        }
    }
    let count = seeds.count() as f64;
    let mut lines = Vec::new();
    let mut ok = true;
    for (m, method) in methods.iter().enumerate() {
        let best = (sums[m][0] / count).max(sums[m][1] / count);
        ok &= best >= 0.90;
        lines.push(format!("{method} {best:.3}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 600.0;
    let detail = format!(
        "best-option mean accuracy over 5 seeds: {} ({secs:.0} s)",
        lines.join(", ")
    );
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn absorbing_chains() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut typo_rejected = 0;
    for chain in 0..5 {
        let absorbing: Vec<usize> = if chain % 2 == 0 { vec![3, 4] } else { vec![1, 3] };
        let w = random_killed_chain(5, &absorbing, &mut rng).map_err(|e| e.to_string())?;
        let start = 0;
        let closed = absorption_probability(&w, &absorbing, start).map_err(|e| e.to_string())?;
        let (est, se) = monte_carlo_absorption(&w, &absorbing, start, 100_000, &mut rng);
        let t = PathWeightTables::new(&w).unwrap();
        let mut rejected = false;
        for k in 0..absorbing.len() {
            let z = (closed[k] - est[k]).abs() / se[k];
            worst = worst.max(z);
            // the alternative reading divides by Σ_a z_at, which is 1 here
            let alt_den: f64 = absorbing.iter().map(|&a| t.z(a, absorbing[k])).sum();
            let alt = t.z(start, absorbing[k]) / alt_den;
            rejected |= (alt - est[k]).abs() > 3.0 * se[k];
        }
        typo_rejected += rejected as usize;
    }
    let detail = format!(
        "5 chains x 1e5 walks, max |closed - MC| = {worst:.2} SE; z_st / Σ_a z_at rejected on {typo_rejected}/5 chains"
    );
    if worst <= 3.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    let (g, labels) = sbm_generate(100, 2, 0.1, 0.01, 1).map_err(|e| e.to_string())?;
    std::fs::write(root.join("g.tsv"), bagofpaths::cli::format_edges(&g)).unwrap();
    std::fs::write(root.join("l.tsv"), bagofpaths::ssl::format_labels(&g, &labels)).unwrap();
    let run = |threads: &str, out: &str| -> Result<Vec<(String, Vec<u8>)>, String> {
        let status = Command::new(env!("CARGO_BIN_EXE_bop"))
            .args([
                "classify",
                "--graph",
                "g.tsv",
                "--labels",
                "l.tsv",
                "--seed",
                "7",
                "--out",
                out,
                "--threads",
                threads,
            ])
            .current_dir(root)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(root.join(out))
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (
                    e.file_name().to_string_lossy().into_owned(),
                    std::fs::read(e.path()).unwrap(),
                )
            })
            .collect();
        files.sort();
        Ok(files)
    };
    let a = run("1", "a")?;
    let b = run("1", "b")?;
    let c = run("4", "c")?;
    if a.len() != 11 {
        return Err(format!("expected 11 report files, found {}", a.len()));
    }
    if a != b {
        return Err("reports differ between identical runs".into());
    }
    if a != c {
        return Err("reports differ between --threads 1 and --threads 4".into());
    }
    Ok(format!(
        "{} report files byte-identical across 2 runs and --threads 1 / 4",
        a.len()
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("oracle equivalence", oracle_equivalence),
        ("algebraic identities", identity_suite),
        ("kernel properties", kernel_properties),
        ("metric axioms", metric_axioms),
        ("derivative checks", derivative_checks),
        ("fixture regression", fixture_regression),
        ("semi-supervised benchmark", semi_supervised),
        ("absorbing chains", absorbing_chains),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", k + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", k + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
