//! Acceptance criteria, one PASS/FAIL line each. Run with
//! `cargo test --test acceptance`; the process exits nonzero when a hard
//! criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use insider_boost::dataset::Label;
use insider_boost::gbt::{
    evaluate_objective, find_best_split, logloss, logloss_grad_hess, train, GradPair, Hyperparams, Tree,
};
use insider_boost::harness::{
    run_repeated, CellConfig, ExperimentConfig, ExperimentOutcome, ImportanceConfig, SyntheticSpec,
};
use insider_boost::importance::{
    decorrelated_permutation_importance, mdi_importance, permutation_importance, spearman_matrix, ward_cluster,
    CorrelationMatrix, PermutationConfig,
};
use insider_boost::metrics::{auc_roc, derive_rates, ConfusionMatrix, Metric};
use insider_boost::preprocess::EncodedMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn matrix(cols: Vec<Vec<f64>>) -> EncodedMatrix {
    let names = (0..cols.len()).map(|i| format!("f{i}")).collect();
    EncodedMatrix::new(names, cols).unwrap()
}

// 1 ---------------------------------------------------------------------

fn gradient_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let lawful = rng.gen::<bool>();
        let m: f64 = rng.gen_range(-8.0..8.0);
        let f = |x: f64| logloss(lawful, x);
        let e = 1e-3;
        let g_fd = (f(m + e) - f(m - e)) / (2.0 * e);
        let h_fd = (f(m + e) - 2.0 * f(m) + f(m - e)) / (e * e);
        let GradPair { g, h } = logloss_grad_hess(lawful, m);
        worst_g = worst_g.max((g - g_fd).abs());
        worst_h = worst_h.max((h - h_fd).abs());
    }
    outcome(
        worst_g <= 1e-6 && worst_h <= 1e-6,
        format!("max |dg| {worst_g:.2e}, max |dh| {worst_h:.2e} over 1000 pairs"),
    )
}

// 2 ---------------------------------------------------------------------

/// Every midpoint threshold enumerated directly; strict improvement keeps
/// the lowest threshold on ties.
fn stump_oracle(x: &[f64], grads: &[GradPair], lambda: f64, gamma: f64) -> Option<(f64, f64)> {
    let mut distinct: Vec<f64> = x.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let score = |g: f64, h: f64| g * g / (h + lambda);
    let mut best: Option<(f64, f64)> = None;
    for w in distinct.windows(2) {
        let t = w[0] + (w[1] - w[0]) * 0.5;
        let (mut gl, mut hl, mut gr, mut hr) = (0.0, 0.0, 0.0, 0.0);
        for (xi, p) in x.iter().zip(grads) {
            if *xi < t {
                gl += p.g;
                hl += p.h;
            } else {
                gr += p.g;
                hr += p.h;
            }
        }
        let gain = 0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr)) - gamma;
        if best.is_none_or(|(_, b)| gain > b) {
            best = Some((t, gain));
        }
    }
    best.filter(|&(_, g)| g > 0.0)
}

fn stump_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut splits = 0;
    for _ in 0..200 {
        let n = rng.gen_range(2..=32);
        let levels = rng.gen_range(2..=12);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64).collect();
        // dyadic gradients keep every partial sum exact
        let grads: Vec<GradPair> = (0..n)
            .map(|_| GradPair {
                g: rng.gen_range(-8i32..=8) as f64 / 8.0,
                h: rng.gen_range(1i32..=16) as f64 / 16.0,
            })
            .collect();
        let lambda = [0.0, 1.0, 0.5][rng.gen_range(0..3)];
        let gamma = [0.0, 0.0, 0.25][rng.gen_range(0..3)];
        let params = Hyperparams {
            lambda,
            gamma,
            ..Hyperparams::default()
        };
        let rows: Vec<usize> = (0..n).collect();
        let m = matrix(vec![x.clone()]);
        let got = find_best_split(&m, &rows, &[0], &grads, &params).map(|s| (s.feature, s.threshold, s.gain));
        let want = stump_oracle(&x, &grads, lambda, gamma).map(|(t, g)| (0, t, g));
        splits += usize::from(want.is_some());
        if got != want {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} mismatches in 200 datasets ({splits} with a split)"),
    )
}

// 3 ---------------------------------------------------------------------

fn objective_accounting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 300;
    let cols: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let labels: Vec<Label> = (0..n)
        .map(|i| Label::from_bool(cols[0][i] + 0.8 * rng.sample::<f64, _>(StandardNormal) > 0.0))
        .collect();
    let m = matrix(cols);
    let params = Hyperparams {
        ntrees: 15,
        max_depth: 3,
        gamma: 0.0,
        lambda: 0.0,
        ..Hyperparams::default()
    };
    let model = train(&m, &labels, &params).unwrap();
    let margins = model.predict_margin(&m).unwrap();
    // −y·ln p − (1−y)·ln(1−p) with p = 1/(1+e^−m)
    let direct: f64 = margins
        .iter()
        .zip(&labels)
        .map(|(&z, &y)| {
            let p = 1.0 / (1.0 + (-z).exp());
            if y.is_lawful() {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    let obj = evaluate_objective(&model, &m, &labels, &params).unwrap();
    let loss_err = (obj - direct).abs();

    let g1 = Hyperparams { gamma: 1.0, ..params };
    let before = evaluate_objective(&model, &m, &labels, &g1).unwrap();
    let mut extended = model.clone();
    extended.trees.push(Tree::leaf(0.0));
    let after = evaluate_objective(&extended, &m, &labels, &g1).unwrap();
    let delta = after - before;
    outcome(
        loss_err <= 1e-9 && (delta - 1.0).abs() <= 1e-9,
        format!("|Obj - sum log loss| {loss_err:.2e}; zero leaf with gamma 1 adds {delta:.12}"),
    )
}

// 4, 5, 11 ----------------------------------------------------------------

fn experiment(spec: SyntheticSpec, cells: Vec<CellConfig>, seed: u64) -> ExperimentOutcome {
    let config = ExperimentConfig {
        repetitions: 10,
        seed,
        cells,
        importance: ImportanceConfig {
            enabled: false,
            ..ImportanceConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let table = insider_boost::harness::generate_synthetic(&spec).unwrap();
    run_repeated(&table, &config).unwrap()
}

fn mean(outcome: &ExperimentOutcome, cell: usize, metric: Metric) -> f64 {
    outcome.aggregate.cells[cell].mean(metric).unwrap_or(f64::NAN)
}

// 6 ---------------------------------------------------------------------

fn metrics_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut identity_failures = 0;
    for _ in 0..1000 {
        let mut c = || {
            if rng.gen_bool(0.1) {
                0
            } else {
                rng.gen_range(0..100_000u64)
            }
        };
        let cm = ConfusionMatrix {
            tp: c(),
            fn_: c(),
            fp: c(),
            tn: c(),
        };
        if cm.total() == 0 {
            continue;
        }
        let r = derive_rates(&cm).unwrap();
        let ok = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => a + b == 1.0,
            (None, None) => true,
            _ => false,
        };
        if !ok(r.tpr, r.fnr) || !ok(r.tnr, r.fpr) {
            identity_failures += 1;
        }
    }
    let mut worst_auc = 0.0f64;
    for _ in 0..300 {
        let n = rng.gen_range(2..=200);
        let mut labels: Vec<Label> = (0..n).map(|_| Label::from_bool(rng.gen_bool(0.5))).collect();
        labels[0] = Label::Lawful;
        labels[1] = Label::Unlawful;
        // coarse scores force ties
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..20) as f64 / 20.0).collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == Label::Lawful && labels[j] == Label::Unlawful {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        let auc = auc_roc(&labels, &scores).unwrap();
        worst_auc = worst_auc.max((auc - wins / pairs).abs());
    }
    outcome(
        identity_failures == 0 && worst_auc <= 1e-12,
        format!("{identity_failures} identity failures in 1000 matrices; max AUC error {worst_auc:.2e}"),
    )
}

// 7 ---------------------------------------------------------------------

fn oracle_spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |c: &[f64]| -> Vec<f64> {
        c.iter()
            .map(|&x| {
                let less = c.iter().filter(|&&y| y < x).count() as f64;
                let eq = c.iter().filter(|&&y| y == x).count() as f64;
                less + (eq + 1.0) / 2.0
            })
            .collect()
    };
    let (a, b) = (rank(a), rank(b));
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Ward height between member sets through pairwise squared distances:
/// `sqrt(2·|A||B|/(|A|+|B|)·(mean_AB d² − ½·mean_AA d² − ½·mean_BB d²))`.
fn ward_height(d: &[Vec<f64>], a: &[usize], b: &[usize]) -> f64 {
    let mean = |x: &[usize], y: &[usize]| -> f64 {
        let s: f64 = x.iter().flat_map(|&i| y.iter().map(move |&j| d[i][j] * d[i][j])).sum();
        s / (x.len() * y.len()) as f64
    };
    let (na, nb) = (a.len() as f64, b.len() as f64);
    (2.0 * na * nb / (na + nb) * (mean(a, b) - 0.5 * mean(a, a) - 0.5 * mean(b, b)))
        .max(0.0)
        .sqrt()
}

/// Exhaustive search over every pair of current clusters at each step.
fn oracle_ward(c: &CorrelationMatrix) -> Vec<(usize, usize)> {
    let m = c.len();
    let d: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| if i == j { 0.0 } else { 1.0 - c.get(i, j).abs() })
                .collect()
        })
        .collect();
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..m).map(|i| (i, vec![i])).collect();
    let mut out = Vec::new();
    for step in 0..m - 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for x in 0..clusters.len() {
            for y in x + 1..clusters.len() {
                let h = ward_height(&d, &clusters[x].1, &clusters[y].1);
                if best.is_none_or(|(bh, _, _)| h < bh) {
                    best = Some((h, x, y));
                }
            }
        }
        let (_, x, y) = best.unwrap();
        let (ia, ib) = (clusters[x].0, clusters[y].0);
        let mut members = clusters[x].1.clone();
        members.extend(&clusters[y].1);
        clusters.remove(y);
        clusters[x] = (m + step, members);
        out.push((ia.min(ib), ia.max(ib)));
    }
    out
}

fn spearman_ward_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_rho = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(3..=40);
        let k = rng.gen_range(2..=6);
        let cols: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let levels = rng.gen_range(2..=50);
                (0..n).map(|_| rng.gen_range(0..levels) as f64).collect()
            })
            .collect();
        let c = spearman_matrix(&matrix(cols.clone())).unwrap();
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    worst_rho = worst_rho.max((c.get(i, j) - oracle_spearman(&cols[i], &cols[j])).abs());
                }
            }
        }
    }
    let mut ward_mismatch = 0;
    for _ in 0..100 {
        let m = rng.gen_range(2..=8);
        let n = 30;
        let base: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let cols: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let w: f64 = rng.gen_range(0.0..2.0);
                base.iter()
                    .map(|&b| w * b + rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let c = spearman_matrix(&matrix(cols)).unwrap();
        let got: Vec<(usize, usize)> = ward_cluster(&c).unwrap().merges.iter().map(|mg| (mg.a, mg.b)).collect();
        if got != oracle_ward(&c) {
            ward_mismatch += 1;
        }
    }
    outcome(
        worst_rho <= 1e-12 && ward_mismatch == 0,
        format!(
            "max Spearman error {worst_rho:.2e} over 200 instances; {ward_mismatch}/100 Ward merge sequences differ"
        ),
    )
}

// 8 ---------------------------------------------------------------------

/// Signal `a`, its monotone copy `b = 2a + 1`, and independent noise columns.
/// Labels follow `a` plus noise.
fn duplicated_signal(n: usize, rng: &mut ChaCha8Rng) -> (EncodedMatrix, Vec<Label>) {
    let a: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let b: Vec<f64> = a.iter().map(|x| 2.0 * x + 1.0).collect();
    let labels = a
        .iter()
        .map(|x| Label::from_bool(x + 0.5 * rng.sample::<f64, _>(StandardNormal) > 0.0))
        .collect();
    let mut cols = vec![a, b];
    let mut names = vec!["a".to_string(), "b".to_string()];
    for k in 0..3 {
        cols.push((0..n).map(|_| rng.sample(StandardNormal)).collect());
        names.push(format!("noise{k}"));
    }
    (EncodedMatrix::new(names, cols).unwrap(), labels)
}

fn decorrelation_masking() -> Outcome {
    let params = Hyperparams {
        ntrees: 40,
        max_depth: 2,
        eta: 0.3,
        col_sample: 0.5,
        ..Hyperparams::default()
    };
    let mut wins = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (train_m, train_y) = duplicated_signal(400, &mut rng);
        let (test_m, test_y) = duplicated_signal(200, &mut rng);
        let p = Hyperparams { seed, ..params };
        let model = train(&train_m, &train_y, &p).unwrap();
        let config = PermutationConfig {
            repeats: 10,
            seed,
            ..PermutationConfig::default()
        };
        let raw = permutation_importance(&model, &test_m, &test_y, &config).unwrap();
        let dec = decorrelated_permutation_importance(&train_m, &train_y, &test_m, &test_y, 1.0, &config, |m, y| {
            train(m, y, &p)
        })
        .unwrap();
        let raw_max = raw.score_of("a").unwrap().max(raw.score_of("b").unwrap());
        let rep = dec
            .report
            .score_of("a")
            .or_else(|| dec.report.score_of("b"))
            .unwrap_or(0.0);
        if raw_max < rep {
            wins += 1;
        }
    }
    outcome(
        wins >= 95,
        format!("representative beats both raw copies in {wins}/100 seeds"),
    )
}

// 9 ---------------------------------------------------------------------

fn unused_feature_nullity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut unused, mut violations) = (0, 0);
    for trial in 0..20 {
        let n = 200;
        let cols: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let labels: Vec<Label> = (0..n)
            .map(|i| Label::from_bool(cols[0][i] - cols[1][i] + 0.3 * rng.sample::<f64, _>(StandardNormal) > 0.0))
            .collect();
        let m = matrix(cols);
        let params = Hyperparams {
            ntrees: 8,
            max_depth: 2,
            col_sample: 0.5,
            seed: trial,
            ..Hyperparams::default()
        };
        let model = train(&m, &labels, &params).unwrap();
        let gains = model.gain_totals();
        let perm = permutation_importance(
            &model,
            &m,
            &labels,
            &PermutationConfig {
                seed: trial,
                ..Default::default()
            },
        )
        .unwrap();
        let mdi = mdi_importance(&model).unwrap();
        for (j, &g) in gains.iter().enumerate() {
            if g == 0.0 {
                unused += 1;
                let name = &m.names()[j];
                if perm.score_of(name) != Some(0.0) || mdi.score_of(name) != Some(0.0) {
                    violations += 1;
                }
            }
        }
    }
    outcome(
        violations == 0 && unused > 0,
        format!("{unused} unused features across 20 models, {violations} with a nonzero score"),
    )
}

// 10 --------------------------------------------------------------------

fn collect_files(dir: &Path, prefix: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        let rel = prefix.join(p.file_name().unwrap());
        if p.is_dir() {
            collect_files(&p, &rel, out);
        } else {
            out.push((rel.display().to_string(), fs::read(&p).unwrap()));
        }
    }
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = "repetitions = 3\nseed = 11\n\n[data.synthetic]\nn_rows = 300\nnumeric = 12\ncategorical = 2\ninformative = 4\nblocks = 2\nblock_size = 2\n\n[[cells]]\n\n[[cells]]\ntransactions = 120\npca = true\n\n[cv]\nfolds = 3\ntuning_iterations = 3\n\n[search]\nntrees = [20, 60]\n\n[importance]\nrepeats = 3\n";
    fs::write(d.join("exp.toml"), config).unwrap();
    let bin = env!("CARGO_BIN_EXE_insider-boost");
    let mut trees = Vec::new();
    for (run, jobs) in [("a", "1"), ("b", "4"), ("c", "1")] {
        let status = Command::new(bin)
            .current_dir(d)
            .args(["experiment", "--config", "exp.toml", "--out", run, "--jobs", jobs])
            .output()
            .unwrap();
        if !status.status.success() {
            return outcome(
                false,
                format!("run {run} failed: {}", String::from_utf8_lossy(&status.stderr)),
            );
        }
        let mut files = Vec::new();
        collect_files(&d.join(run), Path::new(""), &mut files);
        trees.push(files);
    }
    let same = trees[0] == trees[1] && trees[0] == trees[2];
    outcome(
        same && !trees[0].is_empty(),
        format!(
            "{} output files identical across --jobs 1, 4, 1: {same}",
            trees[0].len()
        ),
    )
}

// -----------------------------------------------------------------------

fn report(id: &str, name: &str, soft: bool, start: Instant, o: &Outcome, failures: &mut usize) {
    let status = match (o.pass, soft) {
        (true, _) => "PASS",
        (false, true) => "FAIL (soft)",
        (false, false) => "FAIL",
    };
    if !o.pass && !soft {
        *failures += 1;
    }
    println!(
        "{status} [{id}] {name}: {} ({:.1} s)",
        o.detail,
        start.elapsed().as_secs_f64()
    );
}

type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn main() {
    let mut failures = 0;
    let fast: [Criterion; 7] = [
        ("1", "gradient oracle", gradient_oracle),
        ("2", "stump equivalence", stump_equivalence),
        ("3", "objective accounting", objective_accounting),
        ("6", "metrics identities", metrics_identities),
        ("7", "Spearman and Ward oracles", spearman_ward_oracles),
        ("8", "decorrelation masking", decorrelation_masking),
        ("9", "unused-feature nullity", unused_feature_nullity),
    ];
    for (id, name, f) in fast {
        let t = Instant::now();
        let o = f();
        report(id, name, false, t, &o, &mut failures);
    }

    let t = Instant::now();
    let o = cli_determinism();
    report("10", "determinism across --jobs", false, t, &o, &mut failures);

    let t = Instant::now();
    let full = CellConfig::default();
    let small = CellConfig {
        transactions: Some(320),
        ..CellConfig::default()
    };
    let pca = CellConfig {
        pca: true,
        ..CellConfig::default()
    };
    let out = experiment(SyntheticSpec::default(), vec![full, small, pca], 0);
    let (acc, fnr, fpr) = (
        mean(&out, 0, Metric::Acc),
        mean(&out, 0, Metric::Fnr),
        mean(&out, 0, Metric::Fpr),
    );
    let acc_small = mean(&out, 1, Metric::Acc);
    let o = outcome(
        acc >= 0.95 && fnr <= 0.05 && fpr <= 0.05 && acc_small < acc,
        format!("3984 rows: ACC {acc:.4} FNR {fnr:.4} FPR {fpr:.4}; 320 rows: ACC {acc_small:.4}"),
    );
    report("4", "high-data detection trend", false, t, &o, &mut failures);
    let acc_pca = mean(&out, 2, Metric::Acc);
    let o = outcome(
        acc_pca <= acc + 0.01,
        format!("PCA ACC {acc_pca:.4} vs no-PCA ACC {acc:.4}"),
    );
    report("5", "PCA trend", true, t, &o, &mut failures);

    let t = Instant::now();
    let null = experiment(
        SyntheticSpec {
            separation: 0.0,
            ..SyntheticSpec::default()
        },
        vec![CellConfig::default()],
        0,
    );
    let auc = mean(&null, 0, Metric::Auc);
    let o = outcome(
        (0.4..=0.6).contains(&auc),
        format!("mean test AUC {auc:.4} at separation 0"),
    );
    report("11", "null-data sanity", false, t, &o, &mut failures);

    if failures > 0 {
        println!("{failures} hard criteria failed");
        std::process::exit(1);
    }
}
