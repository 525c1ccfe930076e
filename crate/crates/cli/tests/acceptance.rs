//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test -p dtr-cli --test acceptance` (add `--release` for speed).

use std::path::Path;
use std::time::{Duration, Instant};

use dtr_core::alearn::fit_a_regime;
use dtr_core::formula::{ModelFile, StageModelSpec};
use dtr_core::inference::bootstrap;
use dtr_core::numsolve::{fit_logistic, norm_inf, solve_least_squares, solve_linear_system, Matrix};
use dtr_core::qlearn::fit_q_regime;
use dtr_core::scenario::{builtin_model, dp_evaluate, dp_oracle, enumerate_cells, mc_value, simulate, true_regime, EvalPolicy, Scenario, DP_CELL_CAP};
use dtr_core::trajectories::probes_from;
use dtr_core::{Dataset, Method, Regime};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn specs(text: &str) -> Vec<StageModelSpec> {
    ModelFile::from_json(text).unwrap().specs().unwrap()
}

fn model(name: &str) -> Vec<StageModelSpec> {
    specs(builtin_model(name).unwrap())
}

/// `E[max(0, mu + sd Z)]` by composite Simpson quadrature against the
/// standard normal density.
fn expected_positive_part(mu: f64, sd: f64) -> f64 {
    let (a, b, n) = (-12.0, 12.0, 24_000);
    let h = (b - a) / n as f64;
    let f = |z: f64| (mu + sd * z).max(0.0) * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

fn seconds(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

/// Per-coefficient mean of |estimate - truth| and |mean estimate - truth|.
fn bias_summary(estimates: &[Vec<f64>], truth: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let r = estimates.len() as f64;
    let mean_abs = (0..truth.len())
        .map(|j| estimates.iter().map(|e| (e[j] - truth[j]).abs()).sum::<f64>() / r)
        .collect();
    let abs_mean = (0..truth.len())
        .map(|j| (estimates.iter().map(|e| e[j]).sum::<f64>() / r - truth[j]).abs())
        .collect();
    (mean_abs, abs_mean)
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn criterion_1() -> Outcome {
    let scn = Scenario::builtin("confounded_k2").unwrap();
    let sp = model("confounded_k2");
    let c = expected_positive_part(-0.3, 0.9);
    // stage 1: (1, s1.x | 1, s1.x); stage 2: (1, s1.x, a1, s2.w, s1.x*a1 | 1, s2.z)
    let truth = [1.0 + c, 1.0 + 0.8 * 0.6, 0.5, -1.0, 1.0, 1.0, 0.5, 0.8, -1.0, -0.3, 0.9];
    let mut estimates = Vec::new();
    let mut slowest = Duration::ZERO;
    for r in 0..20u64 {
        let ds: Dataset = simulate(&scn, 10_000, 100 + r).unwrap();
        let t = Instant::now();
        let q = fit_q_regime(&ds, &sp).unwrap();
        slowest = slowest.max(t.elapsed());
        estimates.push(q.coefficients().into_iter().map(|(_, v)| v).collect::<Vec<_>>());
    }
    let (mean_abs, abs_mean) = bias_summary(&estimates, &truth);
    let worst = max(&mean_abs);
    outcome(
        worst < 0.05 && slowest < Duration::from_secs(10),
        format!(
            "max mean |eta error| {worst:.4} (< 0.05), max |mean error| {:.4}, slowest fit {}",
            max(&abs_mean),
            seconds(slowest)
        ),
    )
}

fn criterion_2() -> Outcome {
    let scn = Scenario::builtin("confounded_k2").unwrap();
    let correct = builtin_model("confounded_k2").unwrap();
    let stage2_prop = "1 + s2.w + a1";
    let mk = |b1: &str, p1: &str, b2: &str, p2: &str| {
        specs(&format!(
            r#"{{"stages": [
                {{"baseline": "{b1}", "contrast": "1 + s1.x", "propensity": "{p1}"}},
                {{"baseline": "{b2}", "contrast": "1 + s2.z", "propensity": "{p2}"}}]}}"#
        ))
    };
    let good_b2 = "1 + s1.x + s2.w + a1 + s1.x*a1";
    let bad_b2 = "1 + s1.x + a1 + s1.x*a1";
    let configs = [
        ("a both correct", specs(correct)),
        ("b baseline wrong", mk("1", "1 + s1.x", bad_b2, stage2_prop)),
        ("c propensity wrong", mk("1 + s1.x", "1", good_b2, "1")),
        ("d both wrong", mk("1", "1", bad_b2, "1")),
    ];
    let truth = [0.5, -1.0, -0.3, 0.9];
    let data: Vec<Dataset> = (0..20u64).map(|r| simulate(&scn, 20_000, 200 + r).unwrap()).collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, sp) in &configs {
        let estimates: Vec<Vec<f64>> = data
            .iter()
            .map(|ds| {
                let a = fit_a_regime(ds, sp).unwrap();
                a.stages.iter().flat_map(|s| s.psi.clone()).collect()
            })
            .collect();
        let (mean_abs, abs_mean) = bias_summary(&estimates, &truth);
        if label.starts_with('d') {
            let m = max(&abs_mean);
            pass &= m > 0.10;
            parts.push(format!("{label}: max |mean psi error| {m:.3} (> 0.10)"));
        } else {
            let m = max(&mean_abs);
            pass &= m < 0.05;
            parts.push(format!("{label}: max mean |psi error| {m:.4} (< 0.05)"));
        }
    }
    outcome(pass, parts.join("; "))
}

fn criterion_3() -> Outcome {
    let scn = Scenario::builtin("confounded_k2").unwrap();
    let sp = model("confounded_k2");
    let (m, eval_seed) = (100_000, 9_999);
    let behavior = mc_value::<f64>(&scn, EvalPolicy::Behavior, m, eval_seed).unwrap().value;
    let star = true_regime(&scn).unwrap();
    let optimal = mc_value::<f64>(&scn, EvalPolicy::Regime(&star), m, eval_seed).unwrap().value;
    let mut ratios = [0.0, 0.0];
    for r in 0..20u64 {
        let ds: Dataset = simulate(&scn, 5_000, 300 + r).unwrap();
        let q = fit_q_regime(&ds, &sp).unwrap();
        let a = fit_a_regime(&ds, &sp).unwrap();
        for (i, reg) in [&q as &dyn Regime<f64>, &a as &dyn Regime<f64>].into_iter().enumerate() {
            let v = mc_value::<f64>(&scn, EvalPolicy::Regime(reg), m, eval_seed).unwrap().value;
            ratios[i] += (v - behavior) / (optimal - behavior) / 20.0;
        }
    }
    outcome(
        ratios.iter().all(|&r| r >= 0.90),
        format!(
            "mean improvement ratio qlearn {:.4}, alearn {:.4} (>= 0.90); V(behavior) {behavior:.4}, V(d*) {optimal:.4}",
            ratios[0], ratios[1]
        ),
    )
}

fn criterion_4() -> Outcome {
    let scn = Scenario::builtin("confounded_k2").unwrap();
    let sp = model("confounded_k2");
    let ds: Dataset = simulate(&scn, 20_000, 400).unwrap();
    let q = fit_q_regime(&ds, &sp).unwrap();
    let a = fit_a_regime(&ds, &sp).unwrap();
    let fresh: Dataset = simulate(&scn, 10_000, 401).unwrap();
    let probes = probes_from(&fresh, 1);
    let agree = probes
        .iter()
        .filter(|p| q.decide(*p).unwrap() == a.decide(*p).unwrap())
        .count();
    let frac = agree as f64 / probes.len() as f64;
    outcome(frac >= 0.98, format!("stage-1 agreement {:.2}% on {} probes (>= 98%)", 100.0 * frac, probes.len()))
}

fn criterion_5() -> Outcome {
    let scn = Scenario::builtin("discrete_dp_k2").unwrap();
    let oracle = dp_oracle(&scn, DP_CELL_CAP).unwrap();
    let cells: Dataset = enumerate_cells(&scn, DP_CELL_CAP).unwrap();
    let q = fit_q_regime(&cells, &model("discrete_dp_k2")).unwrap();
    let mut total = 0;
    let mut agree = 0;
    for k in 1..=2 {
        for p in probes_from(&cells, k) {
            total += 1;
            if q.decide(&p).unwrap() == oracle.regime.decide(&p).unwrap() {
                agree += 1;
            }
        }
    }
    let value = dp_evaluate::<f64>(&scn, &q, DP_CELL_CAP).unwrap();
    outcome(
        agree == total && value == oracle.value,
        format!(
            "{agree}/{total} decision points agree; value {value} vs oracle {} over {} cells",
            oracle.value,
            cells.n()
        ),
    )
}

fn criterion_6() -> Outcome {
    let scn = Scenario::builtin("randomized_k1").unwrap();
    let sp = model("randomized_k1");
    let start = Instant::now();
    let mut covered = [0usize; 2];
    let truth = [0.5, -1.0];
    for r in 0..100u64 {
        let ds: Dataset = simulate(&scn, 500, 600 + r).unwrap();
        let rep = bootstrap(&ds, Method::ALearn, &sp, 200, 0.05, &[], r).unwrap();
        for (j, name) in ["stage1.psi.1", "stage1.psi.s1.x"].iter().enumerate() {
            if rep.interval(name).unwrap().covers(truth[j]) {
                covered[j] += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = covered.iter().all(|&c| (88..=100).contains(&c)) && elapsed < Duration::from_secs(600);
    outcome(
        ok,
        format!(
            "95% interval coverage psi.1 {}/100, psi.s1.x {}/100 (in [88, 100]); run {}",
            covered[0],
            covered[1],
            seconds(elapsed)
        ),
    )
}

fn actions_of(reg: &dyn Regime<f64>, ds: &Dataset) -> Vec<i64> {
    (1..=ds.stage_count())
        .flat_map(|k| probes_from(ds, k).into_iter().map(|p| reg.decide(&p).unwrap()).collect::<Vec<_>>())
        .collect()
}

fn run_cli(args: &[&str]) -> i32 {
    dtr_cli::run(std::iter::once("dtr").chain(args.iter().copied()))
}

fn cli_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let p = |f: &str| dir.join(f).to_string_lossy().into_owned();
    std::fs::write(dir.join("probe.csv"), "id,s1_x\np1,-1\np2,0.25\np3,1.5\n").unwrap();
    let steps: Vec<Vec<String>> = vec![
        vec!["simulate", "--scenario", "confounded_k2", "--n", "2000", "--seed", "7", "--out", &p("d.csv")],
        vec!["fit", "--method", "qlearn", "--data", &p("d.csv"), "--model", "confounded_k2", "--out", &p("q.json")],
        vec!["fit", "--method", "alearn", "--data", &p("d.csv"), "--model", "confounded_k2", "--out", &p("a.json")],
        vec!["recommend", "--regime", &p("a.json"), "--covariates", &p("probe.csv"), "--out", &p("recs.csv")],
        vec!["evaluate", "--scenario", "confounded_k2", "--regime", &p("q.json"), "--replicates", "5000", "--seed", "3", "--out", &p("ev.json")],
        vec!["bootstrap", "--method", "qlearn", "--data", &p("d.csv"), "--model", "confounded_k2", "--B", "50", "--seed", "5", "--covariates", &p("probe.csv"), "--out", &p("boot.json")],
        vec!["screen", "--data", &p("d.csv"), "--terms", "s1.x + s2.w + s2.z", "--out", &p("screen.json")],
        vec!["report", "--input", &p("boot.json"), "--out", &p("report.txt")],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();
    for s in &steps {
        let args: Vec<&str> = s.iter().map(String::as_str).collect();
        assert_eq!(run_cli(&args), 0, "dtr {}", s[0]);
    }
    ["d.csv", "q.json", "a.json", "recs.csv", "ev.json", "boot.json", "screen.json", "report.txt"]
        .iter()
        .map(|f| (f.to_string(), std::fs::read(dir.join(f)).unwrap()))
        .collect()
}

fn criterion_7() -> Outcome {
    let scn = Scenario::builtin("confounded_k2").unwrap();
    let sp = model("confounded_k2");
    let ds: Dataset = simulate(&scn, 5_000, 700).unwrap();
    let affine = ds.map_outcomes(|y| 2.0 * y + 3.0);
    let mut parts = Vec::new();
    let mut pass = true;

    let q0 = fit_q_regime(&ds, &sp).unwrap();
    let q1 = fit_q_regime(&affine, &sp).unwrap();
    let a0 = fit_a_regime(&ds, &sp).unwrap();
    let a1 = fit_a_regime(&affine, &sp).unwrap();
    let same_q = actions_of(&q0, &ds) == actions_of(&q1, &ds);
    let same_a = actions_of(&a0, &ds) == actions_of(&a1, &ds);
    pass &= same_q && same_a;
    parts.push(format!("2Y+3 actions identical: qlearn {same_q}, alearn {same_a}"));

    let reversed: Vec<usize> = (0..ds.n()).rev().collect();
    let perm = ds.select(&reversed);
    let diff = |x: Vec<(String, f64)>, y: Vec<(String, f64)>| {
        x.iter().zip(&y).map(|(a, b)| (a.1 - b.1).abs()).fold(0.0, f64::max)
    };
    let dq = diff(q0.coefficients(), fit_q_regime(&perm, &sp).unwrap().coefficients());
    let da = diff(a0.coefficients(), fit_a_regime(&perm, &sp).unwrap().coefficients());
    pass &= dq <= 1e-10 && da <= 1e-10;
    parts.push(format!("row permutation max coefficient change qlearn {dq:.1e}, alearn {da:.1e} (<= 1e-10)"));

    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let first = cli_outputs(d1.path());
    let second = cli_outputs(d2.path());
    let mismatched: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, _)| a.0.as_str())
        .collect();
    pass &= mismatched.is_empty();
    parts.push(format!(
        "CLI reruns byte-identical for {} outputs{}",
        first.len(),
        if mismatched.is_empty() { String::new() } else { format!(", differing: {mismatched:?}") }
    ));
    outcome(pass, parts.join("; "))
}

fn criterion_8() -> Outcome {
    let mut checks = Vec::new();

    // hand-solved normal equations for the three-point line fit
    let x = Matrix::from_rows(&[[1.0_f64, 0.0], [1.0, 1.0], [1.0, 2.0]]).unwrap();
    let y = [1.0, 2.0, 4.0];
    let (sxx, sx, n) = (0.0 + 1.0 + 4.0, 0.0 + 1.0 + 2.0, 3.0);
    let (sy, sxy) = (y.iter().sum::<f64>(), 0.0 * 1.0 + 1.0 * 2.0 + 2.0 * 4.0);
    let det = n * sxx - sx * sx;
    let oracle = [(sxx * sy - sx * sxy) / det, (n * sxy - sx * sy) / det];
    let fit = solve_least_squares(&x, &y).unwrap();
    let err = (fit.coefficients[0] - oracle[0]).abs().max((fit.coefficients[1] - oracle[1]).abs());
    checks.push(("least squares [5/6, 3/2]", err <= 1e-8 && (oracle[0] - 5.0 / 6.0).abs() < 1e-15));

    let c = Matrix::from_rows(&[[1.0_f64], [1.0]]).unwrap();
    let fit = solve_least_squares(&c, &[2.0, 2.0]).unwrap();
    checks.push(("constant fit", (fit.coefficients[0] - 2.0).abs() <= 1e-8 && fit.residual_variance.abs() <= 1e-8));
    let fit = solve_least_squares(&x, &[0.0; 3]).unwrap();
    checks.push(("zero response", fit.coefficients.iter().all(|v| v.abs() <= 1e-8)));

    let b = [0.3_f64, -1.7, 2.5];
    let xi = solve_linear_system(&Matrix::identity(3), &b).unwrap();
    checks.push(("identity system", xi.iter().zip(&b).all(|(u, v)| (u - v).abs() <= 1e-8)));
    let d = Matrix::from_rows(&[[2.0_f64, 0.0], [0.0, 4.0]]).unwrap();
    let xd = solve_linear_system(&d, &[2.0, 8.0]).unwrap();
    checks.push(("diagonal system", (xd[0] - 1.0).abs() <= 1e-8 && (xd[1] - 2.0).abs() <= 1e-8));
    let a5 = Matrix::from_vec(5, 5, (0..25).map(|k| {
        let (i, j) = (k / 5, k % 5);
        if i == j { 6.0 + i as f64 } else { ((i * 7 + j * 3) % 5) as f64 / 5.0 - 0.4 }
    }).collect()).unwrap();
    let b5 = [1.0, -2.0, 0.5, 3.0, -1.5];
    let x5 = solve_linear_system(&a5, &b5).unwrap();
    let resid: Vec<f64> = a5.matvec(&x5).iter().zip(&b5).map(|(u, v)| u - v).collect();
    checks.push(("5x5 residual", norm_inf(&resid) <= 1e-8 * (1.0 + norm_inf(&b5))));

    let ones = Matrix::from_rows(&[[1.0_f64], [1.0], [1.0], [1.0]]).unwrap();
    let lf = fit_logistic(&ones, &[1.0, 1.0, 1.0, 0.0], 1e-8).unwrap();
    checks.push(("logistic intercept log 3", (lf.coefficients[0] - 3f64.ln()).abs() <= 1e-8));
    let lf = fit_logistic(&ones, &[1.0, 0.0, 1.0, 0.0], 1e-8).unwrap();
    checks.push(("logistic balanced intercept 0", lf.coefficients[0].abs() <= 1e-8));
    let sep = Matrix::from_rows(&[[1.0_f64, -2.0], [1.0, -1.0], [1.0, 1.0], [1.0, 2.0]]).unwrap();
    let lf = fit_logistic(&sep, &[0.0, 0.0, 1.0, 1.0], 1e-8).unwrap();
    checks.push(("separation warning and slope > 10", lf.diagnostics.separation_warning && lf.coefficients[1] > 10.0));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} solver oracles within 1e-8", checks.len())
        } else {
            format!("failed: {failed:?}")
        },
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("Q-learning consistency", criterion_1),
        ("A-learning double robustness", criterion_2),
        ("regret ratio", criterion_3),
        ("Q/A agreement", criterion_4),
        ("DP-oracle equivalence", criterion_5),
        ("bootstrap calibration", criterion_6),
        ("invariance suite", criterion_7),
        ("solver unit oracles", criterion_8),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        println!(
            "criterion {} {name}: {} [{}] {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            seconds(t.elapsed()),
            o.detail
        );
        failures += usize::from(!o.pass);
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
