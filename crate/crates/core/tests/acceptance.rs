//! Acceptance criteria, one line each. Runs the full-size checks, so expect
//! a minute or two in release-like profiles.

use std::time::{Duration, Instant};

use serde_json::Value;

use datelab::date::DateConfig;
use datelab::harness::{all_step_date, compare, sweep, CompareReport, CompareRow, ExperimentConfig, SweepParam};
use datelab::par::Execution;
use datelab::verification::{run_check, SuiteSizes};

const SEED: u64 = 7;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn f(v: &Value, path: &[&str]) -> f64 {
    let mut cur = v;
    for p in path {
        cur = &cur[*p];
    }
    cur.as_f64().unwrap_or_else(|| panic!("missing number at {path:?} in {v}"))
}

fn measured(name: &str) -> Value {
    run_check(name, &SuiteSizes::default(), SEED, Execution::Parallel)
        .unwrap()
        .measured
}

fn update_norm() -> Outcome {
    let m = measured("update_norm");
    let err = f(&m, &["max_rel_err"]);
    let calls = f(&m, &["calls"]) - f(&m, &["zero_gradient"]);
    outcome(err <= 1e-9 && calls >= 1000.0, format!("max rel err {err:.2e} over {calls} calls"))
}

fn gradients() -> Outcome {
    let m = measured("gradients");
    let (a, l) = (f(&m, &["max_rel_err_analytic"]), f(&m, &["max_rel_err_learned"]));
    outcome(a <= 1e-6 && l <= 1e-6, format!("analytic {a:.2e}, learned {l:.2e}"))
}

fn tweedie() -> Outcome {
    let m = measured("tweedie");
    let (g, mix) = (f(&m, &["single_gaussian_max_err"]), f(&m, &["mixture_max_err"]));
    outcome(g <= 1e-12 && mix <= 1e-9, format!("single {g:.2e}, mixture {mix:.2e}"))
}

fn update_order() -> Outcome {
    let m = measured("thm2_order");
    let (s, r2) = (f(&m, &["mixture", "slope"]), f(&m, &["mixture", "r2"]));
    let k1 = f(&m, &["single_component", "slope"]);
    outcome(
        (1.7..=2.3).contains(&s) && r2 >= 0.98 && (k1 - 2.0).abs() <= 0.05,
        format!("mixture slope {s:.4} (r2 {r2:.6}), single component slope {k1:.4}"),
    )
}

fn taylor() -> Outcome {
    let m = measured("taylor_order");
    let s = f(&m, &["default", "slope"]);
    let lin = f(&m, &["linear_max_residual"]);
    outcome((1.7..=2.3).contains(&s) && lin <= 1e-12, format!("slope {s:.4}, linear residual {lin:.2e}"))
}

fn sequential_chain() -> Outcome {
    let m = measured("prop1_chain");
    let vu = f(&m, &["v_unconstrained", "value"]);
    let vc = f(&m, &["v_constrained", "value"]);
    let (vf, se) = (f(&m, &["v_fixed", "value"]), f(&m, &["v_fixed", "se"]));
    let size_ok = f(&m, &["n_rollouts"]) == 512.0 && 2.0 * f(&m, &["grid", "half_points"]) + 1.0 == 21.0;
    outcome(
        size_ok && vu >= vc && vc >= vf - 2.0 * se,
        format!("free {vu:.4} >= constrained {vc:.4} >= fixed {vf:.4} - 2 x {se:.4}"),
    )
}

fn jensen() -> Outcome {
    let m = measured("jensen");
    let worst = f(&m, &["min_margin_in_se"]);
    let points = f(&m, &["points"]);
    outcome(worst >= -3.0 && points == 50.0, format!("{points} points, worst margin {worst:.2} SE"))
}

fn bound_and_m1() -> Outcome {
    let b = measured("approx_bound");
    let reports = b["reports"].as_array().unwrap();
    let ok_bound = reports.len() == 20
        && reports
            .iter()
            .all(|r| f(r, &["gap"]) <= f(r, &["bound"]) + 3.0 * f(r, &["gap_se"]) + 1e-12);
    let sweeps = measured("m1_sweep");
    let mut worst = f64::NEG_INFINITY;
    for s in sweeps.as_array().unwrap() {
        let est = s["m1"].as_array().unwrap();
        for w in est.windows(2) {
            let combined = (f(&w[0], &["se"]).powi(2) + f(&w[1], &["se"]).powi(2)).sqrt();
            worst = worst.max((f(&w[1], &["value"]) - f(&w[0], &["value"])) / combined.max(f64::MIN_POSITIVE));
        }
    }
    outcome(
        ok_bound && worst <= 2.0,
        format!("min bound slack {:.3e}; worst m1 increase {worst:.2} SE", f(&b, &["min_slack"])),
    )
}

fn row<'a>(r: &'a CompareReport, name: &str) -> &'a CompareRow {
    r.row(name).unwrap_or_else(|| panic!("compare row {name} missing"))
}

fn combined_se(a: &CompareRow, b: &CompareRow) -> f64 {
    (a.se_h.unwrap().powi(2) + b.se_h.unwrap().powi(2)).sqrt()
}

fn base_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(0);
    cfg.seed = SEED;
    cfg.n_samples = 200;
    cfg
}

fn alignment() -> Outcome {
    let mut cfg = base_config();
    cfg.date = Some(all_step_date());
    let r = compare(&cfg, Execution::Parallel).unwrap();
    let (fixed, date) = (row(&r, "fixed"), row(&r, "date"));
    let diff = date.diff_vs_fixed.unwrap();
    let p = date.p_vs_fixed.unwrap();
    let ratio = date.frechet / fixed.frechet;
    outcome(
        diff > 0.0 && p < 0.01 && ratio <= 1.25,
        format!("diff {diff:+.5} (p {p:.2e}), frechet ratio {ratio:.3}"),
    )
}

fn ablations() -> Outcome {
    let mut cfg = base_config();
    cfg.date = Some(DateConfig::default());
    let r = compare(&cfg, Execution::Parallel).unwrap();
    let (fixed, date) = (row(&r, "fixed"), row(&r, "date"));
    let (random, unnorm, pert) = (row(&r, "random"), row(&r, "unnormalized"), row(&r, "perturbed_h"));
    let random_ok = (random.mean_h - fixed.mean_h).abs() <= 3.0 * combined_se(random, fixed);
    let (lo, hi) = (fixed.mean_h.min(date.mean_h), fixed.mean_h.max(date.mean_h));
    let se_u = combined_se(unnorm, date);
    let unnorm_ok = (lo - 3.0 * se_u..=hi + 3.0 * se_u).contains(&unnorm.mean_h) || (unnorm.mean_h - date.mean_h).abs() <= 3.0 * se_u;
    let pert_ok = pert.mean_h <= date.mean_h + 3.0 * combined_se(pert, date);
    outcome(
        random_ok && unnorm_ok && pert_ok,
        format!(
            "fixed {:.5}, date {:.5}, random {:.5}, unnormalized {:.5}, perturbed_h {:.5}",
            fixed.mean_h, date.mean_h, random.mean_h, unnorm.mean_h, pert.mean_h
        ),
    )
}

fn rho_sweep() -> Outcome {
    let mut cfg = base_config();
    cfg.date = Some(all_step_date());
    let values: Vec<String> = ["0.1", "0.25", "0.5", "1", "2", "4"].iter().map(|s| s.to_string()).collect();
    let r = sweep(&cfg, SweepParam::Rho, &values, Execution::Parallel).unwrap();
    let improves = r.rows.iter().any(|row| {
        row.value.parse::<f64>().unwrap() <= 1.0
            && row.diff_vs_fixed.is_some_and(|d| d > 0.0)
            && row.p_above_fixed.is_some_and(|p| p < 0.05)
    });
    let last = r.rows.last().unwrap();
    let ratios: Vec<String> = r.rows.iter().map(|row| format!("{}:{:.2}", row.value, row.frechet_ratio)).collect();
    outcome(
        r.rows.len() == 6 && improves && last.value == "4" && last.frechet_ratio > 1.5,
        format!("frechet ratios {}", ratios.join(" ")),
    )
}

fn guidance() -> Outcome {
    let m = measured("guidance_identities");
    let cg = f(&m, &["cg_max_err"]);
    let (w0, w1) = (f(&m, &["cfg_w0_max_err"]), f(&m, &["cfg_w1_max_err"]));
    outcome(cg <= 1e-8 && w0 == 0.0 && w1 == 0.0, format!("cg {cg:.2e}, cfg w=0 {w0:e}, w=1 {w1:e}"))
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let code = datelab::cli::dispatch(["datelab", "compare", "--seed", "7", "--out", d.path().to_str().unwrap()]);
        assert_eq!(code, 0);
    }
    let mut names: Vec<_> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let same = !names.is_empty()
        && names.iter().all(|n| {
            std::fs::read(dirs[0].path().join(n)).unwrap() == std::fs::read(dirs[1].path().join(n)).unwrap()
        });
    outcome(same, format!("{} files compared", names.len()))
}

type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

fn main() {
    let criteria: [Criterion; 13] = [
        ("update-norm contract", update_norm, Some(Duration::from_secs(5))),
        ("gradient correctness", gradients, Some(Duration::from_secs(30))),
        ("tweedie exactness", tweedie, None),
        ("embedding-update order", update_order, Some(Duration::from_secs(60))),
        ("taylor order", taylor, None),
        ("sequential optimum chain", sequential_chain, Some(Duration::from_secs(120))),
        ("jensen gap sign", jensen, Some(Duration::from_secs(300))),
        ("approximation bound and m1", bound_and_m1, None),
        ("alignment improvement", alignment, None),
        ("ablation contracts", ablations, None),
        ("rho sweep", rho_sweep, None),
        ("guidance identities", guidance, None),
        ("determinism", determinism, None),
    ];
    let mut failed = 0;
    for (i, (name, run, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = run();
        let secs = start.elapsed();
        let in_time = limit.is_none_or(|l| secs <= l);
        let ok = out.passed && in_time;
        if !ok {
            failed += 1;
        }
        let budget = limit.map(|l| format!(" / {}s", l.as_secs())).unwrap_or_default();
        println!(
            "{:>2} {} {:<28} {:>7.2}s{}  {}",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            name,
            secs.as_secs_f64(),
            budget,
            out.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
