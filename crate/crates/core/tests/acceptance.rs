//! Acceptance runner: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` runs every criterion except the long toy
//! training comparison (criterion 6), which needs `--full` or
//! `SACQ_ACCEPTANCE_FULL=1`. Bare numbers on the command line select criteria.
//! The exit status is nonzero on a FAIL only with `--strict` or
//! `SACQ_ACCEPTANCE_STRICT=1`; otherwise the lines and the final tally are the report.

mod common;

use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use sacq::harness::ablation::{run_config, suite_configs, validation_set, Suite};
use sacq::harness::eval::evaluate_ap;
use sacq::harness::train::{train, ExperimentConfig};
use sacq::qa::QaConfig;

const VAL_SCENES: usize = 200;
const VAL_SEED: u64 = 12345;
const TOY_SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    o.detail = format!("{} ({:.1} s)", o.detail, took.as_secs_f64());
    if let Some(limit) = limit {
        if took > limit {
            o.passed = false;
            o.detail = format!("{}; over the {} s budget", o.detail, limit.as_secs());
        }
    }
    o
}

fn from_oracle(r: Result<(), String>, ok: &str) -> Outcome {
    match r {
        Ok(()) => outcome(true, ok),
        Err(e) => outcome(false, e),
    }
}

fn gradient_suite() -> Outcome {
    let mut failed = Vec::new();
    let mut worst: f64 = 0.0;
    for name in common::GRADIENT_CASES {
        let r = common::gradient_case(name);
        worst = worst.max(r.max_rel_error);
        if !r.passed || r.checked == 0 {
            failed.push(format!("{name} (rel err {:.2e})", r.max_rel_error));
        }
    }
    let n = common::GRADIENT_CASES.len();
    if failed.is_empty() {
        outcome(true, format!("{n}/{n} cases within tol 1e-4 at eps 1e-5, worst rel err {worst:.2e}"))
    } else {
        outcome(false, format!("failing: {}", failed.join(", ")))
    }
}

fn kernel_oracles() -> Outcome {
    let checks = [
        ("conv2d", common::conv2d_oracle(100, 4)),
        ("group_norm", common::group_norm_oracle(100, 5)),
        ("linear", common::linear_oracle(100, 6)),
        ("roi_align", common::roi_align_oracle(100, 7)),
    ];
    let failed: Vec<String> = checks
        .iter()
        .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
        .collect();
    if failed.is_empty() {
        outcome(true, "conv2d, group_norm, linear, roi_align within 1e-10 on 100 shapes each")
    } else {
        outcome(false, failed.join("; "))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn toy_training() -> Outcome {
    let base = ExperimentConfig::default();
    let val = validation_set(&base, VAL_SCENES, VAL_SEED);
    let mut means = Vec::new();
    for (name, c) in suite_configs(Suite::Sacq, &base) {
        let mut ap50 = Vec::new();
        for seed in TOY_SEEDS {
            match run_config(&c, seed, &val) {
                Ok(r) => ap50.push(r.ap50),
                Err(e) => return outcome(false, format!("{name} seed {seed}: {e}")),
            }
        }
        let m = mean(&ap50);
        let per: Vec<String> = ap50.iter().map(|v| format!("{v:.3}")).collect();
        println!("      {name:<9} AP50 {m:.4}  [{}]", per.join(", "));
        means.push((name, m));
    }
    let baseline = means[0].1;
    let mut problems = Vec::new();
    if baseline < 0.70 {
        problems.push(format!("baseline AP50 {baseline:.4} < 0.70"));
    }
    for (name, m) in &means[1..] {
        if *m < baseline - 0.01 {
            problems.push(format!("{name} {m:.4} < baseline - 0.01"));
        }
    }
    let full = means[means.len() - 1].1;
    if full <= baseline {
        problems.push(format!("full {full:.4} does not exceed baseline {baseline:.4}"));
    }
    let summary: Vec<String> = means.iter().map(|(n, m)| format!("{n} {m:.4}")).collect();
    if problems.is_empty() {
        outcome(true, format!("mean AP50 over 3 seeds: {}", summary.join(", ")))
    } else {
        outcome(false, format!("{}; {}", problems.join("; "), summary.join(", ")))
    }
}

fn tb_sweep(full: bool) -> Outcome {
    let mut c = ExperimentConfig::default();
    if !full {
        c.train.steps = 300;
    }
    let trainer = match train(c.clone(), None) {
        Ok(t) => t,
        Err(e) => return outcome(false, e.to_string()),
    };
    let val = validation_set(&c, VAL_SCENES, VAL_SEED);
    let merges = |t_c: f64, t_b: f64| {
        let qa = QaConfig { t_c, t_b, ..c.qa };
        evaluate_ap(&trainer.detector, &val, &qa).map(|r| r.merges)
    };
    let t_c = c.qa.t_c;
    let counts = [merges(t_c, 0.9), merges(t_c, 0.7), merges(1e-2, 0.9), merges(1e-2, 0.7)];
    match counts {
        [Ok(hi), Ok(lo), Ok(loose_hi), Ok(loose_lo)] => outcome(
            lo > hi,
            format!(
                "{} steps; merges at t_b 0.7: {lo}, at t_b 0.9: {hi} (t_c {t_c:e}); with t_c 1e-2 for reference: {loose_lo} vs {loose_hi}",
                c.train.steps
            ),
        ),
        [Err(e), ..] | [_, Err(e), ..] | [_, _, Err(e), _] | [.., Err(e)] => outcome(false, e.to_string()),
    }
}

fn determinism(full: bool) -> Outcome {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return outcome(false, e.to_string()),
    };
    let steps = if full { "500" } else { "50" };
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_sacq"))
            .args(["train", "--seed", "7", "--steps", steps, "--out"])
            .arg(&out)
            .status();
        match status {
            Ok(s) if s.success() => {}
            other => return outcome(false, format!("train exited with {other:?}")),
        }
        match fs::read(out.join("metrics.jsonl")) {
            Ok(b) => logs.push(b),
            Err(e) => return outcome(false, e.to_string()),
        }
    }
    let lines = logs[0].iter().filter(|&&b| b == b'\n').count();
    outcome(
        logs[0] == logs[1] && lines > 0,
        format!("train --seed 7 --steps {steps} twice: {lines} metric lines, identical = {}", logs[0] == logs[1]),
    )
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let full = args.iter().any(|a| a == "--full") || std::env::var_os("SACQ_ACCEPTANCE_FULL").is_some();
    let strict = args.iter().any(|a| a == "--strict") || std::env::var_os("SACQ_ACCEPTANCE_STRICT").is_some();
    let selected: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let wanted = |k: u32| selected.is_empty() || selected.contains(&k);

    let secs = Duration::from_secs;
    type Check = Box<dyn FnOnce() -> Outcome>;
    let criteria: Vec<(u32, &str, Check)> = vec![
        (1, "gradient suite", Box::new(move || timed(Some(secs(120)), gradient_suite))),
        (
            2,
            "QA oracle, 500 instances",
            Box::new(move || {
                timed(Some(secs(30)), || {
                    from_oracle(common::qa_oracle(500, 1), "partitions exact, values within 1e-12, matrices within 1e-10")
                })
            }),
        ),
        (
            3,
            "Hungarian vs brute force, 500 matrices",
            Box::new(move || {
                timed(Some(secs(30)), || {
                    from_oracle(common::matching_oracle(500, 2), "optimal cost exact, scaling invariant")
                })
            }),
        ),
        (
            4,
            "attention normalization, 1000 inputs",
            Box::new(move || {
                timed(None, || {
                    from_oracle(
                        common::normalization_invariants(1000, 8),
                        "maps sum to 1 within 1e-6, pooled rows inside the convex hull",
                    )
                })
            }),
        ),
        (5, "kernel oracles", Box::new(move || timed(None, kernel_oracles))),
        (
            6,
            "toy training, directional effect",
            Box::new(move || timed(Some(secs(3600)), toy_training)),
        ),
        (7, "t_b sweep merges", Box::new(move || timed(None, || tb_sweep(full)))),
        (
            8,
            "AP vs brute force, 100 cases",
            Box::new(move || timed(None, || from_oracle(common::ap_oracle(100, 3), "AP, AP50, AP75 within 1e-9"))),
        ),
        (9, "determinism", Box::new(move || timed(None, || determinism(full)))),
    ];

    let (mut passes, mut failures, mut skips) = (0, 0, 0);
    for (k, name, check) in criteria {
        if !wanted(k) {
            continue;
        }
        if k == 6 && !full {
            println!("SKIP {k} {name}: long run, pass --full or set SACQ_ACCEPTANCE_FULL=1");
            skips += 1;
            continue;
        }
        let o = check();
        println!("{} {k} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        if o.passed {
            passes += 1;
        } else {
            failures += 1;
        }
    }
    println!("acceptance: {passes} passed, {failures} failed, {skips} skipped");
    if failures == 0 || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
