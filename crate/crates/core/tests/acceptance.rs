//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test -p diffgraph --test acceptance -- --nocapture`.

use std::time::{Duration, Instant};

use diffgraph::verify::{mechanism_table, run_suite, MechanismOptions, Suite, SuiteReport, VerifyOptions};

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn suite(id: usize, name: &'static str, s: Suite, limit: Option<Duration>) -> Outcome {
    let report: Result<SuiteReport, _> = run_suite(s, &VerifyOptions::default());
    match report {
        Ok(r) => {
            let in_time = limit.map_or(true, |l| r.elapsed < l);
            let mut detail = r.to_string();
            if let Some(l) = limit {
                detail += &format!(" (limit {}s)", l.as_secs());
            }
            Outcome { id, name, passed: r.passed && in_time, detail }
        }
        Err(e) => Outcome { id, name, passed: false, detail: format!("error: {e}") },
    }
}

fn mechanism() -> Outcome {
    let opts = MechanismOptions::default();
    let start = Instant::now();
    let run = || -> diffgraph::Result<_> { Ok((mechanism_table(&opts, 4)?, mechanism_table(&opts, 1)?)) };
    let (detail, passed) = match run() {
        Ok((parallel, sequential)) => {
            let same = parallel == sequential;
            let gap = parallel.baseline().mean - parallel.diff().mean;
            println!("{}", parallel.to_markdown());
            (
                format!(
                    "baseline {:.4} ± {:.4}, diff-enc {:.4} ± {:.4}, identical at 1 and 4 threads: {same}, time={:.1}s",
                    parallel.baseline().mean,
                    parallel.baseline().std,
                    parallel.diff().mean,
                    parallel.diff().std,
                    start.elapsed().as_secs_f64()
                ),
                same && gap <= 0.01,
            )
        }
        Err(e) => (format!("error: {e}"), false),
    };
    Outcome { id: 8, name: "mechanism experiment", passed, detail }
}

fn scope_statement() -> Outcome {
    let readme = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap_or_default();
    let passed = readme.contains("not acceptance targets") && readme.contains("98.558");
    Outcome {
        id: 9,
        name: "full-scale numbers declared out of scope",
        passed,
        detail: "README states the published benchmark numbers are not targets".into(),
    }
}

#[test]
fn acceptance() {
    let outcomes = vec![
        suite(1, "reduction equivalence", Suite::Reduction, Some(Duration::from_secs(10))),
        suite(2, "gradient correctness", Suite::Gradient, Some(Duration::from_secs(60))),
        suite(3, "permutation equivariance", Suite::Equivariance, None),
        suite(4, "attention soundness", Suite::Attention, None),
        suite(5, "metric oracles", Suite::Metrics, None),
        suite(6, "optimizer and schedule", Suite::Optimizer, None),
        suite(7, "overfit capacity", Suite::Overfit, Some(Duration::from_secs(120))),
        mechanism(),
        scope_statement(),
    ];
    for o in &outcomes {
        println!("{} {} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    }
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
