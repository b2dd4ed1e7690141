//! Property suites behind `diffgraph verify` and the acceptance target.
//!
//! Every suite runs at fixed seeds and reports the largest error it saw
//! next to the tolerance it was held to.

mod experiments;
mod layers;

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::Deserialize;

pub use experiments::{
    mechanism_table, overfit_run, overfit_setup, MechanismOptions, MechanismRow, MechanismTable, OverfitRun,
};
pub use layers::LayerKind;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Fault, Tensor};
use crate::training::{
    accuracy, average_precision, lr_at, macro_f1, pessimistic_rank, ranking_metrics, AdamW, OptimizerConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    Reduction,
    Gradient,
    Equivariance,
    Attention,
    Metrics,
    Optimizer,
    Overfit,
    Mechanism,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::Reduction,
        Suite::Gradient,
        Suite::Equivariance,
        Suite::Attention,
        Suite::Metrics,
        Suite::Optimizer,
        Suite::Overfit,
        Suite::Mechanism,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Reduction => "reduction",
            Suite::Gradient => "gradient",
            Suite::Equivariance => "equivariance",
            Suite::Attention => "attention",
            Suite::Metrics => "metrics",
            Suite::Optimizer => "optimizer",
            Suite::Overfit => "overfit",
            Suite::Mechanism => "mechanism",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Suite::ALL.iter().map(|k| k.name()).collect();
            Error::Usage(format!("unknown suite {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    /// Largest error observed; its meaning is suite-specific.
    pub max_error: f64,
    pub tolerance: f64,
    pub checks: usize,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<13} max_err={:.3e} tol={:.1e} checks={} time={:.2}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite.name(),
            self.max_error,
            self.tolerance,
            self.checks,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    /// Armed on the analytic side of the gradient suite only.
    pub fault: Option<Fault>,
    /// Thread cap for the mechanism experiment.
    pub threads: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { fault: None, threads: 1 }
    }
}

/// Running maximum of an error measure plus the label of its worst case.
#[derive(Clone, Debug, Default)]
pub(crate) struct Tracker {
    pub max: f64,
    pub checks: usize,
    pub worst: String,
    /// Boolean checks that failed outright.
    pub failures: Vec<String>,
}

impl Tracker {
    pub fn error(&mut self, err: f64, label: impl FnOnce() -> String) {
        self.checks += 1;
        if err > self.max || err.is_nan() {
            self.max = if err.is_nan() { f64::INFINITY } else { err };
            self.worst = label();
        }
    }

    pub fn ensure(&mut self, ok: bool, label: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures.push(label());
        }
    }

    fn finish(self, suite: Suite, tolerance: f64, strict: bool, start: Instant) -> SuiteReport {
        let within = if strict { self.max < tolerance } else { self.max <= tolerance };
        let passed = within && self.failures.is_empty();
        let detail = match (self.failures.first(), self.worst.is_empty()) {
            (Some(f), _) => format!("{} failed check(s), first: {f}", self.failures.len()),
            (None, false) => format!("worst: {}", self.worst),
            (None, true) => String::new(),
        };
        SuiteReport {
            suite,
            passed,
            max_error: self.max,
            tolerance,
            checks: self.checks,
            detail,
            elapsed: start.elapsed(),
        }
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    match suite {
        Suite::Reduction => Ok(layers::reduction()?.finish(suite, 1e-12, false, start)),
        Suite::Gradient => Ok(layers::gradient(opts.fault)?.finish(suite, 1e-4, true, start)),
        Suite::Equivariance => Ok(layers::equivariance()?.finish(suite, 1e-9, false, start)),
        Suite::Attention => Ok(layers::attention()?.finish(suite, 1e-12, false, start)),
        Suite::Metrics => Ok(metrics_suite()?.finish(suite, 1e-12, false, start)),
        Suite::Optimizer => Ok(optimizer_suite()?.finish(suite, 1e-12, false, start)),
        Suite::Overfit => {
            let run = overfit_run(300, 0.99)?;
            let mut t = Tracker::default();
            t.error(1.0 - run.train_accuracy, || format!("train accuracy {:.4} after {} epochs", run.train_accuracy, run.epochs));
            let mut r = t.finish(suite, 0.01, false, start);
            r.detail = format!("train accuracy {:.4} after {} epochs", run.train_accuracy, run.epochs);
            Ok(r)
        }
        Suite::Mechanism => {
            let mo = MechanismOptions::default();
            let table = mechanism_table(&mo, opts.threads)?;
            let again = mechanism_table(&mo, 1)?;
            let mut t = Tracker::default();
            t.ensure(table == again, || "tables differ between runs".into());
            let gap = table.baseline().mean - table.diff().mean;
            t.error(gap.max(0.0), String::new);
            let mut r = t.finish(suite, 0.01, false, start);
            r.detail = format!(
                "baseline {:.4} ± {:.4}, diff-enc {:.4} ± {:.4} ({} seeds)",
                table.baseline().mean,
                table.baseline().std,
                table.diff().mean,
                table.diff().std,
                mo.seeds.len()
            );
            Ok(r)
        }
    }
}

/// Runs the given suites in order; a suite that errors is reported as failed.
pub fn run_suites(suites: &[Suite], opts: &VerifyOptions) -> Vec<SuiteReport> {
    suites
        .iter()
        .map(|&s| {
            let start = Instant::now();
            run_suite(s, opts).unwrap_or_else(|e| SuiteReport {
                suite: s,
                passed: false,
                max_error: f64::INFINITY,
                tolerance: 0.0,
                checks: 0,
                detail: format!("error: {e}"),
                elapsed: start.elapsed(),
            })
        })
        .collect()
}

#[derive(Deserialize)]
struct ClassCase {
    pred: Vec<usize>,
    truth: Vec<usize>,
    num_classes: usize,
    accuracy: f64,
    macro_f1: f64,
}

#[derive(Deserialize)]
struct ApCase {
    scores: Vec<Vec<f64>>,
    targets: Vec<Vec<bool>>,
    ap: f64,
}

#[derive(Deserialize)]
struct RankList {
    positive: f64,
    negatives: Vec<f64>,
}

#[derive(Deserialize)]
struct RankCase {
    lists: Vec<RankList>,
    ranks: Vec<usize>,
    mrr: f64,
    hits1: f64,
    hits3: f64,
    hits10: f64,
}

#[derive(Deserialize)]
struct SimpleRanks {
    ranks: Vec<usize>,
    mrr: f64,
}

#[derive(Deserialize)]
struct MetricFixtures {
    classification: Vec<ClassCase>,
    average_precision: ApCase,
    ranking: RankCase,
    ranks_124: SimpleRanks,
}

const METRIC_FIXTURES: &str = include_str!("../../fixtures/metrics.json");
const ADAMW_TRACE: &str = include_str!("../../fixtures/adamw_trace.json");

/// Worst position of the positive over every tie-consistent ordering.
fn enumerated_rank(positive: f64, negatives: &[f64]) -> usize {
    let ahead = negatives.iter().filter(|&&s| s > positive).count();
    let tied = negatives.iter().filter(|&&s| s == positive).count();
    // orderings only permute the tied block; the positive can sit anywhere in it
    (0..=tied).map(|slot| ahead + slot + 1).max().unwrap_or(ahead + 1)
}

fn metrics_suite() -> Result<Tracker> {
    let fx: MetricFixtures = serde_json::from_str(METRIC_FIXTURES)?;
    let mut t = Tracker::default();
    for (i, c) in fx.classification.iter().enumerate() {
        let acc = accuracy(&c.pred, &c.truth)?;
        let f1 = macro_f1(&c.pred, &c.truth, c.num_classes)?;
        t.error((acc - c.accuracy).abs(), || format!("accuracy case {i}"));
        t.error((f1 - c.macro_f1).abs(), || format!("macro-F1 case {i}"));
        let same = macro_f1(&c.truth, &c.truth, c.num_classes)?;
        t.ensure((0.0..=1.0).contains(&f1) && (0.0..=1.0).contains(&acc), || format!("range case {i}"));
        t.ensure(accuracy(&c.truth, &c.truth)? == 1.0, || format!("perfect accuracy case {i}"));
        if c.truth.iter().collect::<std::collections::BTreeSet<_>>().len() == c.num_classes {
            t.ensure(same == 1.0, || format!("perfect macro-F1 case {i}"));
        }
    }

    let ap = &fx.average_precision;
    let scores = Tensor::from_rows(&ap.scores)?;
    let got = average_precision(&scores, &ap.targets)?;
    t.error((got - ap.ap).abs(), || "average precision".into());
    let perfect: Vec<Vec<f64>> = ap
        .targets
        .iter()
        .map(|r| r.iter().map(|&b| f64::from(u8::from(b))).collect())
        .collect();
    t.ensure(average_precision(&Tensor::from_rows(&perfect)?, &ap.targets)? == 1.0, || "perfect AP".into());

    let rk = &fx.ranking;
    let mut ranks = Vec::new();
    for (i, l) in rk.lists.iter().enumerate() {
        let r = pessimistic_rank(l.positive, &l.negatives);
        t.ensure(r == rk.ranks[i], || format!("rank of list {i}: {r} vs fixture {}", rk.ranks[i]));
        t.ensure(r == enumerated_rank(l.positive, &l.negatives), || format!("enumerated rank of list {i}"));
        ranks.push(r);
    }
    let m = ranking_metrics(&ranks)?;
    for (name, got, want) in [
        ("mrr", m.mrr, rk.mrr),
        ("hits@1", m.hits1, rk.hits1),
        ("hits@3", m.hits3, rk.hits3),
        ("hits@10", m.hits10, rk.hits10),
    ] {
        t.error((got - want).abs(), || name.to_string());
    }
    t.ensure(m.hits1 <= m.mrr && m.mrr <= 1.0, || "hits@1 <= mrr <= 1".into());
    let simple = ranking_metrics(&fx.ranks_124.ranks)?;
    t.error((simple.mrr - fx.ranks_124.mrr).abs(), || "mrr of ranks [1, 2, 4]".into());
    t.ensure(ranking_metrics(&[1, 1]).map(|m| m.hits1 == 1.0).unwrap_or(false), || "perfect hits@1".into());
    t.ensure(ranking_metrics(&[]).is_err(), || "empty candidate set must fail".into());
    Ok(t)
}

#[derive(Deserialize)]
struct AdamTrace {
    x0: f64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    trace: Vec<f64>,
}

fn optimizer_suite() -> Result<Tracker> {
    let fx: AdamTrace = serde_json::from_str(ADAMW_TRACE)?;
    let mut t = Tracker::default();
    let cfg = OptimizerConfig {
        lr: fx.lr,
        beta1: fx.beta1,
        beta2: fx.beta2,
        eps: fx.eps,
        weight_decay: fx.weight_decay,
        clip_norm: 0.0,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::scalar(fx.x0), crate::params::ParamKind::Trainable)?;
    let mut opt = AdamW::new(cfg.clone(), &store);
    for (k, want) in fx.trace.iter().enumerate() {
        let x = store.get(id).data()[0];
        opt.step(&mut store, &[Tensor::scalar(2.0 * x)], cfg.lr)?;
        let got = store.get(id).data()[0];
        t.error((got - want).abs(), || format!("trace step {}", k + 1));
    }

    let sched = OptimizerConfig { lr: 0.5, warmup_steps: 10, total_steps: 110, ..Default::default() };
    for (step, want) in [(0, 0.0), (10, 0.5), (60, 0.25), (110, 0.0)] {
        let got = lr_at(step, &sched);
        t.error((got - want).abs(), || format!("lr_at({step})"));
    }
    let mut zero = ParamStore::new();
    let z = zero.add("x", Tensor::scalar(0.7), crate::params::ParamKind::Trainable)?;
    let mut opt = AdamW::new(OptimizerConfig::default(), &zero);
    opt.step(&mut zero, &[Tensor::scalar(0.0)], 1e-3)?;
    t.ensure(zero.get(z).data()[0] == 0.7, || "zero gradient must leave parameters".into());
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!(matches!("bogus".parse::<Suite>(), Err(Error::Usage(_))));
    }

    #[test]
    fn tie_enumeration_is_pessimistic() {
        assert_eq!(enumerated_rank(0.5, &[0.5, 0.5, 0.1, 0.9]), 4);
        assert_eq!(enumerated_rank(0.5, &[0.1]), 1);
    }

    #[test]
    fn fixture_suites_pass() {
        let opts = VerifyOptions::default();
        for s in [Suite::Metrics, Suite::Optimizer] {
            let r = run_suite(s, &opts).unwrap();
            assert!(r.passed, "{r}");
        }
    }
}
