//! Losses, optimizer, schedule, metrics and the training loop.

mod fit;
mod metrics;
mod optim;
mod record;

pub use fit::{train, Flow, Splits, TrainConfig, TrainReport};
pub use metrics::{
    accuracy, argmax_rows, average_precision, average_precision_single, macro_f1, pessimistic_rank,
    ranking_metrics, RankingMetrics,
};
pub use optim::{clip_global_norm, lr_at, AdamW, OptimizerConfig};
pub use record::{read_metrics_csv, write_metrics_csv, MetricsRecord, CSV_HEADER};

use crate::error::{Error, Result};
use crate::graph::{batch_graphs, Batch, BatchTargets, Graph};
use crate::model::{Model, TaskKind};
use crate::parallel::par_map;
use crate::params::{Ctx, Mode};
use crate::tensor::{Tape, Var};

/// Mean task loss of one batch and the number of terms it averages.
pub fn task_loss(tape: &mut Tape, task: TaskKind, output: Var, batch: &Batch) -> Result<(Var, usize)> {
    match (task, batch.targets()) {
        (TaskKind::GraphClass, BatchTargets::Classes(y)) => Ok((tape.cross_entropy(output, y)?, y.len())),
        (TaskKind::NodeClass, BatchTargets::Nodes(y)) => {
            if y.is_empty() {
                return Err(Error::Validation("batch has no labelled nodes".into()));
            }
            Ok((tape.cross_entropy(output, y)?, y.len()))
        }
        (TaskKind::MultiLabel, BatchTargets::Multi(rows)) => {
            let width = tape.value(output).cols();
            if let Some(r) = rows.iter().find(|r| r.len() != width) {
                return Err(Error::Validation(format!(
                    "{} labels per graph but the model predicts {width}",
                    r.len()
                )));
            }
            let flat: Vec<f64> = rows.iter().flatten().map(|&b| f64::from(u8::from(b))).collect();
            Ok((tape.bce_with_logits(output, &flat)?, rows.len()))
        }
        (TaskKind::LinkPred, BatchTargets::Pairs(pairs)) => {
            if pairs.is_empty() {
                return Err(Error::Validation("batch has no labelled pairs".into()));
            }
            let t: Vec<f64> = pairs.iter().map(|p| f64::from(u8::from(p.positive))).collect();
            Ok((tape.bce_with_logits(output, &t)?, pairs.len()))
        }
        (task, _) => Err(Error::Config(format!(
            "task {} does not match the labels in the batch",
            task.name()
        ))),
    }
}

/// Loss and task metrics of an eval-mode pass over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// The first entry is the model-selection metric.
    pub metrics: Vec<(String, f64)>,
}

impl Evaluation {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn primary(&self) -> f64 {
        self.metrics[0].1
    }
}

#[derive(Default)]
struct Partial {
    loss_sum: f64,
    count: usize,
    pred: Vec<usize>,
    truth: Vec<usize>,
    scores: Vec<Vec<f64>>,
    multi: Vec<Vec<bool>>,
    ranks: Vec<usize>,
}

fn evaluate_batch(model: &Model, graphs: &[Graph]) -> Result<Partial> {
    let batch = batch_graphs(graphs)?;
    let mut tape = Tape::new();
    let mut cx = Ctx::new(&mut tape, model.store(), Mode::Eval);
    let f = model.forward(&mut cx, &batch)?;
    let task = model.config().task;
    let mut part = Partial::default();
    if task == TaskKind::LinkPred {
        if let BatchTargets::Pairs(pairs) = batch.targets() {
            for p in pairs.iter().filter(|p| p.positive) {
                let range = batch.node_range(batch.graph_index()[p.u]);
                let is_pos = |a: usize, b: usize| {
                    pairs
                        .iter()
                        .any(|q| q.positive && ((q.u, q.v) == (a, b) || (q.u, q.v) == (b, a)))
                };
                let mut cand = vec![(p.u, p.v)];
                cand.extend(range.filter(|&w| w != p.u && w != p.v && !is_pos(p.u, w)).map(|w| (p.u, w)));
                let s = model.link_score(&mut cx, f.nodes, &cand)?;
                let s = cx.tape.value(s).data();
                part.ranks.push(pessimistic_rank(s[0], &s[1..]));
            }
        }
    }
    let (loss, count) = task_loss(cx.tape, task, f.output, &batch)?;
    drop(cx);
    let lv = tape.value(loss).data()[0];
    part.loss_sum = lv * count as f64;
    part.count = count;
    let out = tape.value(f.output);
    match batch.targets() {
        BatchTargets::Classes(y) | BatchTargets::Nodes(y) => {
            part.pred = argmax_rows(out);
            part.truth = y.clone();
        }
        BatchTargets::Multi(rows) => {
            part.scores = out.to_rows();
            part.multi = rows.clone();
        }
        _ => {}
    }
    Ok(part)
}

/// Eval-mode pass over `graphs` in chunks of `batch_size`. Chunks may run
/// on up to `threads` threads; results merge in dataset order.
pub fn evaluate(model: &Model, graphs: &[Graph], batch_size: usize, threads: usize) -> Result<Evaluation> {
    if graphs.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty dataset".into()));
    }
    let chunks: Vec<&[Graph]> = graphs.chunks(batch_size.max(1)).collect();
    let parts = par_map(&chunks, threads, |c| evaluate_batch(model, c));
    let mut all = Partial::default();
    for p in parts {
        let p = p?;
        all.loss_sum += p.loss_sum;
        all.count += p.count;
        all.pred.extend(p.pred);
        all.truth.extend(p.truth);
        all.scores.extend(p.scores);
        all.multi.extend(p.multi);
        all.ranks.extend(p.ranks);
    }
    let loss = all.loss_sum / all.count.max(1) as f64;
    let cfg = model.config();
    let metrics = match cfg.task {
        TaskKind::GraphClass | TaskKind::NodeClass => vec![
            ("accuracy".to_string(), accuracy(&all.pred, &all.truth)?),
            ("macro_f1".to_string(), macro_f1(&all.pred, &all.truth, cfg.num_outputs)?),
        ],
        TaskKind::MultiLabel => {
            let cols = cfg.num_outputs;
            let flat: Vec<f64> = all.scores.into_iter().flatten().collect();
            let scores = crate::tensor::Tensor::matrix(all.multi.len(), cols, flat)?;
            vec![("ap".to_string(), average_precision(&scores, &all.multi)?)]
        }
        TaskKind::LinkPred => {
            let r = ranking_metrics(&all.ranks)?;
            vec![
                ("mrr".to_string(), r.mrr),
                ("hits@1".to_string(), r.hits1),
                ("hits@3".to_string(), r.hits3),
                ("hits@10".to_string(), r.hits10),
            ]
        }
    };
    Ok(Evaluation { loss, metrics })
}
