use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise argmax; ties go to the lowest column.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn check_lengths(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Validation("no predictions to score".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Unweighted mean of per-class F1 over `0..num_classes`; a class with no
/// true positives, false positives or false negatives scores 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    check_lengths(pred, truth)?;
    if num_classes == 0 {
        return Err(Error::Validation("macro-F1 needs at least one class".into()));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::Validation(format!("class {} out of range", p.max(t))));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let total: f64 = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / num_classes as f64)
}

/// Average precision of one ranking: sum over distinct score thresholds of
/// `(recall gain) * precision`. `None` when there are no positives.
pub fn average_precision_single(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ap = 0.0;
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let mut gained = 0;
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                gained += 1;
            }
            seen += 1;
            i += 1;
        }
        tp += gained;
        if gained > 0 {
            ap += (gained as f64 / total_pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Some(ap)
}

/// Mean AP over labels (columns) that have at least one positive.
pub fn average_precision(scores: &Tensor, targets: &[Vec<bool>]) -> Result<f64> {
    let (n, labels) = scores.dims();
    if n == 0 || targets.len() != n || targets.iter().any(|t| t.len() != labels) {
        return Err(Error::Validation(format!(
            "AP needs matching non-empty scores ({n}x{labels}) and targets ({} rows)",
            targets.len()
        )));
    }
    let mut sum = 0.0;
    let mut counted = 0;
    for l in 0..labels {
        let col: Vec<f64> = (0..n).map(|i| scores.get(i, l)).collect();
        let pos: Vec<bool> = targets.iter().map(|t| t[l]).collect();
        if let Some(ap) = average_precision_single(&col, &pos) {
            sum += ap;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Validation("no label has a positive example".into()));
    }
    Ok(sum / counted as f64)
}

/// `1 + #(negatives scoring above) + #(negatives tied)`.
pub fn pessimistic_rank(positive: f64, negatives: &[f64]) -> usize {
    1 + negatives.iter().filter(|&&s| s >= positive).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RankingMetrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

pub fn ranking_metrics(ranks: &[usize]) -> Result<RankingMetrics> {
    if ranks.is_empty() {
        return Err(Error::Validation("empty candidate set: no positive pairs to rank".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Validation("ranks start at 1".into()));
    }
    let n = ranks.len() as f64;
    let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(RankingMetrics {
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        hits1: hits(1),
        hits3: hits(3),
        hits10: hits(10),
    })
}
