use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{clip_global_norm, evaluate, lr_at, task_loss, AdamW, Evaluation, MetricsRecord, OptimizerConfig};
use crate::error::{Error, Result};
use crate::graph::{batch_graphs, Batch, Graph};
use crate::model::Model;
use crate::params::{Ctx, Mode};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Thread cap for evaluation passes; taken from the environment, not
    /// from config files.
    #[serde(skip, default = "one")]
    pub eval_threads: usize,
}

fn one() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            eval_threads: 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Splits<'a> {
    pub train: &'a [Graph],
    pub val: Option<&'a [Graph]>,
    pub test: Option<&'a [Graph]>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Per-epoch train and val records in order.
    pub records: Vec<MetricsRecord>,
    /// Training loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// 1-based epoch of the best validation score (last epoch without val).
    pub best_epoch: usize,
    /// Optimizer steps taken when `best` was captured.
    pub best_step: u64,
    pub best: Model,
    pub optimizer: AdamW,
    /// Test metrics of the best model, tagged with `best_epoch`.
    pub test: Option<MetricsRecord>,
}

fn record(seed: u64, epoch: usize, split: &str, e: Evaluation) -> MetricsRecord {
    MetricsRecord {
        run_seed: seed,
        epoch,
        split: split.to_string(),
        loss: e.loss,
        metrics: e.metrics,
    }
}

/// Returned by the record callback of [`train`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    /// Finish the current epoch, then stop.
    Stop,
}

/// Seeded mini-batch training with per-epoch evaluation and best-val
/// model selection. `on_record` sees every record as soon as it exists.
pub fn train(
    model: &mut Model,
    data: Splits<'_>,
    cfg: &TrainConfig,
    optim: &OptimizerConfig,
    mut on_record: impl FnMut(&MetricsRecord) -> Result<Flow>,
) -> Result<TrainReport> {
    if data.train.is_empty() {
        return Err(Error::Validation("the training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    for split in [Some(data.train), data.val, data.test].into_iter().flatten() {
        if let Some(g) = split.first() {
            model.check_batch(&Batch::single(g)?)?;
        }
    }
    let seed = model.config().seed;
    let per_epoch = data.train.len().div_ceil(cfg.batch_size) as u64;
    let mut optim = optim.clone();
    if optim.total_steps == 0 {
        optim.total_steps = per_epoch * cfg.epochs as u64;
    }
    optim.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(optim.clone(), model.store());
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut report = TrainReport {
        records: Vec::new(),
        step_losses: Vec::new(),
        best_epoch: 0,
        best_step: 0,
        best: model.clone(),
        optimizer: opt.clone(),
        test: None,
    };
    let mut best_score = f64::NEG_INFINITY;
    let trainable = model.store().trainable_ids();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = batch_graphs(chunk.iter().map(|&i| &data.train[i]))?;
            let step = opt.steps() + 1;
            let mut tape = Tape::new();
            let mut cx = Ctx::new(&mut tape, model.store(), Mode::Train);
            let f = model.forward(&mut cx, &batch)?;
            let (loss, _) = task_loss(cx.tape, model.config().task, f.output, &batch)?;
            let bindings = cx.finish();
            let lv = tape.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("loss became {lv} at step {step} (epoch {epoch})")));
            }
            tape.backward(loss)?;
            let all = bindings.grads(&tape, model.store());
            let mut grads: Vec<Tensor> = trainable.iter().map(|id| all[id.index()].clone()).collect();
            clip_global_norm(&mut grads, optim.clip_norm);
            opt.step(model.store_mut(), &grads, lr_at(step, &optim))?;
            bindings.apply_bn_updates(model.store_mut());
            report.step_losses.push(lv);
        }

        let rec = record(seed, epoch, "train", evaluate(model, data.train, cfg.batch_size, cfg.eval_threads)?);
        let mut flow = on_record(&rec)?;
        report.records.push(rec);
        let score = match data.val {
            Some(val) => {
                let rec = record(seed, epoch, "val", evaluate(model, val, cfg.batch_size, cfg.eval_threads)?);
                if on_record(&rec)? == Flow::Stop {
                    flow = Flow::Stop;
                }
                let s = rec.metrics[0].1;
                report.records.push(rec);
                s
            }
            None => f64::INFINITY,
        };
        if score > best_score || data.val.is_none() {
            best_score = score;
            report.best_epoch = epoch;
            report.best_step = opt.steps();
            report.best = model.clone();
        }
        if flow == Flow::Stop {
            break;
        }
    }

    if let Some(test) = data.test {
        let rec = record(seed, report.best_epoch, "test", evaluate(&report.best, test, cfg.batch_size, cfg.eval_threads)?);
        on_record(&rec)?;
        report.test = Some(rec);
    }
    report.optimizer = opt;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_synthetic, SynthKind, SynthParams};
    use crate::layers::MpnnKind;
    use crate::model::{ModelConfig, TaskKind};

    fn tiny() -> (Model, Vec<Graph>) {
        let graphs = gen_synthetic(
            SynthKind::CycleVsPath,
            3,
            &SynthParams { count: 8, n: 5, ..Default::default() },
        )
        .unwrap();
        let cfg = ModelConfig {
            num_layers: 1,
            hidden: 4,
            heads: 2,
            mpnn: MpnnKind::Gcn,
            task: TaskKind::GraphClass,
            seed: 9,
            ..Default::default()
        };
        (Model::new(cfg).unwrap(), graphs)
    }

    fn splits(g: &[Graph]) -> Splits<'_> {
        Splits { train: g, val: None, test: None }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (mut m, g) = tiny();
        let before = m.store().clone();
        let cfg = TrainConfig { epochs: 1, batch_size: 3, eval_threads: 1 };
        let optim = OptimizerConfig { lr: 0.0, ..Default::default() };
        train(&mut m, splits(&g), &cfg, &optim, |_| Ok(Flow::Continue)).unwrap();
        for id in before.trainable_ids() {
            assert_eq!(before.get(id), m.store().get(id));
        }
    }

    #[test]
    fn one_batch_one_epoch_is_one_step() {
        let (mut m, g) = tiny();
        let cfg = TrainConfig { epochs: 1, batch_size: 64, eval_threads: 1 };
        let r = train(&mut m, splits(&g), &cfg, &OptimizerConfig::default(), |_| Ok(Flow::Continue)).unwrap();
        assert_eq!(r.optimizer.steps(), 1);
        assert_eq!(r.step_losses.len(), 1);
        assert_eq!(r.records.len(), 1);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let cfg = TrainConfig { epochs: 2, batch_size: 3, eval_threads: 1 };
        let run = || {
            let (mut m, g) = tiny();
            let r = train(&mut m, splits(&g), &cfg, &OptimizerConfig::default(), |_| Ok(Flow::Continue)).unwrap();
            (m, r.step_losses)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn stop_request_ends_after_the_epoch() {
        let (mut m, g) = tiny();
        let cfg = TrainConfig { epochs: 5, batch_size: 3, eval_threads: 1 };
        let r = train(&mut m, splits(&g), &cfg, &OptimizerConfig::default(), |rec| {
            Ok(if rec.epoch == 2 { Flow::Stop } else { Flow::Continue })
        })
        .unwrap();
        assert_eq!(r.records.len(), 2);
        assert_eq!(r.optimizer.steps(), 6);
    }

    #[test]
    fn non_finite_loss_names_the_step() {
        let (mut m, g) = tiny();
        let w = m.store().find("head.b").unwrap();
        m.store_mut().get_mut(w).fill(f64::NAN);
        let cfg = TrainConfig { epochs: 1, batch_size: 3, eval_threads: 1 };
        let err = train(&mut m, splits(&g), &cfg, &OptimizerConfig::default(), |_| Ok(Flow::Continue)).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref s) if s.contains("step 1")), "{err}");
    }
}
