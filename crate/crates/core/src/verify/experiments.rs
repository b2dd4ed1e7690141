use crate::error::{Error, Result};
use crate::graph::{gen_synthetic, Graph, SynthKind, SynthParams};
use crate::layers::MpnnKind;
use crate::model::{Model, ModelConfig, TaskKind};
use crate::parallel::par_map;
use crate::training::{train, Flow, OptimizerConfig, Splits, TrainConfig};

/// The seeded SBM node-classification set (2 blocks of 20 nodes, 16
/// graphs) with the full differential model at K=2, d=32.
pub fn overfit_setup() -> Result<(Model, Vec<Graph>, TrainConfig, OptimizerConfig)> {
    let params = SynthParams { count: 16, blocks: 2, block_size: 20, ..Default::default() };
    let graphs = gen_synthetic(SynthKind::SbmNode, 0, &params)?;
    let cfg = ModelConfig {
        num_layers: 2,
        hidden: 32,
        in_dim: params.blocks,
        heads: 4,
        mpnn: MpnnKind::GatedGcn,
        task: TaskKind::NodeClass,
        num_outputs: params.blocks,
        seed: 0,
        ..Default::default()
    };
    let train_cfg = TrainConfig { epochs: 300, batch_size: 16, eval_threads: 1 };
    Ok((Model::new(cfg)?, graphs, train_cfg, OptimizerConfig::default()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverfitRun {
    pub train_accuracy: f64,
    /// Epochs actually run.
    pub epochs: usize,
    pub step_losses: Vec<f64>,
}

/// Trains the overfit fixture for up to `max_epochs`, stopping once the
/// eval-mode train accuracy reaches `target`.
pub fn overfit_run(max_epochs: usize, target: f64) -> Result<OverfitRun> {
    let (mut model, graphs, mut cfg, optim) = overfit_setup()?;
    cfg.epochs = max_epochs;
    let mut last = (0.0, 0);
    let report = train(
        &mut model,
        Splits { train: &graphs, val: None, test: None },
        &cfg,
        &optim,
        |rec| {
            let acc = rec.get("accuracy").unwrap_or(0.0);
            last = (acc, rec.epoch);
            Ok(if acc >= target { Flow::Stop } else { Flow::Continue })
        },
    )?;
    Ok(OverfitRun {
        train_accuracy: last.0,
        epochs: last.1,
        step_losses: report.step_losses,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MechanismOptions {
    pub seeds: Vec<u64>,
    pub n: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub epochs: usize,
    pub model: ModelConfig,
    pub optim: OptimizerConfig,
}

impl Default for MechanismOptions {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            n: 6,
            train_count: 256,
            test_count: 64,
            epochs: 10,
            model: ModelConfig {
                num_layers: 2,
                hidden: 16,
                in_dim: 1,
                heads: 2,
                mpnn: MpnnKind::Gcn,
                task: TaskKind::GraphClass,
                num_outputs: 2,
                ..Default::default()
            },
            optim: OptimizerConfig { lr: 5e-3, ..Default::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MechanismRow {
    pub variant: String,
    /// Test accuracy per seed, in seed order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1).
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MechanismTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<MechanismRow>,
}

impl MechanismTable {
    pub fn baseline(&self) -> &MechanismRow {
        &self.rows[0]
    }

    pub fn diff(&self) -> &MechanismRow {
        &self.rows[1]
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| variant | mean test acc | std | per seed |\n|---|---|---|---|\n");
        for r in &self.rows {
            let per: Vec<String> = r.accuracies.iter().map(|a| format!("{a:.4}")).collect();
            s += &format!("| {} | {:.4} | {:.4} | {} |\n", r.variant, r.mean, r.std, per.join(" "));
        }
        s
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Baseline versus differential-encoding test accuracy on cycle-vs-path.
/// Runs fan out over `threads`; the table does not depend on it.
pub fn mechanism_table(opts: &MechanismOptions, threads: usize) -> Result<MechanismTable> {
    if opts.seeds.is_empty() {
        return Err(Error::Config("the mechanism experiment needs at least one seed".into()));
    }
    let p = |count| SynthParams { count, n: opts.n, ..Default::default() };
    let train_set = gen_synthetic(SynthKind::CycleVsPath, 1_000, &p(opts.train_count))?;
    let test_set = gen_synthetic(SynthKind::CycleVsPath, 2_000, &p(opts.test_count))?;
    let variants = [("baseline", false), ("diff-enc", true)];
    let jobs: Vec<(bool, u64)> = variants
        .iter()
        .flat_map(|&(_, diff)| opts.seeds.iter().map(move |&s| (diff, s)))
        .collect();
    let cfg = TrainConfig { epochs: opts.epochs, batch_size: 32, eval_threads: 1 };
    let results = par_map(&jobs, threads, |&(diff, seed)| -> Result<f64> {
        let mc = ModelConfig { use_diff_local: diff, use_diff_global: diff, seed, ..opts.model.clone() };
        let mut model = Model::new(mc)?;
        let splits = Splits { train: &train_set, val: None, test: Some(&test_set) };
        let report = train(&mut model, splits, &cfg, &opts.optim, |_| Ok(Flow::Continue))?;
        report
            .test
            .and_then(|t| t.get("accuracy"))
            .ok_or_else(|| Error::Validation("no test accuracy recorded".into()))
    });
    let accs = results.into_iter().collect::<Result<Vec<f64>>>()?;
    let k = opts.seeds.len();
    let rows = variants
        .iter()
        .enumerate()
        .map(|(i, &(name, _))| {
            let a = accs[i * k..(i + 1) * k].to_vec();
            let (mean, std) = mean_std(&a);
            MechanismRow { variant: name.to_string(), accuracies: a, mean, std }
        })
        .collect();
    Ok(MechanismTable { seeds: opts.seeds.clone(), rows })
}
