//! Configured training runs: output directory layout, CSV streaming and
//! checkpoints.
//!
//! ```text
//! <output_dir>/config.resolved.json
//! <output_dir>/metrics.csv         single seed
//! <output_dir>/best.ckpt
//! <output_dir>/last.ckpt
//! <output_dir>/seed-<s>/...        one directory per seed when several are given
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::{load_dataset, Graph};
use crate::model::{save_checkpoint, Checkpoint, Model};
use crate::parallel::threads_from_env;
use crate::training::{train, write_metrics_csv, Flow, MetricsRecord, Splits};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub best_epoch: usize,
    /// Last train-split record.
    pub train: MetricsRecord,
    pub test: Option<MetricsRecord>,
}

fn load_split(path: Option<&Path>) -> Result<Option<Vec<Graph>>> {
    path.map(load_dataset).transpose()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Loads every dataset and checks widths before any training starts.
pub fn run_training(cfg: &RunConfig) -> Result<Vec<SeedRun>> {
    cfg.validate()?;
    let train_set = load_split(cfg.data.train.as_deref())?.unwrap_or_default();
    let val = load_split(cfg.data.val.as_deref())?;
    let test = load_split(cfg.data.test.as_deref())?;
    Model::new(cfg.model.clone())?;

    create_dir(&cfg.output_dir)?;
    let echo = cfg.output_dir.join(RESOLVED_CONFIG);
    fs::write(&echo, cfg.to_resolved_json()?).map_err(|e| Error::io(&echo, e))?;

    let seeds = cfg.run_seeds();
    let mut train_cfg = cfg.train.clone();
    train_cfg.eval_threads = threads_from_env();
    let mut out = Vec::new();
    for &seed in &seeds {
        let dir = if seeds.len() == 1 {
            cfg.output_dir.clone()
        } else {
            cfg.output_dir.join(format!("seed-{seed}"))
        };
        create_dir(&dir)?;
        let csv_path = dir.join(METRICS_CSV);
        let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let mut csv = BufWriter::new(file);
        let mut first = true;
        let mut emit = |rec: &MetricsRecord| -> Result<Flow> {
            write_metrics_csv(&mut csv, std::slice::from_ref(rec), first)?;
            first = false;
            Ok(Flow::Continue)
        };

        let mut model = Model::new(crate::model::ModelConfig { seed, ..cfg.model.clone() })?;
        let splits = Splits {
            train: &train_set,
            val: val.as_deref(),
            test: test.as_deref(),
        };
        let report = train(&mut model, splits, &train_cfg, &cfg.optim, &mut emit)?;
        csv.flush().map_err(|e| Error::io(&csv_path, e))?;

        save_checkpoint(
            &Checkpoint { model: report.best.clone(), step: report.best_step, optimizer: None },
            dir.join(BEST_CKPT),
        )?;
        save_checkpoint(
            &Checkpoint {
                model,
                step: report.optimizer.steps(),
                optimizer: Some(report.optimizer.snapshot()),
            },
            dir.join(LAST_CKPT),
        )?;
        let last_train = report
            .records
            .iter()
            .rev()
            .find(|r| r.split == "train")
            .cloned()
            .ok_or_else(|| Error::Config("train.epochs must be at least 1".into()))?;
        out.push(SeedRun {
            seed,
            dir,
            best_epoch: report.best_epoch,
            train: last_train,
            test: report.test,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_synthetic, save_dataset, SynthKind, SynthParams};
    use crate::model::load_checkpoint;
    use crate::training::read_metrics_csv;

    fn setup(dir: &Path) -> RunConfig {
        let data = gen_synthetic(SynthKind::CycleVsPath, 1, &SynthParams { count: 8, n: 5, ..Default::default() }).unwrap();
        let path = dir.join("train.jsonl");
        save_dataset(&data, &path).unwrap();
        RunConfig::default()
            .with_overrides(&[
                format!("data.train={}", path.display()),
                format!("data.test={}", path.display()),
                format!("output_dir={}", dir.join("out").display()),
                "num_layers=1".into(),
                "hidden=4".into(),
                "heads=2".into(),
                "mpnn=gcn".into(),
                "epochs=2".into(),
                "batch_size=4".into(),
            ])
            .unwrap()
    }

    #[test]
    fn layout_and_determinism() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = setup(tmp.path());
        let runs = run_training(&cfg).unwrap();
        let out = cfg.output_dir.clone();
        for f in [RESOLVED_CONFIG, METRICS_CSV, BEST_CKPT, LAST_CKPT] {
            assert!(out.join(f).exists(), "{f}");
        }
        let first = fs::read(out.join(METRICS_CSV)).unwrap();
        let recs = read_metrics_csv(first.as_slice()).unwrap();
        assert_eq!(recs.last().unwrap().split, "test");
        assert_eq!(runs[0].test.as_ref().unwrap(), recs.last().unwrap());

        let again = RunConfig::load(out.join(RESOLVED_CONFIG)).unwrap();
        assert_eq!(again, cfg);
        run_training(&again).unwrap();
        assert_eq!(fs::read(out.join(METRICS_CSV)).unwrap(), first);
        let last = load_checkpoint(out.join(LAST_CKPT)).unwrap();
        assert_eq!(last.step, 4);
        assert!(last.optimizer.is_some());
    }

    #[test]
    fn several_seeds_get_their_own_directories() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = setup(tmp.path()).with_overrides(&["seeds=[3,4]".into(), "epochs=1".into()]).unwrap();
        let runs = run_training(&cfg).unwrap();
        assert_eq!(runs.len(), 2);
        for s in [3, 4] {
            let csv = fs::read_to_string(cfg.output_dir.join(format!("seed-{s}")).join(METRICS_CSV)).unwrap();
            assert!(csv.lines().nth(1).unwrap().starts_with(&format!("{s},1,train,")));
        }
    }

    #[test]
    fn bad_inputs_fail_before_training() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = setup(tmp.path());
        let missing = cfg.with_overrides(&["data.val=/nonexistent/val.jsonl".into()]).unwrap();
        assert!(matches!(run_training(&missing), Err(Error::Io { .. })));
        assert!(!cfg.output_dir.exists());
        let wide = cfg.with_overrides(&["in_dim=3".into()]).unwrap();
        let err = run_training(&wide).unwrap_err();
        assert!(err.to_string().contains("in_dim"), "{err}");
    }
}
