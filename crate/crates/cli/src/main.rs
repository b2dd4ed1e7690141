use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use diffgraph::config::RunConfig;
use diffgraph::graph::{gen_synthetic, load_dataset, save_dataset, Graph, Label, SynthKind, SynthParams};
use diffgraph::model::{load_checkpoint, TaskKind};
use diffgraph::parallel::threads_from_env;
use diffgraph::run::run_training;
use diffgraph::tensor::Fault;
use diffgraph::training::{evaluate, write_metrics_csv, MetricsRecord};
use diffgraph::verify::{run_suites, Suite, VerifyOptions};
use diffgraph::{Error, Result};

#[derive(Parser)]
#[command(name = "diffgraph", version, about = "Graph learning with differential encoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as JSON lines.
    Gen(GenArgs),
    /// Train from a JSON config with key=value overrides.
    Train {
        config: PathBuf,
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the property suites.
    Verify {
        /// Suite to run; repeat for several. Defaults to all of them.
        #[arg(long = "suite")]
        suites: Vec<String>,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(clap::Args)]
struct GenArgs {
    /// sbm-node, cycle-vs-path or pair-contact.
    kind: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    p_in: Option<f64>,
    #[arg(long)]
    p_out: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    edge_radius: Option<f64>,
    #[arg(long)]
    min_hops: Option<usize>,
    /// Output path; defaults to `<kind>-<seed>.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing file.
    #[arg(long)]
    force: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Expected task; must match the checkpoint.
    #[arg(long)]
    task: Option<String>,
    /// Append the metric rows to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Value of the `split` column.
    #[arg(long, default_value = "eval")]
    split: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    DiffEncFlip,
    MatmulSwap,
}

impl From<FaultArg> for Fault {
    fn from(f: FaultArg) -> Fault {
        match f {
            FaultArg::DiffEncFlip => Fault::DiffEncGradFlip,
            FaultArg::MatmulSwap => Fault::MatmulGradSwap,
        }
    }
}

fn gen(args: &GenArgs) -> Result<()> {
    let kind: SynthKind = args.kind.parse()?;
    let d = SynthParams::default();
    let params = SynthParams {
        count: args.count.unwrap_or(d.count),
        n: args.n.unwrap_or(d.n),
        blocks: args.blocks.unwrap_or(d.blocks),
        block_size: args.block_size.unwrap_or(d.block_size),
        p_in: args.p_in.unwrap_or(d.p_in),
        p_out: args.p_out.unwrap_or(d.p_out),
        noise: args.noise.unwrap_or(d.noise),
        radius: args.radius.unwrap_or(d.radius),
        edge_radius: args.edge_radius.unwrap_or(d.edge_radius),
        min_hops: args.min_hops.unwrap_or(d.min_hops),
    };
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}-{}.jsonl", kind.name(), args.seed)));
    if out.exists() && !args.force {
        return Err(Error::Usage(format!("{} already exists; pass --force to overwrite", out.display())));
    }
    let graphs = gen_synthetic(kind, args.seed, &params)?;
    save_dataset(&graphs, &out)?;
    println!("{} -> {}", summarize(&graphs), out.display());
    Ok(())
}

fn summarize(graphs: &[Graph]) -> String {
    let nodes: usize = graphs.iter().map(Graph::num_nodes).sum();
    let mut classes = BTreeMap::new();
    let mut labels = 0;
    let mut pairs = (0, 0);
    for g in graphs {
        match g.label() {
            Label::Class(c) => *classes.entry(*c).or_insert(0usize) += 1,
            Label::Nodes(ys) => ys.iter().for_each(|c| *classes.entry(*c).or_insert(0usize) += 1),
            Label::Multi(v) => labels = v.len(),
            Label::Pairs(ps) => ps.iter().for_each(|p| if p.positive { pairs.0 += 1 } else { pairs.1 += 1 }),
            Label::None => {}
        }
    }
    let labels = if !classes.is_empty() {
        let counts: Vec<String> = classes.values().map(usize::to_string).collect();
        format!("{} classes ({})", classes.len(), counts.join("/"))
    } else if labels > 0 {
        format!("{labels} labels")
    } else {
        format!("{} positive / {} negative pairs", pairs.0, pairs.1)
    };
    format!("{} graphs, {nodes} nodes, {labels}", graphs.len())
}

fn train(config: &Path, overrides: &[String]) -> Result<()> {
    let cfg = RunConfig::load(config)?.with_overrides(overrides)?;
    for run in run_training(&cfg)? {
        let fmt = |r: &MetricsRecord| {
            let m: Vec<String> = r.metrics.iter().map(|(n, v)| format!("{n}={v:.4}")).collect();
            format!("loss={:.4} {}", r.loss, m.join(" "))
        };
        print!("seed {}: best epoch {}, train {}", run.seed, run.best_epoch, fmt(&run.train));
        if let Some(t) = &run.test {
            print!(", test {}", fmt(t));
        }
        println!(" ({})", run.dir.display());
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = ckpt.model;
    let task = model.config().task;
    if let Some(t) = &args.task {
        let want: TaskKind = t.parse()?;
        if want != task {
            return Err(Error::Config(format!(
                "task: checkpoint was trained for {}, not {}",
                task.name(),
                want.name()
            )));
        }
    }
    let graphs = load_dataset(&args.data)?;
    let ev = evaluate(&model, &graphs, args.batch_size, threads_from_env())?;
    let rec = MetricsRecord {
        run_seed: model.config().seed,
        epoch: 0,
        split: args.split.clone(),
        loss: ev.loss,
        metrics: ev.metrics,
    };
    println!("loss {}", rec.loss);
    for (n, v) in &rec.metrics {
        println!("{n} {v}");
    }
    let rows = std::slice::from_ref(&rec);
    write_metrics_csv(io::stdout().lock(), rows, true)?;
    if let Some(path) = &args.csv {
        let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::Io { path: path.clone(), source: e })?;
        write_metrics_csv(file, rows, fresh)?;
    }
    Ok(())
}

fn verify(names: &[String], fault: Option<FaultArg>) -> Result<bool> {
    let suites = if names.is_empty() {
        Suite::ALL.to_vec()
    } else {
        names.iter().map(|n| n.parse()).collect::<Result<Vec<Suite>>>()?
    };
    let opts = VerifyOptions { fault: fault.map(Fault::from), threads: threads_from_env() };
    let reports = run_suites(&suites, &opts);
    let mut out = io::stdout().lock();
    for r in &reports {
        let _ = writeln!(out, "{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    let _ = writeln!(out, "{} of {} suites passed", reports.len() - failed, reports.len());
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => gen(a).map(|_| true),
        Command::Train { config, overrides } => train(config, overrides).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Verify { suites, inject_fault } => verify(suites, *inject_fault),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
