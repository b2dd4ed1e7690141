use std::ops::Range;

use rand::Rng;

use super::Tracker;
use crate::error::Result;
use crate::fixtures::{random_graph_with_edges, random_permutation, random_ring_graph, random_tensor, randomize, seeded};
use crate::graph::{batch_graphs, Batch, Graph, Label};
use crate::layers::{readout, BatchNorm, BlockOptions, EncoderBlock, Ffn, Mpnn, MpnnKind, MultiHeadAttention, Readout};
use crate::model::{Model, ModelConfig, TaskKind};
use crate::params::{Ctx, Mode, ParamBuilder, ParamStore};
use crate::tensor::{Fault, GradChecker, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Mpnn(MpnnKind),
    Attention,
    Block(MpnnKind),
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::Mpnn(MpnnKind::Gcn),
        LayerKind::Mpnn(MpnnKind::Gat),
        LayerKind::Mpnn(MpnnKind::GatedGcn),
        LayerKind::Attention,
        LayerKind::Block(MpnnKind::Gcn),
        LayerKind::Block(MpnnKind::GatedGcn),
    ];

    pub fn name(self) -> String {
        match self {
            LayerKind::Mpnn(k) => k.name().to_string(),
            LayerKind::Attention => "mha".to_string(),
            LayerKind::Block(k) => format!("block[{}]", k.name()),
        }
    }

    fn needs_edges(self) -> bool {
        matches!(self, LayerKind::Mpnn(MpnnKind::GatedGcn) | LayerKind::Block(MpnnKind::GatedGcn))
    }
}

enum Built {
    Mpnn(Mpnn),
    Attention(MultiHeadAttention),
    Block(EncoderBlock),
}

/// One randomly initialised layer with its own parameter store.
pub(crate) struct LayerCase {
    pub kind: LayerKind,
    pub store: ParamStore,
    layer: Built,
}

impl LayerCase {
    pub fn new(kind: LayerKind, dim: usize, heads: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = seeded(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let layer = match kind {
            LayerKind::Mpnn(k) => Built::Mpnn(Mpnn::new(&mut pb, k, dim, true)?),
            LayerKind::Attention => Built::Attention(MultiHeadAttention::new(&mut pb, dim, heads, true)?),
            LayerKind::Block(k) => Built::Block(EncoderBlock::new(
                &mut pb,
                dim,
                &BlockOptions {
                    kind: k,
                    heads,
                    use_local: true,
                    use_global: true,
                    use_diff_local: true,
                    use_diff_global: true,
                    ffn_hidden: 2 * dim,
                },
            )?),
        };
        let mut rng = seeded(seed ^ 0x5eed);
        randomize(&mut store, &mut rng);
        Ok(Self { kind, store, layer })
    }

    pub fn forward(&self, cx: &mut Ctx<'_, '_>, batch: &Batch, h: Var, edges: Option<Var>, use_diff: bool) -> Result<Var> {
        match &self.layer {
            Built::Mpnn(m) => Ok(m.forward(cx, batch.graph(), h, edges, use_diff)?.nodes),
            Built::Attention(a) => {
                let ranges: Vec<Range<usize>> = (0..batch.num_graphs()).map(|g| batch.node_range(g)).collect();
                a.forward(cx, h, &ranges, use_diff)
            }
            Built::Block(b) => Ok(b.forward_opts(cx, batch, h, edges, use_diff)?.0),
        }
    }

    /// Eval-mode output on a fresh tape.
    pub fn eval(&self, batch: &Batch, edges: Option<&Tensor>, use_diff: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &self.store, Mode::Eval);
        let h = cx.tape.constant(batch.graph().x().clone());
        let e = edges.map(|t| cx.tape.constant(t.clone()));
        let out = self.forward(&mut cx, batch, h, e, use_diff)?;
        Ok(tape.value(out).clone())
    }
}

fn edge_input(g: &Graph, dim: usize) -> Tensor {
    g.directed_edge_attr().unwrap_or_else(|| Tensor::zeros(&[0, dim]))
}

fn heads_for(rng: &mut impl Rng, d: usize) -> usize {
    let divisors: Vec<usize> = (1..=d).filter(|h| d % h == 0).collect();
    divisors[rng.random_range(0..divisors.len())]
}

/// Zeroed differential encoders must leave every layer's output unchanged.
pub(crate) fn reduction() -> Result<Tracker> {
    let mut t = Tracker::default();
    let kinds = [
        LayerKind::Mpnn(MpnnKind::Gcn),
        LayerKind::Mpnn(MpnnKind::Gat),
        LayerKind::Mpnn(MpnnKind::GatedGcn),
        LayerKind::Attention,
    ];
    for kind in kinds {
        for seed in 0..100u64 {
            let mut rng = seeded(seed);
            let d = rng.random_range(1..=8);
            let n = rng.random_range(1..=10);
            let heads = heads_for(&mut rng, d);
            let g = random_graph_with_edges(&mut rng, n, d, d, 0.4);
            let batch = Batch::single(&g)?;
            let mut case = LayerCase::new(kind, d, heads, seed)?;
            case.store.zero_matching("diff_enc");
            let e = kind.needs_edges().then(|| edge_input(&g, d));
            let with = case.eval(&batch, e.as_ref(), true)?;
            let without = case.eval(&batch, e.as_ref(), false)?;
            t.error(with.max_abs_diff(&without), || format!("{} seed {seed} d {d}", kind.name()));
        }
    }
    for (seed, mpnn) in [(0, MpnnKind::Gcn), (1, MpnnKind::Gat), (2, MpnnKind::GatedGcn)] {
        let mut rng = seeded(1000 + seed);
        let cfg = ModelConfig { num_layers: 2, hidden: 8, in_dim: 3, edge_dim: 2, heads: 2, mpnn, seed, ..Default::default() };
        let mut m = Model::new(cfg)?;
        randomize(m.store_mut(), &mut rng);
        m.store_mut().zero_matching("diff_enc");
        let graphs: Vec<Graph> = (0..3)
            .map(|_| {
                let n = rng.random_range(1..=8);
                let g = random_graph_with_edges(&mut rng, n, 3, 2, 0.4);
                g.with_label(Label::Class(0))
            })
            .collect();
        let batch = batch_graphs(&graphs)?;
        let run = |use_diff: bool| -> Result<Tensor> {
            let mut tape = Tape::new();
            let mut cx = Ctx::new(&mut tape, m.store(), Mode::Eval);
            let f = m.forward_opts(&mut cx, &batch, use_diff)?;
            Ok(tape.value(f.output).clone())
        };
        t.error(run(true)?.max_abs_diff(&run(false)?), || format!("full model {}", mpnn.name()));
    }
    Ok(t)
}

/// Positive batchnorm scales and shifts keep every ReLU channel partly
/// active, so no parameter's gradient collapses to round-off size.
fn condition_batchnorm(store: &mut ParamStore, rng: &mut impl Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let range = match store.name(id) {
            n if n.ends_with(".gamma") => 0.5..1.5,
            n if n.ends_with(".beta") => 0.0..0.5,
            _ => continue,
        };
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(range.clone());
        }
    }
}

/// `sum(out * r)` for a fixed random `r`, so every output coordinate matters.
fn weighted_sum(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let r = tape.constant(r.clone());
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

fn check_layer(t: &mut Tracker, checker: &GradChecker, kind: LayerKind, mode: Mode, seed: u64) -> Result<()> {
    let (d, n) = (4, 5);
    let mut rng = seeded(seed);
    let g = random_ring_graph(&mut rng, n, d, d, 0.5);
    let g2 = random_ring_graph(&mut rng, 3, d, d, 0.5);
    let batch = batch_graphs([&g, &g2])?;
    let mut case = LayerCase::new(kind, d, 2, seed)?;
    condition_batchnorm(&mut case.store, &mut rng);
    let ids = case.store.trainable_ids();
    let r = random_tensor(&mut rng, batch.num_nodes(), d);
    let mut inputs = vec![batch.graph().x().clone()];
    if kind.needs_edges() {
        inputs.push(edge_input(batch.graph(), d));
    }
    let offset = inputs.len();
    inputs.extend(ids.iter().map(|&id| case.store.get(id).clone()));
    let report = checker.check(
        |tape, vars| {
            let mut cx = Ctx::new(tape, &case.store, mode);
            for (k, &id) in ids.iter().enumerate() {
                cx.bind(id, vars[offset + k])?;
            }
            let e = kind.needs_edges().then(|| vars[1]);
            let out = case.forward(&mut cx, &batch, vars[0], e, true)?;
            weighted_sum(cx.tape, out, &r)
        },
        &inputs,
    )?;
    let worst = report.worst.map(|(i, _)| {
        if i < offset {
            ["h", "edges"][i].to_string()
        } else {
            case.store.name(ids[i - offset]).to_string()
        }
    });
    t.error(report.max_rel_error, || {
        format!("{} ({mode:?}) at {}", kind.name(), worst.unwrap_or_default())
    });
    Ok(())
}

fn check_model(t: &mut Tracker, checker: &GradChecker, task: TaskKind, mode: Mode) -> Result<()> {
    let mut rng = seeded(77);
    let cfg = ModelConfig {
        num_layers: 1,
        hidden: 4,
        in_dim: 3,
        edge_dim: 2,
        heads: 2,
        task,
        num_outputs: 3,
        seed: 5,
        ..Default::default()
    };
    let mut m = Model::new(cfg)?;
    randomize(m.store_mut(), &mut rng);
    condition_batchnorm(m.store_mut(), &mut rng);
    let label = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| match task {
        TaskKind::GraphClass => Label::Class(rng.random_range(0..3)),
        TaskKind::NodeClass => Label::Nodes((0..n).map(|_| rng.random_range(0..3)).collect()),
        TaskKind::MultiLabel => Label::Multi((0..3).map(|_| rng.random_bool(0.5)).collect()),
        TaskKind::LinkPred => Label::Pairs(vec![
            crate::graph::PairLabel { u: 0, v: n - 1, positive: true },
            crate::graph::PairLabel { u: 1, v: n - 2, positive: false },
        ]),
    };
    let graphs: Vec<Graph> = [5usize, 4, 6]
        .into_iter()
        .map(|n| {
            let g = random_ring_graph(&mut rng, n, 3, 2, 0.5);
            let l = label(&mut rng, n);
            g.with_label(l)
        })
        .collect();
    let batch = batch_graphs(&graphs)?;
    let ids = m.store().trainable_ids();
    let mut inputs = vec![batch.graph().x().clone()];
    inputs.extend(ids.iter().map(|&id| m.store().get(id).clone()));
    let report = checker.check(
        |tape, vars| {
            let mut cx = Ctx::new(tape, m.store(), mode);
            for (k, &id) in ids.iter().enumerate() {
                cx.bind(id, vars[1 + k])?;
            }
            let f = m.forward_from(&mut cx, &batch, vars[0], true)?;
            Ok(crate::training::task_loss(cx.tape, task, f.output, &batch)?.0)
        },
        &inputs,
    )?;
    let worst = report
        .worst
        .map(|(i, _)| if i == 0 { "x".to_string() } else { m.store().name(ids[i - 1]).to_string() });
    t.error(report.max_rel_error, || {
        format!("model {} ({mode:?}) at {}", task.name(), worst.unwrap_or_default())
    });
    Ok(())
}

fn check_small_ops(t: &mut Tracker, checker: &GradChecker) -> Result<()> {
    let mut rng = seeded(31);
    let d = 4;
    let mut store = ParamStore::new();
    let mut prng = seeded(3);
    let mut pb = ParamBuilder::new(&mut store, &mut prng);
    let ffn = Ffn::new(&mut pb.scope("diff_enc"), d, d)?;
    let bn = BatchNorm::new(&mut pb.scope("bn"), d)?;
    randomize(&mut store, &mut rng);
    let ids = store.trainable_ids();
    let x = random_tensor(&mut rng, 6, d);
    let r = random_tensor(&mut rng, 6, d);
    let g = random_graph_with_edges(&mut rng, 6, d, 0, 0.3);
    let parts = [g.clone(), random_graph_with_edges(&mut rng, 2, d, 0, 0.5)];
    let batch = batch_graphs(&parts)?;
    let rr = random_tensor(&mut rng, 2, d);
    for mode in [Mode::Train, Mode::Eval] {
        let mut inputs = vec![x.clone()];
        inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
        let report = checker.check(
            |tape, vars| {
                let mut cx = Ctx::new(tape, &store, mode);
                for (k, &id) in ids.iter().enumerate() {
                    cx.bind(id, vars[1 + k])?;
                }
                let enc = match mode {
                    Mode::Eval => crate::layers::diff_enc(&mut cx, &ffn, vars[0])?,
                    Mode::Train => vars[0],
                };
                let out = bn.forward(&mut cx, enc)?;
                weighted_sum(cx.tape, out, &r)
            },
            &inputs,
        )?;
        t.error(report.max_rel_error, || format!("diff_enc and batchnorm ({mode:?})"));
    }
    for mode in [Readout::Mean, Readout::Sum] {
        let xb = random_tensor(&mut rng, batch.num_nodes(), d);
        let report = checker.check(
            |tape, vars| {
                let mut cx = Ctx::new(tape, &store, Mode::Eval);
                let out = readout(&mut cx, &batch, vars[0], mode)?;
                weighted_sum(cx.tape, out, &rr)
            },
            &[xb],
        )?;
        t.error(report.max_rel_error, || format!("readout {mode:?}"));
    }
    Ok(())
}

/// Finite-difference checks of every parameter of every layer and of the
/// full model at width 4, depth 1. Inputs are ring graphs: a node with a
/// single neighbour has a gate pinned near 1, its edge gradient sits near
/// 1e-9 and round-off in the loss swamps the finite difference. Layers run with eval-mode batchnorm:
/// in train mode a bias feeding a batchnorm has an exactly zero gradient,
/// and the relative error of two round-off values is meaningless. The
/// train-mode batchnorm rule is checked on its own.
pub(crate) fn gradient(fault: Option<Fault>) -> Result<Tracker> {
    let checker = GradChecker::default().with_fault(fault);
    let mut t = Tracker::default();
    for (k, kind) in LayerKind::ALL.into_iter().enumerate() {
        check_layer(&mut t, &checker, kind, Mode::Eval, 100 + k as u64)?;
    }
    check_small_ops(&mut t, &checker)?;
    for task in [TaskKind::GraphClass, TaskKind::NodeClass, TaskKind::MultiLabel, TaskKind::LinkPred] {
        check_model(&mut t, &checker, task, Mode::Eval)?;
    }
    Ok(t)
}

/// Relabelling nodes permutes layer and node outputs and leaves graph
/// logits unchanged.
pub(crate) fn equivariance() -> Result<Tracker> {
    let mut t = Tracker::default();
    let d = 4;
    let cases: Vec<LayerCase> = LayerKind::ALL
        .into_iter()
        .enumerate()
        .map(|(k, kind)| LayerCase::new(kind, d, 2, 300 + k as u64))
        .collect::<Result<_>>()?;
    let model = |task: TaskKind, seed: u64| -> Result<Model> {
        let cfg = ModelConfig { num_layers: 2, hidden: 8, in_dim: d, edge_dim: d, heads: 2, task, num_outputs: 3, seed, ..Default::default() };
        let mut m = Model::new(cfg)?;
        randomize(m.store_mut(), &mut seeded(seed + 1));
        Ok(m)
    };
    let node_model = model(TaskKind::NodeClass, 11)?;
    let graph_model = model(TaskKind::GraphClass, 12)?;
    for i in 0..50u64 {
        let mut rng = seeded(400 + i);
        let n = rng.random_range(1..=16);
        let p = rng.random_range(0.1..0.6);
        let g = random_graph_with_edges(&mut rng, n, d, d, p);
        let perm = random_permutation(&mut rng, n);
        let gp = g.permuted(&perm)?;
        let (b, bp) = (Batch::single(&g)?, Batch::single(&gp)?);
        for case in &cases {
            let e = case.kind.needs_edges().then(|| edge_input(&g, d));
            let ep = case.kind.needs_edges().then(|| edge_input(&gp, d));
            let out = case.eval(&b, e.as_ref(), true)?;
            let outp = case.eval(&bp, ep.as_ref(), true)?;
            t.error(out.permute_rows(&perm).max_abs_diff(&outp), || format!("{} graph {i}", case.kind.name()));
        }
        let (h, hp) = (b, bp);
        let (nodes, logits) = node_model.predict(&h)?;
        let (nodes_p, logits_p) = node_model.predict(&hp)?;
        t.error(nodes.permute_rows(&perm).max_abs_diff(&nodes_p), || format!("model nodes graph {i}"));
        t.error(logits.permute_rows(&perm).max_abs_diff(&logits_p), || format!("node logits graph {i}"));
        let (_, gl) = graph_model.predict(&h)?;
        let (_, glp) = graph_model.predict(&hp)?;
        t.error(gl.max_abs_diff(&glp), || format!("graph logits graph {i}"));
    }
    Ok(t)
}

/// Row-stochastic masked attention, isolation between graphs of a batch
/// and finite outputs for large inputs.
pub(crate) fn attention() -> Result<Tracker> {
    let mut t = Tracker::default();
    let d = 4;
    for i in 0..20u64 {
        let mut rng = seeded(500 + i);
        let count = rng.random_range(2..=4);
        let graphs: Vec<Graph> = (0..count)
            .map(|_| {
                let n = rng.random_range(1..=7);
                random_graph_with_edges(&mut rng, n, d, 0, 0.4)
            })
            .collect();
        let batch = batch_graphs(&graphs)?;
        let mut store = ParamStore::new();
        let mut prng = seeded(i);
        let mha = MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut prng), d, 2, true)?;
        randomize(&mut store, &mut rng);
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let h = cx.tape.constant(batch.graph().x().clone());
        for head in 0..mha.num_heads() {
            let a = mha.attention_matrix(&mut cx, h, head, batch.graph_index())?;
            let a = cx.tape.value(a).clone();
            let gi = batch.graph_index();
            for r in 0..a.rows() {
                let row = a.row(r);
                let s: f64 = row.iter().sum();
                t.error((s - 1.0).abs(), || format!("row {r} of batch {i}"));
                let leaked = row.iter().enumerate().any(|(c, &v)| gi[c] != gi[r] && v != 0.0);
                let ranged = row.iter().all(|v| (0.0..=1.0).contains(v));
                t.ensure(!leaked && ranged, || format!("row {r} of batch {i} leaks or leaves [0, 1]"));
            }
        }

        // perturb graph 0 and compare the rest bit for bit
        let mut moved = graphs.clone();
        let g0 = &graphs[0];
        let noisy = random_tensor(&mut rng, g0.num_nodes(), d);
        moved[0] = Graph::new(g0.num_nodes(), g0.edges().to_vec(), noisy, None, Label::None)?;
        let moved_batch = batch_graphs(&moved)?;
        let rest = batch.node_range(0).end..batch.num_nodes();
        let layer = |b: &Batch, masked: bool| -> Result<Tensor> {
            let mut tape = Tape::new();
            let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
            let h = cx.tape.constant(b.graph().x().clone());
            let out = if masked {
                mha.forward_masked(&mut cx, h, b.graph_index(), true)?
            } else {
                let ranges: Vec<Range<usize>> = (0..b.num_graphs()).map(|g| b.node_range(g)).collect();
                mha.forward(&mut cx, h, &ranges, true)?
            };
            Ok(tape.value(out).clone())
        };
        for masked in [false, true] {
            let a = layer(&batch, masked)?;
            let b = layer(&moved_batch, masked)?;
            let same = rest.clone().all(|r| a.row(r).iter().zip(b.row(r)).all(|(x, y)| x.to_bits() == y.to_bits()));
            t.ensure(same, || format!("batch {i} (masked = {masked}) changed under a graph-0 perturbation"));
        }
        let cfg = ModelConfig { num_layers: 2, hidden: 8, in_dim: d, heads: 2, seed: i, ..Default::default() };
        let m = Model::new(cfg)?;
        let (na, _) = m.predict(&batch)?;
        let (nb, _) = m.predict(&moved_batch)?;
        let same = rest.clone().all(|r| na.row(r).iter().zip(nb.row(r)).all(|(x, y)| x.to_bits() == y.to_bits()));
        t.ensure(same, || format!("model outputs of batch {i} changed under a graph-0 perturbation"));

        let big: Vec<Graph> = graphs
            .iter()
            .map(|g| {
                let mut x = g.x().clone();
                x.data_mut().iter_mut().for_each(|v| *v *= 1e3);
                Graph::new(g.num_nodes(), g.edges().to_vec(), x, None, Label::None)
            })
            .collect::<Result<_>>()?;
        let (nodes, out) = m.predict(&batch_graphs(&big)?)?;
        t.ensure(nodes.is_finite() && out.is_finite(), || format!("non-finite outputs for scaled batch {i}"));
    }
    Ok(t)
}
