//! Task models built from stacked encoder blocks.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerSnapshot, FORMAT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Batch, BatchTargets};
use crate::layers::{readout, BlockOptions, EncoderBlock, Linear, MpnnKind, Readout};
use crate::params::{Ctx, Mode, ParamBuilder, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    GraphClass,
    NodeClass,
    MultiLabel,
    LinkPred,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::GraphClass => "graph-class",
            TaskKind::NodeClass => "node-class",
            TaskKind::MultiLabel => "multi-label",
            TaskKind::LinkPred => "link-pred",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graph-class" => Ok(TaskKind::GraphClass),
            "node-class" => Ok(TaskKind::NodeClass),
            "multi-label" => Ok(TaskKind::MultiLabel),
            "link-pred" => Ok(TaskKind::LinkPred),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (graph-class, node-class, multi-label, link-pred)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub in_dim: usize,
    /// Width of the edge features; 0 when the data has none.
    pub edge_dim: usize,
    pub heads: usize,
    pub mpnn: MpnnKind,
    pub use_local: bool,
    pub use_global: bool,
    pub use_diff_local: bool,
    pub use_diff_global: bool,
    pub readout: Readout,
    pub task: TaskKind,
    /// Classes or labels; unused by `link-pred`.
    pub num_outputs: usize,
    /// Accepted for config compatibility; only 0 is supported.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden: 64,
            in_dim: 1,
            edge_dim: 0,
            heads: 4,
            mpnn: MpnnKind::GatedGcn,
            use_local: true,
            use_global: true,
            use_diff_local: true,
            use_diff_global: true,
            readout: Readout::Mean,
            task: TaskKind::GraphClass,
            num_outputs: 2,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.hidden == 0 || self.in_dim == 0 {
            return fail("hidden and in_dim must be positive".into());
        }
        if !self.use_local && !self.use_global {
            return fail("at least one of use_local and use_global must be true".into());
        }
        if self.use_global && (self.heads == 0 || self.hidden % self.heads != 0) {
            return fail(format!("hidden {} is not divisible by heads {}", self.hidden, self.heads));
        }
        if self.task != TaskKind::LinkPred && self.num_outputs == 0 {
            return fail("num_outputs must be positive".into());
        }
        if self.dropout != 0.0 {
            return fail(format!("dropout {} is not supported; set it to 0", self.dropout));
        }
        Ok(())
    }

    /// Width of the block FFN hidden layer.
    pub fn ffn_hidden(&self) -> usize {
        2 * self.hidden
    }

    fn uses_edges(&self) -> bool {
        self.use_local && self.mpnn == MpnnKind::GatedGcn
    }

    /// Trainable scalar count implied by the configuration.
    pub fn parameter_count(&self) -> usize {
        let d = self.hidden;
        let mut n = self.in_dim * d + d;
        if self.uses_edges() {
            n += self.edge_dim.max(1) * d + d;
        }
        let diff = |w: usize| 2 * w * w + 2 * w;
        let mut block = 4 * d * d + 3 * d;
        if self.use_local {
            block += 2 * d;
            block += match self.mpnn {
                MpnnKind::Gcn => d * d,
                MpnnKind::Gat => d * d + 2 * d,
                MpnnKind::GatedGcn => 5 * d * d + 4 * d,
            };
            if self.use_diff_local {
                block += diff(d);
            }
        }
        if self.use_global {
            let dh = d / self.heads;
            block += 2 * d + self.heads * 3 * d * dh + self.heads * dh * d;
            if self.use_diff_global {
                block += self.heads * diff(dh);
            }
        }
        n += self.num_layers * block;
        n + match self.task {
            TaskKind::LinkPred => d * d,
            _ => d * self.num_outputs + self.num_outputs,
        }
    }
}

/// Node embeddings of the last block plus the task output: graph logits,
/// node logits, or one score per labelled pair.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub nodes: Var,
    pub output: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    input: Linear,
    edge_input: Option<Linear>,
    blocks: Vec<EncoderBlock>,
    head: Linear,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let d = config.hidden;
        let input = Linear::new(&mut pb.scope("input"), config.in_dim, d, true)?;
        let edge_input = if config.uses_edges() {
            Some(Linear::new(&mut pb.scope("edge_input"), config.edge_dim.max(1), d, true)?)
        } else {
            None
        };
        let opts = BlockOptions {
            kind: config.mpnn,
            heads: config.heads,
            use_local: config.use_local,
            use_global: config.use_global,
            use_diff_local: config.use_diff_local,
            use_diff_global: config.use_diff_global,
            ffn_hidden: config.ffn_hidden(),
        };
        let blocks = (0..config.num_layers)
            .map(|k| EncoderBlock::new(&mut pb.scope(&format!("block{k}")), d, &opts))
            .collect::<Result<Vec<_>>>()?;
        let head = match config.task {
            TaskKind::LinkPred => Linear::new(&mut pb.scope("head"), d, d, false)?,
            _ => Linear::new(&mut pb.scope("head"), d, config.num_outputs, true)?,
        };
        Ok(Self {
            config,
            store,
            input,
            edge_input,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn blocks(&self) -> &[EncoderBlock] {
        &self.blocks
    }

    /// Checks that a batch fits the configured widths and task.
    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        let c = &self.config;
        let g = batch.graph();
        if g.feature_dim() != c.in_dim {
            return Err(Error::Config(format!(
                "in_dim is {} but the data has node features of width {}",
                c.in_dim,
                g.feature_dim()
            )));
        }
        if c.uses_edges() {
            let found = g.edge_feature_dim().unwrap_or(0);
            if found != c.edge_dim && g.num_edges() > 0 {
                return Err(Error::Config(format!(
                    "edge_dim is {} but the data has edge features of width {found}",
                    c.edge_dim
                )));
            }
        }
        let ok = matches!(
            (c.task, batch.targets()),
            (_, BatchTargets::None)
                | (TaskKind::GraphClass, BatchTargets::Classes(_))
                | (TaskKind::NodeClass, BatchTargets::Nodes(_))
                | (TaskKind::MultiLabel, BatchTargets::Multi(_))
                | (TaskKind::LinkPred, BatchTargets::Pairs(_))
        );
        if !ok {
            return Err(Error::Config(format!(
                "task is {} but the data carries {} labels",
                c.task.name(),
                g.label().kind_name()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, cx: &mut Ctx<'_, '_>, batch: &Batch) -> Result<Forward> {
        self.forward_opts(cx, batch, true)
    }

    /// `use_diff = false` bypasses every differential encoder.
    pub fn forward_opts(&self, cx: &mut Ctx<'_, '_>, batch: &Batch, use_diff: bool) -> Result<Forward> {
        let x = cx.tape.constant(batch.graph().x().clone());
        self.forward_from(cx, batch, x, use_diff)
    }

    /// Forward pass from an explicit node-feature variable.
    pub fn forward_from(&self, cx: &mut Ctx<'_, '_>, batch: &Batch, x: Var, use_diff: bool) -> Result<Forward> {
        self.check_batch(batch)?;
        let g = batch.graph();
        let mut h = self.input.forward(cx, x)?;
        let mut e = match &self.edge_input {
            Some(lin) => {
                let raw = match g.directed_edge_attr() {
                    Some(ea) if self.config.edge_dim > 0 => ea,
                    _ => Tensor::full(&[g.num_edges(), self.config.edge_dim.max(1)], 1.0),
                };
                let raw = cx.tape.constant(raw);
                Some(lin.forward(cx, raw)?)
            }
            None => None,
        };
        for block in &self.blocks {
            let (h2, e2) = block.forward_opts(cx, batch, h, e, use_diff)?;
            h = h2;
            e = e2;
        }
        let output = match self.config.task {
            TaskKind::GraphClass | TaskKind::MultiLabel => {
                let pooled = readout(cx, batch, h, self.config.readout)?;
                self.head.forward(cx, pooled)?
            }
            TaskKind::NodeClass => self.head.forward(cx, h)?,
            TaskKind::LinkPred => {
                let pairs: Vec<(usize, usize)> = match batch.targets() {
                    BatchTargets::Pairs(p) => p.iter().map(|p| (p.u, p.v)).collect(),
                    _ => Vec::new(),
                };
                self.link_score(cx, h, &pairs)?
            }
        };
        Ok(Forward { nodes: h, output })
    }

    /// `score(u, v) = (h_u M) . (h_v M)` with the shared head map `M`.
    pub fn link_score(&self, cx: &mut Ctx<'_, '_>, nodes: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        if self.config.task != TaskKind::LinkPred {
            return Err(Error::Config("pair scores need a link-pred model".into()));
        }
        let n = cx.tape.value(nodes).rows();
        if let Some(&(u, v)) = pairs.iter().find(|&&(u, v)| u >= n || v >= n) {
            return Err(Error::Validation(format!("pair ({u}, {v}) is out of range for {n} nodes")));
        }
        let z = self.head.forward(cx, nodes)?;
        let us: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let vs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let zu = cx.tape.gather_rows(z, &us)?;
        let zv = cx.tape.gather_rows(z, &vs)?;
        let prod = cx.tape.mul(zu, zv)?;
        Ok(cx.tape.row_sum(prod))
    }

    /// Eval-mode forward on a fresh tape: `(node embeddings, output)`.
    pub fn predict(&self, batch: &Batch) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &self.store, Mode::Eval);
        let f = self.forward(&mut cx, batch)?;
        Ok((tape.value(f.nodes).clone(), tape.value(f.output).clone()))
    }

    /// Eval-mode scores for arbitrary node pairs of the batch.
    pub fn score_pairs(&self, batch: &Batch, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &self.store, Mode::Eval);
        let f = self.forward(&mut cx, batch)?;
        let s = self.link_score(&mut cx, f.nodes, pairs)?;
        Ok(tape.value(s).data().to_vec())
    }

    /// Names of every stored tensor, in canonical order.
    pub fn tensor_names(&self) -> Vec<&str> {
        self.store.ids().map(|id| self.store.name(id)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{batch_graphs, Graph, Label, PairLabel};
    use crate::layers::testutil::*;
    use crate::layers::Mpnn;

    fn small(kind: MpnnKind, task: TaskKind) -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden: 4,
            in_dim: 3,
            heads: 2,
            mpnn: kind,
            task,
            num_outputs: 3,
            ..Default::default()
        }
    }

    fn labelled(rng: &mut ChaCha8Rng, n: usize, label: Label) -> Graph {
        let g = random_graph(rng, n, 3, 0.5);
        Graph::new(n, g.edges().to_vec(), g.x().clone(), None, label).unwrap()
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // hand counts for d = 4, d_in = 3, 3 outputs, heads 2 (d_h = 2):
        //   input 3*4+4 = 16, block FFN 4*8+8 + 8*4+4 = 76, head 4*3+3 = 15
        //   GCN local: W 16 + BN 8 + diff (16+4+16+4) 40 = 64
        //   global: QKV 2*3*8 = 48, W_out 16, BN 8, diff 2*(4+2+4+2) = 24 -> 96
        //   GatedGCN local: 5*16 + 2 BN * 8 + BN 8 + diff 40 = 144, edge input 1*4+4 = 8
        let cases = [
            (small(MpnnKind::Gcn, TaskKind::GraphClass), 16 + 2 * (76 + 64 + 96) + 15),
            (
                ModelConfig { use_global: false, ..small(MpnnKind::GatedGcn, TaskKind::GraphClass) },
                16 + 8 + 2 * (76 + 144) + 15,
            ),
            (
                ModelConfig {
                    use_diff_local: false,
                    use_diff_global: false,
                    ..small(MpnnKind::Gat, TaskKind::LinkPred)
                },
                16 + 2 * (76 + (16 + 8 + 8) + (48 + 16 + 8)) + 16,
            ),
        ];
        for (cfg, hand) in cases {
            let m = Model::new(cfg.clone()).unwrap();
            assert_eq!(m.store().num_trainable(), hand, "{cfg:?}");
            assert_eq!(cfg.parameter_count(), hand);
        }
    }

    #[test]
    fn local_only_builds_no_attention() {
        let cfg = ModelConfig { use_global: false, ..small(MpnnKind::Gcn, TaskKind::GraphClass) };
        let m = Model::new(cfg).unwrap();
        assert!(m.tensor_names().iter().all(|n| !n.contains("mha")));
        let base = ModelConfig {
            use_diff_local: false,
            use_diff_global: false,
            ..small(MpnnKind::Gcn, TaskKind::GraphClass)
        };
        let m = Model::new(base).unwrap();
        assert!(m.tensor_names().iter().all(|n| !n.contains("diff_enc")));
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            ModelConfig { num_layers: 0, ..Default::default() },
            ModelConfig { heads: 3, ..Default::default() },
            ModelConfig { use_local: false, use_global: false, ..Default::default() },
            ModelConfig { dropout: 0.1, ..Default::default() },
        ];
        for cfg in bad {
            assert!(matches!(Model::new(cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn width_mismatch_is_a_config_error() {
        let m = Model::new(small(MpnnKind::Gcn, TaskKind::GraphClass)).unwrap();
        let g = Graph::new(2, vec![[0, 1]], Tensor::zeros(&[2, 5]), None, Label::Class(0)).unwrap();
        let err = m.predict(&Batch::single(&g).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Config(ref s) if s.contains("in_dim")), "{err}");
    }

    #[test]
    fn one_layer_local_model_equals_manual_composition() {
        let mut rng = seeded(30);
        let cfg = ModelConfig {
            num_layers: 1,
            use_global: false,
            ..small(MpnnKind::Gcn, TaskKind::GraphClass)
        };
        let mut m = Model::new(cfg).unwrap();
        randomize(m.store_mut(), &mut rng);
        m.store_mut().zero_matching("diff_enc");
        let g = labelled(&mut rng, 5, Label::Class(1));
        let batch = Batch::single(&g).unwrap();
        let (_, logits) = m.predict(&batch).unwrap();

        // independent composition: input linear, bare MPNN without encoder,
        // eval batchnorm, residual + FFN, mean readout, head
        let store = m.store().clone();
        let mut pb_store = ParamStore::new();
        let mut r2 = seeded(0);
        let bare = Mpnn::new(&mut ParamBuilder::new(&mut pb_store, &mut r2), MpnnKind::Gcn, 4, false).unwrap();
        let w_name = "block0.mpnn.w";
        pb_store.set(pb_store.find("w").unwrap(), store.get(store.find(w_name).unwrap()).clone()).unwrap();

        let p = |name: &str| store.get(store.find(name).unwrap()).clone();
        let mut tape = Tape::new();
        let h0 = {
            let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
            let x = cx.tape.constant(g.x().clone());
            let h = m.input.forward(&mut cx, x).unwrap();
            cx.tape.value(h).clone()
        };
        let local = {
            let mut cx = Ctx::new(&mut tape, &pb_store, Mode::Eval);
            let h = cx.tape.constant(h0.clone());
            let out = bare.forward(&mut cx, &g, h, None, false).unwrap().nodes;
            cx.tape.value(out).clone()
        };
        let (gm, gb, rm, rv) = (p("block0.bn_local.gamma"), p("block0.bn_local.beta"), p("block0.bn_local.running_mean"), p("block0.bn_local.running_var"));
        let mut h_bar = h0.clone();
        for i in 0..5 {
            for j in 0..4 {
                let bn = (local.get(i, j) - rm.data()[j]) / (rv.data()[j] + 1e-5).sqrt() * gm.data()[j] + gb.data()[j];
                h_bar.data_mut()[i * 4 + j] += bn;
            }
        }
        let dense = |x: &Tensor, w: &Tensor, b: &Tensor, relu: bool| {
            let (n, k) = x.dims();
            let m = w.cols();
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    let mut s = b.data()[j];
                    for t in 0..k {
                        s += x.get(i, t) * w.get(t, j);
                    }
                    out[i * m + j] = if relu { s.max(0.0) } else { s };
                }
            }
            Tensor::matrix(n, m, out).unwrap()
        };
        let f1 = dense(&h_bar, &p("block0.ffn.fc1.w"), &p("block0.ffn.fc1.b"), true);
        let f2 = dense(&f1, &p("block0.ffn.fc2.w"), &p("block0.ffn.fc2.b"), false);
        let mut pooled = vec![0.0; 4];
        for i in 0..5 {
            for j in 0..4 {
                pooled[j] += (f2.get(i, j) + h_bar.get(i, j)) / 5.0;
            }
        }
        let pooled = Tensor::matrix(1, 4, pooled).unwrap();
        let expect = dense(&pooled, &p("head.w"), &p("head.b"), false);
        assert!(logits.max_abs_diff(&expect) < 1e-12, "{logits:?} vs {expect:?}");
    }

    #[test]
    fn eval_forward_is_deterministic_and_permutation_invariant() {
        let mut rng = seeded(31);
        for kind in [MpnnKind::Gcn, MpnnKind::Gat, MpnnKind::GatedGcn] {
            let mut m = Model::new(small(kind, TaskKind::GraphClass)).unwrap();
            randomize(m.store_mut(), &mut rng);
            let g = labelled(&mut rng, 6, Label::Class(0));
            let b = Batch::single(&g).unwrap();
            let (_, a1) = m.predict(&b).unwrap();
            let (_, a2) = m.predict(&b).unwrap();
            assert_eq!(a1, a2);
            let perm = [3, 0, 5, 1, 4, 2];
            let pg = g.permuted(&perm).unwrap();
            let (_, p1) = m.predict(&Batch::single(&pg).unwrap()).unwrap();
            assert!(a1.max_abs_diff(&p1) < 1e-9, "{kind:?}");
        }
    }

    #[test]
    fn link_scores_match_per_pair_oracle() {
        let mut rng = seeded(40);
        let cfg = small(MpnnKind::Gcn, TaskKind::LinkPred);
        let mut m = Model::new(cfg).unwrap();
        randomize(m.store_mut(), &mut rng);
        let pl = |u, v, positive| PairLabel { u, v, positive };
        let g = labelled(&mut rng, 4, Label::Pairs(vec![pl(0, 3, true), pl(1, 2, false)]));
        let b = batch_graphs([&g]).unwrap();
        let pairs = [(0, 1), (2, 3), (3, 3), (1, 0)];
        let scores = m.score_pairs(&b, &pairs).unwrap();
        let (nodes, out) = m.predict(&b).unwrap();
        let mw = m.store().get(m.head.w).clone();
        let z: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| (0..4).map(|t| nodes.get(i, t) * mw.get(t, j)).sum()).collect())
            .collect();
        for (&(u, v), s) in pairs.iter().zip(&scores) {
            let dot: f64 = z[u].iter().zip(&z[v]).map(|(a, b)| a * b).sum();
            assert!((dot - s).abs() < 1e-12);
        }
        assert_eq!(out.rows(), 2);
        assert!(matches!(m.score_pairs(&b, &[(0, 9)]), Err(Error::Validation(_))));
    }

    #[test]
    fn link_score_dot_product_behaviour() {
        let cfg = ModelConfig { hidden: 2, heads: 1, ..small(MpnnKind::Gcn, TaskKind::LinkPred) };
        let mut m = Model::new(cfg).unwrap();
        let w = m.head.w;
        m.store_mut().set(w, Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let store = m.store().clone();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let nodes = cx.tape.constant(Tensor::matrix(4, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
        let s = m.link_score(&mut cx, nodes, &[(0, 1), (0, 2), (3, 0)]).unwrap();
        let s = cx.tape.value(s).data();
        assert!(s[0] > s[1]);
        assert_eq!(s[2], 0.0);
    }
}
