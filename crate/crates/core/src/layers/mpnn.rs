use serde::{Deserialize, Serialize};

use super::{diff_enc, BatchNorm, Ffn};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::{Ctx, ParamBuilder, ParamId};
use crate::tensor::{Tensor, Var};

const GAT_SLOPE: f64 = 0.2;
const GATE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MpnnKind {
    Gcn,
    Gat,
    #[serde(rename = "gatedgcn")]
    GatedGcn,
}

impl MpnnKind {
    pub fn name(self) -> &'static str {
        match self {
            MpnnKind::Gcn => "gcn",
            MpnnKind::Gat => "gat",
            MpnnKind::GatedGcn => "gatedgcn",
        }
    }
}

impl std::str::FromStr for MpnnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(MpnnKind::Gcn),
            "gat" => Ok(MpnnKind::Gat),
            "gatedgcn" => Ok(MpnnKind::GatedGcn),
            other => Err(Error::Config(format!("unknown mpnn kind `{other}` (gcn, gat, gatedgcn)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Weights {
    Gcn {
        w: ParamId,
    },
    Gat {
        w: ParamId,
        /// `[a_dst; a_src]`, shape `2d x 1`.
        a: ParamId,
    },
    Gated {
        u: ParamId,
        v: ParamId,
        a: ParamId,
        b: ParamId,
        c: ParamId,
        bn_edge: BatchNorm,
        bn_node: BatchNorm,
    },
}

/// One message-passing layer. With a differential encoder the aggregate
/// becomes `sum + diff_enc(neighbour messages - self message)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mpnn {
    kind: MpnnKind,
    dim: usize,
    weights: Weights,
    diff: Option<Ffn>,
}

/// Node embeddings and, for GatedGCN, the updated edge embeddings.
#[derive(Clone, Copy, Debug)]
pub struct MpnnOutput {
    pub nodes: Var,
    pub edges: Option<Var>,
}

/// The two halves of the aggregate before the update function.
struct Messages {
    neighbors: Var,
    own: Var,
}

impl Mpnn {
    pub fn new(pb: &mut ParamBuilder<'_>, kind: MpnnKind, dim: usize, use_diff: bool) -> Result<Self> {
        let weights = match kind {
            MpnnKind::Gcn => Weights::Gcn {
                w: pb.glorot("w", dim, dim)?,
            },
            MpnnKind::Gat => Weights::Gat {
                w: pb.glorot("w", dim, dim)?,
                a: pb.glorot("a", 2 * dim, 1)?,
            },
            MpnnKind::GatedGcn => Weights::Gated {
                u: pb.glorot("u", dim, dim)?,
                v: pb.glorot("v", dim, dim)?,
                a: pb.glorot("a", dim, dim)?,
                b: pb.glorot("b", dim, dim)?,
                c: pb.glorot("c", dim, dim)?,
                bn_edge: BatchNorm::new(&mut pb.scope("bn_edge"), dim)?,
                bn_node: BatchNorm::new(&mut pb.scope("bn_node"), dim)?,
            },
        };
        let diff = if use_diff {
            Some(Ffn::new(&mut pb.scope("diff_enc"), dim, dim)?)
        } else {
            None
        };
        Ok(Self {
            kind,
            dim,
            weights,
            diff,
        })
    }

    pub fn kind(&self) -> MpnnKind {
        self.kind
    }

    pub fn diff_enc(&self) -> Option<&Ffn> {
        self.diff.as_ref()
    }

    /// `use_diff = false` skips the encoder even when it exists.
    pub fn forward(
        &self,
        cx: &mut Ctx<'_, '_>,
        g: &Graph,
        h: Var,
        edges: Option<Var>,
        use_diff: bool,
    ) -> Result<MpnnOutput> {
        let (n, d) = cx.tape.value(h).dims();
        if n != g.num_nodes() || d != self.dim {
            return Err(Error::dim(
                "mpnn",
                format!("features {n}x{d} for a graph of {} nodes and width {}", g.num_nodes(), self.dim),
            ));
        }
        let (msgs, edges_out) = match &self.weights {
            Weights::Gcn { w } => (self.gcn_messages(cx, g, h, *w)?, None),
            Weights::Gat { w, a } => (self.gat_messages(cx, g, h, *w, *a)?, None),
            Weights::Gated { u, v, a, b, c, bn_edge, .. } => {
                let e = edges.ok_or_else(|| {
                    Error::Contract("gatedgcn layers need edge embeddings".into())
                })?;
                let (m, e) = self.gated_messages(cx, g, h, e, [*u, *v, *a, *b, *c], bn_edge)?;
                (m, Some(e))
            }
        };
        let mut agg = cx.tape.add(msgs.neighbors, msgs.own)?;
        if let (true, Some(ffn)) = (use_diff, &self.diff) {
            let delta = cx.tape.sub(msgs.neighbors, msgs.own)?;
            let enc = diff_enc(cx, ffn, delta)?;
            agg = cx.tape.add(agg, enc)?;
        }
        let nodes = match &self.weights {
            Weights::Gcn { .. } => cx.tape.relu(agg),
            Weights::Gat { .. } => agg,
            Weights::Gated { bn_node, .. } => {
                let z = bn_node.forward(cx, agg)?;
                let z = cx.tape.relu(z);
                cx.tape.add(h, z)?
            }
        };
        Ok(MpnnOutput {
            nodes,
            edges: edges_out,
        })
    }

    fn gcn_messages(&self, cx: &mut Ctx<'_, '_>, g: &Graph, h: Var, w: ParamId) -> Result<Messages> {
        let w = cx.param(w);
        let z = cx.tape.matmul(h, w)?;
        let deg: Vec<f64> = (0..g.num_nodes()).map(|u| g.degree(u) as f64 + 1.0).collect();
        let coef: Vec<f64> = g
            .targets()
            .iter()
            .zip(g.sources())
            .map(|(&u, &v)| 1.0 / (deg[u] * deg[v]).sqrt())
            .collect();
        let neighbors = cx.tape.spmm(g.offsets(), g.sources(), Some(&coef), z)?;
        let inv = cx.tape.constant(Tensor::column(deg.iter().map(|d| 1.0 / d).collect()));
        let own = cx.tape.mul_rows(z, inv)?;
        Ok(Messages { neighbors, own })
    }

    fn gat_messages(&self, cx: &mut Ctx<'_, '_>, g: &Graph, h: Var, w: ParamId, a: ParamId) -> Result<Messages> {
        let n = g.num_nodes();
        let e = g.num_edges();
        let w = cx.param(w);
        let a = cx.param(a);
        let z = cx.tape.matmul(h, w)?;
        let a_dst = cx.tape.slice_rows(a, 0, self.dim)?;
        let a_src = cx.tape.slice_rows(a, self.dim, 2 * self.dim)?;
        let s_dst = cx.tape.matmul(z, a_dst)?;
        let s_src = cx.tape.matmul(z, a_src)?;
        // neighbour edges first, then one self edge per node
        let dst: Vec<usize> = g.targets().iter().copied().chain(0..n).collect();
        let src: Vec<usize> = g.sources().iter().copied().chain(0..n).collect();
        let sd = cx.tape.gather_rows(s_dst, &dst)?;
        let ss = cx.tape.gather_rows(s_src, &src)?;
        let scores = cx.tape.add(sd, ss)?;
        let scores = cx.tape.leaky_relu(scores, GAT_SLOPE);
        let alpha = cx.tape.segment_softmax(scores, &dst, n)?;
        let zs = cx.tape.gather_rows(z, &src)?;
        let weighted = cx.tape.mul_rows(zs, alpha)?;
        let nbr = cx.tape.slice_rows(weighted, 0, e)?;
        let neighbors = cx.tape.scatter_add_rows(nbr, g.targets(), n)?;
        let own = cx.tape.slice_rows(weighted, e, e + n)?;
        Ok(Messages { neighbors, own })
    }

    fn gated_messages(
        &self,
        cx: &mut Ctx<'_, '_>,
        g: &Graph,
        h: Var,
        e: Var,
        [u, v, a, b, c]: [ParamId; 5],
        bn_edge: &BatchNorm,
    ) -> Result<(Messages, Var)> {
        let (rows, width) = cx.tape.value(e).dims();
        if rows != g.num_edges() || width != self.dim {
            return Err(Error::dim(
                "gatedgcn",
                format!("edge embeddings {rows}x{width} for {} directed edges of width {}", g.num_edges(), self.dim),
            ));
        }
        let n = g.num_nodes();
        let (u, v, a, b, c) = (cx.param(u), cx.param(v), cx.param(a), cx.param(b), cx.param(c));
        let ah = cx.tape.matmul(h, a)?;
        let bh = cx.tape.matmul(h, b)?;
        let ce = cx.tape.matmul(e, c)?;
        let ah_dst = cx.tape.gather_rows(ah, g.targets())?;
        let bh_src = cx.tape.gather_rows(bh, g.sources())?;
        let pre = cx.tape.add(ah_dst, bh_src)?;
        let pre = cx.tape.add(pre, ce)?;
        let pre = bn_edge.forward(cx, pre)?;
        let pre = cx.tape.relu(pre);
        let e_hat = cx.tape.add(e, pre)?;

        let sig = cx.tape.sigmoid(e_hat);
        let denom = cx.tape.scatter_add_rows(sig, g.targets(), n)?;
        let denom = cx.tape.add_scalar(denom, GATE_EPS);
        let denom = cx.tape.gather_rows(denom, g.targets())?;
        let eta = cx.tape.div(sig, denom)?;
        let vh = cx.tape.matmul(h, v)?;
        let vh_src = cx.tape.gather_rows(vh, g.sources())?;
        let msgs = cx.tape.mul(eta, vh_src)?;
        let neighbors = cx.tape.scatter_add_rows(msgs, g.targets(), n)?;
        let own = cx.tape.matmul(h, u)?;
        Ok((Messages { neighbors, own }, e_hat))
    }
}
