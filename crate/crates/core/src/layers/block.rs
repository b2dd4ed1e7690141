use std::ops::Range;

use super::{BatchNorm, Ffn, Mpnn, MpnnKind, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::graph::Batch;
use crate::params::{Ctx, ParamBuilder};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockOptions {
    pub kind: MpnnKind,
    pub heads: usize,
    pub use_local: bool,
    pub use_global: bool,
    pub use_diff_local: bool,
    pub use_diff_global: bool,
    /// Hidden width of the block FFN.
    pub ffn_hidden: usize,
}

/// Hybrid encoder block:
/// `h_bar = BN(mpnn(H)) + BN(mha(H)) + H`, `out = FFN(h_bar) + h_bar`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    local: Option<(Mpnn, BatchNorm)>,
    global: Option<(MultiHeadAttention, BatchNorm)>,
    ffn: Ffn,
}

impl EncoderBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, opts: &BlockOptions) -> Result<Self> {
        if !opts.use_local && !opts.use_global {
            return Err(Error::Config(
                "an encoder block needs the local branch, the global branch or both".into(),
            ));
        }
        let local = if opts.use_local {
            let mpnn = Mpnn::new(&mut pb.scope("mpnn"), opts.kind, dim, opts.use_diff_local)?;
            Some((mpnn, BatchNorm::new(&mut pb.scope("bn_local"), dim)?))
        } else {
            None
        };
        let global = if opts.use_global {
            let mha = MultiHeadAttention::new(&mut pb.scope("mha"), dim, opts.heads, opts.use_diff_global)?;
            Some((mha, BatchNorm::new(&mut pb.scope("bn_global"), dim)?))
        } else {
            None
        };
        let ffn = Ffn::new(&mut pb.scope("ffn"), dim, opts.ffn_hidden)?;
        Ok(Self { local, global, ffn })
    }

    pub fn mpnn(&self) -> Option<&Mpnn> {
        self.local.as_ref().map(|(m, _)| m)
    }

    pub fn attention(&self) -> Option<&MultiHeadAttention> {
        self.global.as_ref().map(|(m, _)| m)
    }

    pub fn ffn(&self) -> &Ffn {
        &self.ffn
    }

    /// Returns the new node embeddings and the updated edge embeddings.
    pub fn forward(&self, cx: &mut Ctx<'_, '_>, batch: &Batch, h: Var, edges: Option<Var>) -> Result<(Var, Option<Var>)> {
        self.forward_opts(cx, batch, h, edges, true)
    }

    /// `use_diff = false` bypasses every differential encoder.
    pub fn forward_opts(
        &self,
        cx: &mut Ctx<'_, '_>,
        batch: &Batch,
        h: Var,
        edges: Option<Var>,
        use_diff: bool,
    ) -> Result<(Var, Option<Var>)> {
        let mut h_bar = h;
        let mut edges_out = edges;
        if let Some((mpnn, bn)) = &self.local {
            let out = mpnn.forward(cx, batch.graph(), h, edges, use_diff)?;
            let local = bn.forward(cx, out.nodes)?;
            h_bar = cx.tape.add(h_bar, local)?;
            if out.edges.is_some() {
                edges_out = out.edges;
            }
        }
        if let Some((mha, bn)) = &self.global {
            let ranges: Vec<Range<usize>> = (0..batch.num_graphs()).map(|g| batch.node_range(g)).collect();
            let out = mha.forward(cx, h, &ranges, use_diff)?;
            let global = bn.forward(cx, out)?;
            h_bar = cx.tape.add(h_bar, global)?;
        }
        let f = self.ffn.forward(cx, h_bar)?;
        Ok((cx.tape.add(f, h_bar)?, edges_out))
    }
}
