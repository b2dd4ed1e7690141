use std::ops::Range;

use super::{diff_enc, Ffn};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamBuilder, ParamId};
use crate::tensor::Var;

#[derive(Clone, Debug, PartialEq)]
struct Head {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    diff: Option<Ffn>,
}

/// Global multi-head attention where every head may add
/// `diff_enc(O - 2 diag(A) V)` to its output `O = A V`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    dim: usize,
    head_dim: usize,
    heads: Vec<Head>,
    w_out: ParamId,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, num_heads: usize, use_diff: bool) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {dim} is not divisible into {num_heads} heads"
            )));
        }
        let head_dim = dim / num_heads;
        let mut heads = Vec::with_capacity(num_heads);
        for i in 0..num_heads {
            let mut hb = pb.scope(&format!("head{i}"));
            let q = hb.glorot("w_q", dim, head_dim)?;
            let k = hb.glorot("w_k", dim, head_dim)?;
            let v = hb.glorot("w_v", dim, head_dim)?;
            let diff = if use_diff {
                Some(Ffn::new(&mut hb.scope("diff_enc"), head_dim, head_dim)?)
            } else {
                None
            };
            heads.push(Head { q, k, v, diff });
        }
        let w_out = pb.glorot("w_out", num_heads * head_dim, dim)?;
        Ok(Self {
            dim,
            head_dim,
            heads,
            w_out,
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    fn check_input(&self, cx: &Ctx<'_, '_>, h: Var, n: usize) -> Result<()> {
        let (rows, cols) = cx.tape.value(h).dims();
        if rows != n || cols != self.dim {
            return Err(Error::dim(
                "attention",
                format!("input {rows}x{cols}, expected {n}x{}", self.dim),
            ));
        }
        Ok(())
    }

    fn project(&self, cx: &mut Ctx<'_, '_>, head: &Head, h: Var) -> Result<[Var; 3]> {
        let (q, k, v) = (cx.param(head.q), cx.param(head.k), cx.param(head.v));
        Ok([cx.tape.matmul(h, q)?, cx.tape.matmul(h, k)?, cx.tape.matmul(h, v)?])
    }

    /// `softmax(Q K^T / sqrt(d_h))`, optionally masked to same-graph pairs.
    fn weights(&self, cx: &mut Ctx<'_, '_>, q: Var, k: Var, mask: Option<&[usize]>) -> Result<Var> {
        let kt = cx.tape.transpose(k);
        let s = cx.tape.matmul(q, kt)?;
        let s = cx.tape.scale(s, 1.0 / (self.head_dim as f64).sqrt());
        match mask {
            Some(segment) => cx.tape.masked_softmax_rows(s, segment),
            None => cx.tape.softmax_rows(s),
        }
    }

    fn head_output(&self, cx: &mut Ctx<'_, '_>, head: &Head, a: Var, v: Var, use_diff: bool) -> Result<Var> {
        let o = cx.tape.matmul(a, v)?;
        match (&head.diff, use_diff) {
            (Some(ffn), true) => {
                let own = cx.tape.diag(a)?;
                let own = cx.tape.mul_rows(v, own)?;
                let own2 = cx.tape.scale(own, 2.0);
                let delta = cx.tape.sub(o, own2)?;
                let enc = diff_enc(cx, ffn, delta)?;
                cx.tape.add(o, enc)
            }
            _ => Ok(o),
        }
    }

    fn combine(&self, cx: &mut Ctx<'_, '_>, outputs: &[Var]) -> Result<Var> {
        let cat = cx.tape.concat_cols(outputs)?;
        let w = cx.param(self.w_out);
        cx.tape.matmul(cat, w)
    }

    /// Attention restricted to each contiguous node range of a batch.
    pub fn forward(&self, cx: &mut Ctx<'_, '_>, h: Var, ranges: &[Range<usize>], use_diff: bool) -> Result<Var> {
        let n = ranges.last().map_or(0, |r| r.end);
        self.check_input(cx, h, n)?;
        let mut outputs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let [q, k, v] = self.project(cx, head, h)?;
            let mut parts = Vec::with_capacity(ranges.len());
            for r in ranges.iter().filter(|r| !r.is_empty()) {
                let qs = cx.tape.slice_rows(q, r.start, r.end)?;
                let ks = cx.tape.slice_rows(k, r.start, r.end)?;
                let vs = cx.tape.slice_rows(v, r.start, r.end)?;
                let a = self.weights(cx, qs, ks, None)?;
                parts.push(self.head_output(cx, head, a, vs, use_diff)?);
            }
            outputs.push(cx.tape.concat_rows(&parts)?);
        }
        self.combine(cx, &outputs)
    }

    /// Same result as [`forward`](Self::forward) computed over the whole
    /// batch with cross-graph scores masked before the softmax.
    pub fn forward_masked(&self, cx: &mut Ctx<'_, '_>, h: Var, graph_index: &[usize], use_diff: bool) -> Result<Var> {
        self.check_input(cx, h, graph_index.len())?;
        let mut outputs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let [q, k, v] = self.project(cx, head, h)?;
            let a = self.weights(cx, q, k, Some(graph_index))?;
            outputs.push(self.head_output(cx, head, a, v, use_diff)?);
        }
        self.combine(cx, &outputs)
    }

    /// Masked attention weights of one head, `n x n`.
    pub fn attention_matrix(&self, cx: &mut Ctx<'_, '_>, h: Var, head: usize, graph_index: &[usize]) -> Result<Var> {
        self.check_input(cx, h, graph_index.len())?;
        let hd = self
            .heads
            .get(head)
            .ok_or_else(|| Error::Contract(format!("head {head} out of {}", self.heads.len())))?;
        let [q, k, _] = self.project(cx, hd, h)?;
        self.weights(cx, q, k, Some(graph_index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::*;
    use crate::params::{Mode, ParamStore};
    use crate::tensor::{Tape, Tensor};

    fn build(d: usize, heads: usize, seed: u64) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut rng = seeded(seed);
        let mha = MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), d, heads, true).unwrap();
        (store, mha)
    }

    #[test]
    fn head_count_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = seeded(0);
        let err = MultiHeadAttention::new(&mut ParamBuilder::new(&mut store, &mut rng), 6, 4, true);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    fn one_dim_identity(store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let fill = if name.contains("diff_enc") { 0.0 } else { 1.0 };
            store.get_mut(id).fill(fill);
        }
    }

    #[test]
    fn single_node_diff_input_is_minus_v() {
        let (mut store, mha) = build(1, 1, 0);
        one_dim_identity(&mut store);
        // diff_enc = identity on positives via fc1 = fc2 = 1
        let ffn = mha.heads[0].diff.clone().unwrap();
        store.get_mut(ffn.fc1.w).fill(1.0);
        store.get_mut(ffn.fc2.w).fill(1.0);
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        for v in [-0.4, 0.9] {
            let h = cx.tape.constant(Tensor::full(&[1, 1], v));
            let out = mha.forward(&mut cx, h, &[0..1], true).unwrap();
            // O = v, delta = -v, enc = relu(-v)
            let expect = v + f64::max(-v, 0.0);
            assert_eq!(cx.tape.value(out).data(), &[expect]);
        }
    }

    #[test]
    fn two_node_uniform_attention_hand_computation() {
        let (mut store, mha) = build(1, 1, 0);
        one_dim_identity(&mut store);
        let ffn = mha.heads[0].diff.clone().unwrap();
        store.get_mut(ffn.fc1.w).fill(1.0);
        store.get_mut(ffn.fc2.w).fill(1.0);
        store.get_mut(ffn.fc1.b.unwrap()).fill(10.0);
        store.get_mut(ffn.fc2.b.unwrap()).fill(-10.0);
        // H = 0 makes every score 0; values are fed to the head directly
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let h = cx.tape.constant(Tensor::column(vec![0.0, 0.0]));
        let a = mha.attention_matrix(&mut cx, h, 0, &[0, 0]).unwrap();
        assert_eq!(cx.tape.value(a).data(), &[0.5, 0.5, 0.5, 0.5]);
        let (v1, v2) = (0.8, -2.0);
        let v = cx.tape.constant(Tensor::column(vec![v1, v2]));
        let head = &mha.heads[0];
        let out = mha.head_output(&mut cx, head, a, v, true).unwrap();
        let vbar = (v1 + v2) / 2.0;
        // enc(x) = relu(x + 10) - 10 = x for x > -10
        let expect = [vbar + (vbar - v1), vbar + (vbar - v2)];
        let got = cx.tape.value(out).data();
        for (g, e) in got.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn segmented_and_masked_agree() {
        let mut rng = seeded(3);
        let (mut store, mha) = build(4, 2, 3);
        randomize(&mut store, &mut rng);
        let h = random_tensor(&mut rng, 7, 4);
        let index = [0, 0, 0, 1, 1, 2, 2];
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let hv = cx.tape.constant(h);
        let a = mha.forward(&mut cx, hv, &[0..3, 3..5, 5..7], true).unwrap();
        let b = mha.forward_masked(&mut cx, hv, &index, true).unwrap();
        assert!(cx.tape.value(a).max_abs_diff(cx.tape.value(b)) < 1e-12);
    }

    #[test]
    fn zeroed_encoders_reduce_to_plain_attention() {
        let mut rng = seeded(5);
        let (mut store, mha) = build(4, 2, 9);
        randomize(&mut store, &mut rng);
        store.zero_matching("diff_enc");
        let h = random_tensor(&mut rng, 5, 4);
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let hv = cx.tape.constant(h);
        let a = mha.forward(&mut cx, hv, &[0..2, 2..5], true).unwrap();
        let b = mha.forward(&mut cx, hv, &[0..2, 2..5], false).unwrap();
        assert!(cx.tape.value(a).max_abs_diff(cx.tape.value(b)) <= 1e-12);
    }
}
