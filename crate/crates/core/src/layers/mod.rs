//! Neural layers: linear maps, the position-wise FFN (also used as the
//! differential encoder), batchnorm, message passing, differential
//! attention, the hybrid encoder block and readout.

mod attention;
mod block;
mod mpnn;

pub use attention::MultiHeadAttention;
pub use block::{BlockOptions, EncoderBlock};
pub use mpnn::{Mpnn, MpnnKind, MpnnOutput};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Batch;
use crate::params::{BnUpdate, Ctx, Mode, ParamBuilder, ParamId};
use crate::tensor::{Fault, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// `x W (+ b)` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let w = pb.glorot("w", in_dim, out_dim)?;
        let b = if bias {
            Some(pb.constant("b", &[1, out_dim], 0.0)?)
        } else {
            None
        };
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, cx: &mut Ctx<'_, '_>, x: Var) -> Result<Var> {
        let w = cx.param(self.w);
        let y = cx.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = cx.param(b);
                cx.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two fully connected layers with a ReLU between them, applied row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize, hidden: usize) -> Result<Self> {
        let fc1 = Linear::new(&mut pb.scope("fc1"), dim, hidden, true)?;
        let fc2 = Linear::new(&mut pb.scope("fc2"), hidden, dim, true)?;
        Ok(Self { fc1, fc2 })
    }

    pub fn dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn forward(&self, cx: &mut Ctx<'_, '_>, x: Var) -> Result<Var> {
        let width = cx.tape.value(x).cols();
        if width != self.dim() {
            return Err(Error::dim(
                "ffn",
                format!("input width {width} but the layer expects {}", self.dim()),
            ));
        }
        let h = self.fc1.forward(cx, x)?;
        let h = cx.tape.relu(h);
        self.fc2.forward(cx, h)
    }
}

/// Differential encoder: the FFN applied to `delta` (rest minus self).
pub fn diff_enc(cx: &mut Ctx<'_, '_>, ffn: &Ffn, delta: Var) -> Result<Var> {
    let out = ffn.forward(cx, delta)?;
    if cx.tape.fault() == Some(Fault::DiffEncGradFlip) {
        return Ok(cx.tape.grad_flip(out));
    }
    Ok(out)
}

/// Batch normalisation over rows with running statistics kept as buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.constant("gamma", &[1, dim], 1.0)?,
            beta: pb.constant("beta", &[1, dim], 0.0)?,
            running_mean: pb.buffer("running_mean", Tensor::zeros(&[1, dim]))?,
            running_var: pb.buffer("running_var", Tensor::full(&[1, dim], 1.0))?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx<'_, '_>, x: Var) -> Result<Var> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        let store = cx.store();
        match cx.mode() {
            Mode::Eval => cx.tape.batchnorm_eval(
                x,
                gamma,
                beta,
                store.get(self.running_mean).data(),
                store.get(self.running_var).data(),
                BN_EPS,
            ),
            Mode::Train => {
                let m = cx.tape.value(x).rows();
                let (y, mean, var) = cx.tape.batchnorm_train(x, gamma, beta, BN_EPS)?;
                if m > 0 {
                    let unbias = if m >= 2 { m as f64 / (m as f64 - 1.0) } else { 1.0 };
                    let blend = |old: &[f64], new: &[f64], scale: f64| -> Vec<f64> {
                        old.iter()
                            .zip(new)
                            .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n * scale)
                            .collect()
                    };
                    cx.record_bn(BnUpdate {
                        mean: self.running_mean,
                        var: self.running_var,
                        new_mean: blend(store.get(self.running_mean).data(), &mean, 1.0),
                        new_var: blend(store.get(self.running_var).data(), &var, unbias),
                    });
                }
                Ok(y)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    Mean,
    Sum,
}

impl std::str::FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Readout::Mean),
            "sum" => Ok(Readout::Sum),
            other => Err(Error::Config(format!("unknown readout `{other}` (mean, sum)"))),
        }
    }
}

/// Pools node rows into one row per graph of the batch.
pub fn readout(cx: &mut Ctx<'_, '_>, batch: &Batch, h: Var, mode: Readout) -> Result<Var> {
    let rows = cx.tape.value(h).rows();
    if rows != batch.num_nodes() {
        return Err(Error::dim(
            "readout",
            format!("{rows} rows for a batch of {} nodes", batch.num_nodes()),
        ));
    }
    let pooled = cx.tape.scatter_add_rows(h, batch.graph_index(), batch.num_graphs())?;
    match mode {
        Readout::Sum => Ok(pooled),
        Readout::Mean => {
            let inv: Vec<f64> = (0..batch.num_graphs())
                .map(|g| {
                    let n = batch.node_range(g).len();
                    if n == 0 {
                        0.0
                    } else {
                        1.0 / n as f64
                    }
                })
                .collect();
            let inv = cx.tape.constant(Tensor::column(inv));
            cx.tape.mul_rows(pooled, inv)
        }
    }
}

#[cfg(test)]
pub(crate) use crate::fixtures as testutil;

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use crate::graph::{batch_graphs, Graph, Label};
    use crate::params::ParamStore;
    use crate::tensor::Tape;

    fn one_by_one_ffn() -> (ParamStore, Ffn) {
        let mut store = ParamStore::new();
        let mut rng = seeded(0);
        let ffn = Ffn::new(&mut ParamBuilder::new(&mut store, &mut rng), 1, 1).unwrap();
        (store, ffn)
    }

    #[test]
    fn diff_enc_hand_value() {
        let (mut store, ffn) = one_by_one_ffn();
        store.set(ffn.fc1.w, Tensor::scalar(2.0).reshaped(vec![1, 1]).unwrap()).unwrap();
        store.set(ffn.fc1.b.unwrap(), Tensor::full(&[1, 1], -1.0)).unwrap();
        store.set(ffn.fc2.w, Tensor::full(&[1, 1], 3.0)).unwrap();
        store.set(ffn.fc2.b.unwrap(), Tensor::full(&[1, 1], 0.0)).unwrap();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let delta = cx.tape.constant(Tensor::full(&[1, 1], 1.0));
        let out = diff_enc(&mut cx, &ffn, delta).unwrap();
        assert_eq!(cx.tape.value(out).data(), &[3.0]);
    }

    #[test]
    fn diff_enc_zero_cases() {
        let mut rng = seeded(4);
        let mut store = ParamStore::new();
        let ffn = Ffn::new(&mut ParamBuilder::new(&mut store, &mut rng), 3, 3).unwrap();
        let delta = random_tensor(&mut rng, 5, 3);

        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let z = cx.tape.constant(Tensor::zeros(&[5, 3]));
        let out = diff_enc(&mut cx, &ffn, z).unwrap();
        assert!(cx.tape.value(out).data().iter().all(|&v| v == 0.0));

        let mut zeroed = store.clone();
        zeroed.zero_matching("");
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &zeroed, Mode::Eval);
        let d = cx.tape.constant(delta);
        let out = diff_enc(&mut cx, &ffn, d).unwrap();
        assert!(cx.tape.value(out).data().iter().all(|&v| v == 0.0));

        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let wrong = cx.tape.constant(Tensor::zeros(&[5, 2]));
        assert!(matches!(diff_enc(&mut cx, &ffn, wrong), Err(Error::Dimension { .. })));
    }

    #[test]
    fn batchnorm_running_stats_follow_momentum() {
        let mut rng = seeded(1);
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut ParamBuilder::new(&mut store, &mut rng), 1).unwrap();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Train);
        let x = cx.tape.constant(Tensor::column(vec![1.0, 2.0, 3.0, 6.0]));
        bn.forward(&mut cx, x).unwrap();
        cx.finish().apply_bn_updates(&mut store);
        // batch mean 3, unbiased variance 14/3
        assert!((store.get(bn.running_mean).data()[0] - 0.3).abs() < 1e-15);
        let expect = 0.9 + 0.1 * 14.0 / 3.0;
        assert!((store.get(bn.running_var).data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn readout_cases() {
        let g = Graph::new(3, vec![[0, 1]], Tensor::column(vec![1.0, 2.0, 3.0]), None, Label::Class(0)).unwrap();
        let b = batch_graphs([&g]).unwrap();
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
        let h = cx.tape.constant(g.x().clone());
        let s = readout(&mut cx, &b, h, Readout::Sum).unwrap();
        assert_eq!(cx.tape.value(s).data(), &[6.0]);

        let same = cx.tape.constant(Tensor::from_rows(&vec![vec![0.5, -2.0]; 3]).unwrap());
        let m = readout(&mut cx, &b, same, Readout::Mean).unwrap();
        assert_eq!(cx.tape.value(m).data(), &[0.5, -2.0]);
    }

    #[test]
    fn batched_readout_stacks_per_graph_readouts() {
        let mut rng = seeded(8);
        let graphs: Vec<Graph> = [3, 1, 5]
            .iter()
            .map(|&n| {
                let g = random_graph(&mut rng, n, 2, 0.5);
                Graph::new(n, g.edges().to_vec(), g.x().clone(), None, Label::Class(0)).unwrap()
            })
            .collect();
        let batch = batch_graphs(&graphs).unwrap();
        let store = ParamStore::new();
        for mode in [Readout::Mean, Readout::Sum] {
            let mut tape = Tape::new();
            let mut cx = Ctx::new(&mut tape, &store, Mode::Eval);
            let h = cx.tape.constant(batch.graph().x().clone());
            let all = readout(&mut cx, &batch, h, mode).unwrap();
            let all = cx.tape.value(all).clone();
            for (gi, g) in graphs.iter().enumerate() {
                let single = batch_graphs([g]).unwrap();
                let h = cx.tape.constant(g.x().clone());
                let one = readout(&mut cx, &single, h, mode).unwrap();
                let one = cx.tape.value(one);
                for (a, b) in one.data().iter().zip(all.row(gi)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
