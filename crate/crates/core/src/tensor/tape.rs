use std::sync::Arc;

use super::{matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};

/// Additive pre-softmax constant used to mask attention entries.
pub const MASK_FILL: f64 = -1e30;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-rule corruptions, used only to prove that the
/// gradient checks can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Matmul sends `dB` to `A` and `dA` to `B` (same-shape operands only).
    MatmulGradSwap,
    /// The differential encoder's output gradient is negated.
    DiffEncGradFlip,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    SoftmaxRows(Var),
    SegmentSoftmax(Var, Arc<[usize]>),
    GatherRows(Var, Arc<[usize]>),
    ScatterAddRows(Var, Arc<[usize]>),
    SpMM {
        x: Var,
        offsets: Arc<[usize]>,
        cols: Arc<[usize]>,
        weights: Option<Arc<[f64]>>,
    },
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Diag(Var),
    SumAll(Var),
    MeanAll(Var),
    RowSum(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    CrossEntropy {
        logits: Var,
        labels: Arc<[usize]>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Arc<[f64]>,
    },
    GradFlip(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Define-by-run autodiff tape. Rebuilt for every forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

fn shape2(r: usize, c: usize) -> Vec<usize> {
    vec![r, c]
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn fault(&self) -> Option<Fault> {
        self.fault
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v` by the most recent [`Tape::backward`]
    /// calls (leaves accumulate across calls; intermediates are reset).
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if self.dims(a) != self.dims(b) {
            return Err(Error::dim(op, format!("shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor { shape, data }, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(Tensor { shape, data }, op, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!(
                    "left {:?} and right {:?} have mismatched inner extents",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Tensor { shape: shape2(m, n), data }, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let data = transpose_raw(self.data(a), r, c);
        self.push(Tensor { shape: shape2(c, r), data }, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = Tensor::new(shape, self.data(a).to_vec())?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.zip_map(a, b, Op::Div(a, b), |x, y| x / y))
    }

    /// `a (m x n) + row (1 x n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (r, c) = self.dims(row);
        if r != 1 || c != n {
            return Err(Error::dim(
                "add_row",
                format!(
                    "cannot broadcast {:?} over {:?}",
                    self.value(row).shape(),
                    self.value(a).shape()
                ),
            ));
        }
        let rv = self.data(row);
        let mut data = self.data(a).to_vec();
        for i in 0..m {
            for (x, &b) in data[i * n..(i + 1) * n].iter_mut().zip(rv) {
                *x += b;
            }
        }
        Ok(self.push(Tensor { shape: shape2(m, n), data }, Op::AddRow(a, row), &[a, row]))
    }

    /// Scales row `i` of `a (m x n)` by `s[i]` where `s` is `m x 1`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(s) != (m, 1) {
            return Err(Error::dim(
                "mul_rows",
                format!(
                    "row scales {:?} do not fit {:?}",
                    self.value(s).shape(),
                    self.value(a).shape()
                ),
            ));
        }
        let sv = self.data(s);
        let mut data = self.data(a).to_vec();
        for i in 0..m {
            data[i * n..(i + 1) * n].iter_mut().for_each(|x| *x *= sv[i]);
        }
        Ok(self.push(Tensor { shape: shape2(m, n), data }, Op::MulRows(a, s), &[a, s]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if n == 0 {
            return Err(Error::dim("softmax_rows", "rows must have at least one entry"));
        }
        let x = self.data(a);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax_rows received a non-finite input".into()));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            softmax_into(&x[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n]);
        }
        Ok(self.push(Tensor { shape: shape2(m, n), data }, Op::SoftmaxRows(a), &[a]))
    }

    /// Softmax over rows restricted to entries `(i, j)` with
    /// `segment[i] == segment[j]`; other entries receive [`MASK_FILL`]
    /// before normalisation.
    pub fn masked_softmax_rows(&mut self, a: Var, segment: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if m != segment.len() || n != segment.len() {
            return Err(Error::dim(
                "masked_softmax_rows",
                format!("scores {m}x{n} vs segment of length {}", segment.len()),
            ));
        }
        let mut mask = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                if segment[i] != segment[j] {
                    mask[i * n + j] = MASK_FILL;
                }
            }
        }
        let mask = self.constant(Tensor { shape: shape2(m, n), data: mask });
        let masked = self.add(a, mask)?;
        self.softmax_rows(masked)
    }

    /// Column-wise softmax over groups of rows sharing a segment id.
    pub fn segment_softmax(&mut self, a: Var, segment: &[usize], num_segments: usize) -> Result<Var> {
        let (m, c) = self.dims(a);
        if segment.len() != m {
            return Err(Error::dim(
                "segment_softmax",
                format!("{m} rows but {} segment ids", segment.len()),
            ));
        }
        if let Some(&bad) = segment.iter().find(|&&s| s >= num_segments) {
            return Err(Error::dim("segment_softmax", format!("segment id {bad} >= {num_segments}")));
        }
        let x = self.data(a);
        let mut max = vec![f64::NEG_INFINITY; num_segments * c];
        for (i, &s) in segment.iter().enumerate() {
            for j in 0..c {
                let v = x[i * c + j];
                if v > max[s * c + j] {
                    max[s * c + j] = v;
                }
            }
        }
        let mut data = vec![0.0; m * c];
        let mut sum = vec![0.0; num_segments * c];
        for (i, &s) in segment.iter().enumerate() {
            for j in 0..c {
                let e = (x[i * c + j] - max[s * c + j]).exp();
                data[i * c + j] = e;
                sum[s * c + j] += e;
            }
        }
        for (i, &s) in segment.iter().enumerate() {
            for j in 0..c {
                data[i * c + j] /= sum[s * c + j];
            }
        }
        let seg: Arc<[usize]> = segment.into();
        Ok(self.push(Tensor { shape: shape2(m, c), data }, Op::SegmentSoftmax(a, seg), &[a]))
    }

    /// Output row `k` is input row `index[k]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (m, c) = self.dims(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::dim("gather_rows", format!("row {bad} out of {m}")));
        }
        let x = self.data(a);
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor { shape: shape2(index.len(), c), data },
            Op::GatherRows(a, index.into()),
            &[a],
        ))
    }

    /// Output row `r` is the sum of input rows `k` with `index[k] == r`.
    pub fn scatter_add_rows(&mut self, a: Var, index: &[usize], rows: usize) -> Result<Var> {
        let (m, c) = self.dims(a);
        if index.len() != m {
            return Err(Error::dim(
                "scatter_add_rows",
                format!("{m} rows but {} target indices", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("scatter_add_rows", format!("target {bad} out of {rows}")));
        }
        let x = self.data(a);
        let mut data = vec![0.0; rows * c];
        for (k, &r) in index.iter().enumerate() {
            for j in 0..c {
                data[r * c + j] += x[k * c + j];
            }
        }
        Ok(self.push(
            Tensor { shape: shape2(rows, c), data },
            Op::ScatterAddRows(a, index.into()),
            &[a],
        ))
    }

    /// Sparse-dense product. Row `r` of the result is
    /// `sum_{e in offsets[r]..offsets[r+1]} w_e * x[cols[e]]` with `w_e = 1`
    /// when `weights` is `None`.
    pub fn spmm(
        &mut self,
        offsets: &[usize],
        cols: &[usize],
        weights: Option<&[f64]>,
        x: Var,
    ) -> Result<Var> {
        let (n, d) = self.dims(x);
        let rows = offsets.len().saturating_sub(1);
        if offsets.last().copied().unwrap_or(0) != cols.len() {
            return Err(Error::dim("spmm", "final offset must equal the column count"));
        }
        if let Some(w) = weights {
            if w.len() != cols.len() {
                return Err(Error::dim("spmm", "one weight per stored entry required"));
            }
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::dim("spmm", format!("column {bad} exceeds {n} input rows")));
        }
        let xv = self.data(x);
        let mut data = vec![0.0; rows * d];
        for r in 0..rows {
            let out = &mut data[r * d..(r + 1) * d];
            for e in offsets[r]..offsets[r + 1] {
                let w = weights.map_or(1.0, |w| w[e]);
                let src = &xv[cols[e] * d..(cols[e] + 1) * d];
                for (o, &s) in out.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        Ok(self.push(
            Tensor { shape: shape2(rows, d), data },
            Op::SpMM {
                x,
                offsets: offsets.into(),
                cols: cols.into(),
                weights: weights.map(Into::into),
            },
            &[x],
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, c) = self.dims(a);
        if start > end || end > m {
            return Err(Error::dim("slice_rows", format!("range {start}..{end} of {m} rows")));
        }
        let data = self.data(a)[start * c..end * c].to_vec();
        Ok(self.push(
            Tensor { shape: shape2(end - start, c), data },
            Op::SliceRows(a, start),
            &[a],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map_or(0, |&p| self.dims(p).1);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(Error::dim("concat_rows", format!("column counts {c} and {pc}")));
            }
            data.extend_from_slice(self.data(p));
            rows += r;
        }
        Ok(self.push(Tensor { shape: shape2(rows, c), data }, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map_or(0, |&p| self.dims(p).0);
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::dim("concat_cols", format!("row counts {r} and {pr}")));
            }
            total += pc;
        }
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let pc = self.dims(p).1;
            let src = self.data(p);
            for i in 0..r {
                data[i * total + off..i * total + off + pc].copy_from_slice(&src[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        Ok(self.push(Tensor { shape: shape2(r, total), data }, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if m != n {
            return Err(Error::dim("diag", format!("{m}x{n} is not square")));
        }
        let x = self.data(a);
        let data = (0..n).map(|i| x[i * n + i]).collect();
        Ok(self.push(Tensor { shape: shape2(n, 1), data }, Op::Diag(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.data(a);
        let s = x.iter().sum::<f64>() / x.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// Sums each row: `m x n -> m x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let x = self.data(a);
        let data = (0..m).map(|i| x[i * n..(i + 1) * n].iter().sum()).collect();
        self.push(Tensor { shape: shape2(m, 1), data }, Op::RowSum(a), &[a])
    }

    /// Batch normalisation with statistics of the batch itself.
    /// Returns the output together with the batch mean and the biased
    /// batch variance per column.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (m, n) = self.dims(x);
        self.check_affine("batchnorm", n, gamma, beta)?;
        let xv = self.data(x);
        let mut mean = vec![0.0; n];
        let mut var = vec![0.0; n];
        if m > 0 {
            for i in 0..m {
                for j in 0..n {
                    mean[j] += xv[i * n + j];
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            for i in 0..m {
                for j in 0..n {
                    let d = xv[i * n + j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
        }
        let out = self.affine_norm(x, gamma, beta, &mean, &var, eps, true);
        Ok((out, mean, var))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, n) = self.dims(x);
        self.check_affine("batchnorm", n, gamma, beta)?;
        if mean.len() != n || var.len() != n {
            return Err(Error::dim("batchnorm", format!("running stats do not have {n} columns")));
        }
        Ok(self.affine_norm(x, gamma, beta, mean, var, eps, false))
    }

    fn check_affine(&self, op: &'static str, n: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::dim(
                op,
                format!(
                    "gamma {:?} / beta {:?} do not match {n} columns",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn affine_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch_stats: bool,
    ) -> Var {
        let (m, n) = self.dims(x);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; m * n];
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let h = (xv[i * n + j] - mean[j]) * inv_std[j];
                xhat[i * n + j] = h;
                data[i * n + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Tensor { shape: shape2(m, n), data },
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Mean softmax cross-entropy of `logits (m x C)` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = self.dims(logits);
        if labels.len() != m {
            return Err(Error::dim("cross_entropy", format!("{m} rows but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Validation(format!("class label {bad} out of range for {c} classes")));
        }
        let z = self.data(logits);
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        for i in 0..m {
            let row = &z[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let loss = if m == 0 { 0.0 } else { total / m as f64 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.into(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy on logits, stable in logit space.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.data(logits);
        if targets.len() != z.len() {
            return Err(Error::dim(
                "bce_with_logits",
                format!("{} logits but {} targets", z.len(), targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Validation(format!("binary target {bad} outside [0, 1]")));
        }
        let total: f64 = z
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let loss = if z.is_empty() { 0.0 } else { total / z.len() as f64 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.into(),
            },
            &[logits],
        ))
    }

    /// Identity on the forward pass, negated gradient on the backward pass.
    /// Only inserted when a [`Fault`] is armed.
    pub fn grad_flip(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::GradFlip(a), &[a])
    }

    /// Reverse-mode sweep from a one-element `loss`.
    ///
    /// Gradients of intermediate nodes are recomputed on every call; leaf
    /// gradients accumulate until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                let slot = &mut self.nodes[i].grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            }
            let contributions = self.backward_rule(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, c) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    /// Clears every stored gradient.
    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn backward_rule(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                let bt = transpose_raw(self.data(*b), k, n);
                let da = matmul_raw(g, &bt, m, n, k);
                let at = transpose_raw(self.data(*a), m, k);
                let db = matmul_raw(&at, g, k, m, n);
                let swap = self.fault == Some(Fault::MatmulGradSwap) && da.len() == db.len();
                if swap {
                    vec![(*a, db), (*b, da)]
                } else {
                    vec![(*a, da), (*b, db)]
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                vec![(*a, transpose_raw(g, c, r))]
            }
            Op::Reshape(a) | Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                vec![
                    (*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()),
                    (*b, g.iter().zip(av).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                let da = g.iter().zip(bv).map(|(g, b)| g / b).collect();
                let db = g
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect();
                vec![(*a, da), (*b, db)]
            }
            Op::AddRow(a, row) => {
                let (m, n) = self.dims(*a);
                let mut dr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dr[j] += g[i * n + j];
                    }
                }
                vec![(*a, g.to_vec()), (*row, dr)]
            }
            Op::MulRows(a, s) => {
                let (m, n) = self.dims(*a);
                let (av, sv) = (self.data(*a), self.data(*s));
                let mut da = vec![0.0; m * n];
                let mut ds = vec![0.0; m];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[i * n + j] * sv[i];
                        ds[i] += g[i * n + j] * av[i * n + j];
                    }
                }
                vec![(*a, da), (*s, ds)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
            Op::Relu(a) => {
                let x = self.data(*a);
                vec![(*a, g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())]
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.data(*a);
                vec![(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { slope * g })
                        .collect(),
                )]
            }
            Op::Sigmoid(a) => {
                vec![(*a, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect())]
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = self.dims(*a);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dot: f64 = g[r.clone()].iter().zip(&out[r.clone()]).map(|(g, y)| g * y).sum();
                    for j in r {
                        dx[j] = out[j] * (g[j] - dot);
                    }
                }
                vec![(*a, dx)]
            }
            Op::SegmentSoftmax(a, seg) => {
                let (m, c) = self.dims(*a);
                let nseg = seg.iter().copied().max().map_or(0, |s| s + 1);
                let mut dot = vec![0.0; nseg * c];
                for (i, &s) in seg.iter().enumerate() {
                    for j in 0..c {
                        dot[s * c + j] += g[i * c + j] * out[i * c + j];
                    }
                }
                let mut dx = vec![0.0; m * c];
                for (i, &s) in seg.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] = out[i * c + j] * (g[i * c + j] - dot[s * c + j]);
                    }
                }
                vec![(*a, dx)]
            }
            Op::GatherRows(a, index) => {
                let (m, c) = self.dims(*a);
                let mut dx = vec![0.0; m * c];
                for (k, &r) in index.iter().enumerate() {
                    for j in 0..c {
                        dx[r * c + j] += g[k * c + j];
                    }
                }
                vec![(*a, dx)]
            }
            Op::ScatterAddRows(a, index) => {
                let (_, c) = self.dims(*a);
                let mut dx = Vec::with_capacity(index.len() * c);
                for &r in index.iter() {
                    dx.extend_from_slice(&g[r * c..(r + 1) * c]);
                }
                vec![(*a, dx)]
            }
            Op::SpMM {
                x,
                offsets,
                cols,
                weights,
            } => {
                let (n, d) = self.dims(*x);
                let mut dx = vec![0.0; n * d];
                for r in 0..offsets.len() - 1 {
                    let gr = &g[r * d..(r + 1) * d];
                    for e in offsets[r]..offsets[r + 1] {
                        let w = weights.as_ref().map_or(1.0, |w| w[e]);
                        let dst = &mut dx[cols[e] * d..(cols[e] + 1) * d];
                        for (o, &gv) in dst.iter_mut().zip(gr) {
                            *o += w * gv;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::SliceRows(a, start) => {
                let (m, c) = self.dims(*a);
                let mut dx = vec![0.0; m * c];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                vec![(*a, dx)]
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = self.value(p).numel();
                        let part = g[off..off + len].to_vec();
                        off += len;
                        (p, part)
                    })
                    .collect()
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims();
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let pc = self.dims(p).1;
                        let mut part = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            part.extend_from_slice(&g[i * total + off..i * total + off + pc]);
                        }
                        off += pc;
                        (p, part)
                    })
                    .collect()
            }
            Op::Diag(a) => {
                let (n, _) = self.dims(*a);
                let mut dx = vec![0.0; n * n];
                for i in 0..n {
                    dx[i * n + i] = g[i];
                }
                vec![(*a, dx)]
            }
            Op::SumAll(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                vec![(*a, vec![g[0] / n.max(1) as f64; n])]
            }
            Op::RowSum(a) => {
                let (m, n) = self.dims(*a);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n..(i + 1) * n].iter_mut().for_each(|v| *v = g[i]);
                }
                vec![(*a, dx)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (m, n) = self.dims(*x);
                let gv = self.data(*gamma);
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dgamma[j] += g[i * n + j] * xhat[i * n + j];
                        dbeta[j] += g[i * n + j];
                    }
                }
                let mut dx = vec![0.0; m * n];
                if *batch_stats {
                    // dxhat = g * gamma; dx = inv_std/m * (m dxhat - sum dxhat - xhat sum(dxhat xhat))
                    let mf = m as f64;
                    for j in 0..n {
                        let s1 = dbeta[j] * gv[j];
                        let s2 = dgamma[j] * gv[j];
                        for i in 0..m {
                            let dxh = g[i * n + j] * gv[j];
                            dx[i * n + j] = inv_std[j] / mf * (mf * dxh - s1 - xhat[i * n + j] * s2);
                        }
                    }
                } else {
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = g[i * n + j] * gv[j] * inv_std[j];
                        }
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let (m, c) = self.dims(*logits);
                let scale = g[0] / m.max(1) as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dx[i * c + y] -= scale;
                }
                vec![(*logits, dx)]
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.data(*logits);
                let scale = g[0] / z.len().max(1) as f64;
                vec![(
                    *logits,
                    z.iter().zip(targets.iter()).map(|(&x, &t)| (sigmoid(x) - t) * scale).collect(),
                )]
            }
            Op::GradFlip(a) => vec![(*a, g.iter().map(|v| -v).collect())],
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - mx).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}
