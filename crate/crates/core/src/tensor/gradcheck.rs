use super::{Fault, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients with central finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Largest relative error per input tensor.
    pub per_input: Vec<f64>,
    /// `(input, coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Central-difference gradient checker.
#[derive(Clone, Copy, Debug)]
pub struct GradChecker {
    pub step: f64,
    /// Armed on the analytic tape only; the numeric side never sees it.
    pub fault: Option<Fault>,
}

impl Default for GradChecker {
    fn default() -> Self {
        Self {
            step: 1e-5,
            fault: None,
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

impl GradChecker {
    pub fn with_fault(mut self, fault: Option<Fault>) -> Self {
        self.fault = fault;
        self
    }

    /// Checks every coordinate of every input of the scalar function `f`.
    pub fn check<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::with_fault(self.fault);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&mut tape, &vars)?;
        tape.backward(loss)?;
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();

        let eval = |perturbed: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let out = f(&mut tape, &vars)?;
            let v = tape.value(out);
            if v.numel() != 1 {
                return Err(Error::Contract("grad_check function must be scalar".into()));
            }
            Ok(v.data()[0])
        };

        let mut work: Vec<Tensor> = inputs.to_vec();
        let mut report = GradReport {
            max_rel_error: 0.0,
            per_input: vec![0.0; inputs.len()],
            worst: None,
            coordinates: 0,
        };
        for i in 0..inputs.len() {
            for j in 0..inputs[i].numel() {
                let orig = inputs[i].data()[j];
                work[i].data_mut()[j] = orig + self.step;
                let plus = eval(&work)?;
                work[i].data_mut()[j] = orig - self.step;
                let minus = eval(&work)?;
                work[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let err = relative_error(analytic[i].data()[j], numeric);
                report.coordinates += 1;
                if err > report.per_input[i] {
                    report.per_input[i] = err;
                }
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = err;
                    report.worst = Some((i, j));
                }
            }
        }
        Ok(report)
    }
}

/// [`GradChecker::check`] with the default step `1e-5`.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    GradChecker::default().check(f, inputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_function_has_zero_error() {
        let x = Tensor::new(vec![3], vec![0.5, -2.0, 4.0]).unwrap();
        let rep = grad_check(|t, v| Ok(t.sum(v[0])), &[x]).unwrap();
        assert_eq!(rep.coordinates, 3);
        assert!(rep.max_rel_error < 1e-9, "{rep:?}");
    }

    #[test]
    fn cubic_matches_hand_gradient() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let sq = tape.mul(v, v).unwrap();
        let cube = tape.mul(sq, v).unwrap();
        let s = tape.sum(cube);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap().data(), &[3.0, 12.0]);

        let f = |t: &mut Tape, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            let c = t.mul(sq, v[0])?;
            Ok(t.sum(c))
        };
        let rep = grad_check(f, &[x]).unwrap();
        // numeric derivative of x^3 by central differences is 3x^2 + h^2
        assert!(rep.max_rel_error < 1e-7, "{rep:?}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, 3, 3);
        let b = random(&mut rng, 3, 3);
        let f = |t: &mut Tape, v: &[Var]| {
            let c = t.matmul(v[0], v[1])?;
            Ok(t.sum(c))
        };
        let rep = grad_check(f, &[a, b]).unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn swapped_matmul_rule_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random(&mut rng, 3, 3);
        let b = random(&mut rng, 3, 3);
        let w = random(&mut rng, 3, 3);
        let f = move |t: &mut Tape, v: &[Var]| {
            let c = t.matmul(v[0], v[1])?;
            let wv = t.constant(w.clone());
            let p = t.mul(c, wv)?;
            Ok(t.sum(p))
        };
        let rep = GradChecker::default()
            .with_fault(Some(Fault::MatmulGradSwap))
            .check(f, &[a, b])
            .unwrap();
        assert!(rep.max_rel_error > 1e-2, "{rep:?}");
    }

    #[test]
    fn every_primitive_backward_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 4, 3);
        let y = random(&mut rng, 4, 3);
        let row = random(&mut rng, 1, 3);
        let s = random(&mut rng, 4, 1);
        let w = random(&mut rng, 4, 3);
        let sq = random(&mut rng, 4, 4);
        let denom = Tensor::matrix(4, 3, (0..12).map(|_| rng.random_range(1.0..2.0)).collect()).unwrap();
        let f = move |t: &mut Tape, v: &[Var]| {
            let (x, y, row, s, sq, den) = (v[0], v[1], v[2], v[3], v[4], v[5]);
            let a = t.add(x, y)?;
            let b = t.sub(a, y)?;
            let c = t.mul(b, y)?;
            let c = t.div(c, den)?;
            let d = t.add_row(c, row)?;
            let e = t.mul_rows(d, s)?;
            let f1 = t.leaky_relu(e, 0.2);
            let f2 = t.sigmoid(f1);
            let f3 = t.softmax_rows(f2)?;
            let f4 = t.segment_softmax(x, &[0, 1, 0, 1], 2)?;
            let g = t.gather_rows(f3, &[3, 0, 0, 2])?;
            let h = t.scatter_add_rows(g, &[1, 1, 0, 3], 4)?;
            let tr = t.transpose(sq);
            let m = t.matmul(tr, h)?;
            let sp = t.spmm(&[0, 2, 2, 3, 4], &[1, 2, 0, 3], Some(&[0.5, -1.0, 2.0, 0.3]), m)?;
            let top = t.slice_rows(sp, 1, 3)?;
            let bottom = t.slice_rows(f4, 0, 2)?;
            let cat = t.concat_rows(&[top, bottom])?;
            let cc = t.concat_cols(&[cat, cat])?;
            let dg = t.diag(sq)?;
            let dgs = t.scale(dg, 1.5);
            let dgs = t.add_scalar(dgs, 0.25);
            let r = t.relu(cc);
            let rs = t.row_sum(r);
            let rs = t.reshape(rs, vec![4, 1])?;
            let tot = t.mul(rs, dgs)?;
            let wv = t.constant(w.clone());
            let extra = t.mul(f3, wv)?;
            let extra = t.mean(extra);
            let main = t.sum(tot);
            t.add(main, extra)
        };
        let rep = grad_check(f, &[x, y, row, s, sq, denom]).unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn batchnorm_and_losses_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, 5, 3);
        let gamma = random(&mut rng, 1, 3).reshaped(vec![3]).unwrap();
        let beta = random(&mut rng, 1, 3).reshaped(vec![3]).unwrap();
        let w = random(&mut rng, 5, 3);
        let f = move |t: &mut Tape, v: &[Var]| {
            let (y, _, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
            let wv = t.constant(w.clone());
            let p = t.mul(y, wv)?;
            let ye = t.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
            let ce = t.cross_entropy(ye, &[0, 2, 1, 1, 0])?;
            let bce = t.bce_with_logits(y, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.5, 0.0, 1.0, 0.0, 1.0, 0.2])?;
            let s = t.sum(p);
            let a = t.add(s, ce)?;
            t.add(a, bce)
        };
        let rep = grad_check(f, &[x, gamma, beta]).unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }
}
