use std::f64::consts::PI;

use crate::numeric::{softplus, CustomOp, Graph, NumericError, Real, Tensor, Var};

/// Values per mixture component in a raw head row.
pub const RAW_PER_COMPONENT: usize = 6;

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

struct GmmNll {
    targets: Vec<[f64; 2]>,
    sigma_min: f64,
    diagonal_only: bool,
}

impl GmmNll {
    /// Negative log-likelihood of one row, optionally writing `d(-log p)/d raw`.
    fn row(&self, raw: &[f64], x: [f64; 2], grad: Option<&mut [f64]>) -> f64 {
        let k = raw.len() / RAW_PER_COMPONENT;
        let mut logits = Vec::with_capacity(k);
        let mut scores = Vec::with_capacity(k);
        let mut parts = Vec::with_capacity(k);
        for c in raw.chunks(RAW_PER_COMPONENT) {
            let l11 = self.sigma_min + softplus(c[3]);
            let l21 = if self.diagonal_only { 0.0 } else { c[4] };
            let l22 = self.sigma_min + softplus(c[5]);
            let z0 = (x[0] - c[1]) / l11;
            let z1 = (x[1] - c[2] - l21 * z0) / l22;
            let log_n = -(2.0 * PI).ln() - (l11 * l22).ln() - 0.5 * (z0 * z0 + z1 * z1);
            logits.push(c[0]);
            scores.push(c[0] + log_n);
            parts.push((l11, l21, l22, z0, z1));
        }
        let lse_logits = logsumexp(&logits);
        let lse_scores = logsumexp(&scores);
        let nll = lse_logits - lse_scores;
        if let Some(grad) = grad {
            for (n, (gc, c)) in grad
                .chunks_mut(RAW_PER_COMPONENT)
                .zip(raw.chunks(RAW_PER_COMPONENT))
                .enumerate()
            {
                let pi = (logits[n] - lse_logits).exp();
                let resp = (scores[n] - lse_scores).exp();
                let (l11, l21, l22, z0, z1) = parts[n];
                let d_mu0 = z0 / l11 - z1 * l21 / (l11 * l22);
                let d_mu1 = z1 / l22;
                let d_l11 = -1.0 / l11 + z0 * z0 / l11 - z1 * l21 * z0 / (l11 * l22);
                let d_l21 = z1 * z0 / l22;
                let d_l22 = -1.0 / l22 + z1 * z1 / l22;
                gc[0] = pi - resp;
                gc[1] = -resp * d_mu0;
                gc[2] = -resp * d_mu1;
                gc[3] = -resp * d_l11 * sigmoid(c[3]);
                gc[4] = if self.diagonal_only {
                    0.0
                } else {
                    -resp * d_l21
                };
                gc[5] = -resp * d_l22 * sigmoid(c[5]);
            }
        }
        nll
    }
}

impl<T: Real> CustomOp<T> for GmmNll {
    fn name(&self) -> &'static str {
        "gmm_nll"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let raw = inputs[0];
        let cols = raw.cols();
        let scale = grad_output.data()[0].to_f64c() / self.targets.len() as f64;
        let mut row = vec![0.0; cols];
        let mut row_grad = vec![0.0; cols];
        let mut out = Tensor::zeros(raw.shape());
        for (r, x) in self.targets.iter().enumerate() {
            for (d, s) in row.iter_mut().zip(raw.row(r)) {
                *d = s.to_f64c();
            }
            self.row(&row, *x, Some(&mut row_grad));
            for (o, g) in out.data_mut()[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(&row_grad)
            {
                *o = T::from_f64c(g * scale);
            }
        }
        vec![Some(out)]
    }
}

/// Mean negative log-likelihood of `targets` under the mixtures decoded
/// row-wise from `raw` (`[N, 6K]`), as a differentiable scalar.
pub fn gmm_nll<T: Real>(
    g: &mut Graph<T>,
    raw: Var,
    targets: &[[f64; 2]],
    sigma_min: f64,
    diagonal_only: bool,
) -> Result<Var, NumericError> {
    let v = g.value(raw);
    if v.shape().len() != 2
        || !v.cols().is_multiple_of(RAW_PER_COMPONENT)
        || v.rows() != targets.len()
        || targets.is_empty()
    {
        return Err(NumericError::Shape(format!(
            "gmm_nll raw {:?} for {} targets",
            v.shape(),
            targets.len()
        )));
    }
    let op = GmmNll {
        targets: targets.to_vec(),
        sigma_min,
        diagonal_only,
    };
    let mut row = vec![0.0; v.cols()];
    let mut total = 0.0;
    for (r, x) in targets.iter().enumerate() {
        for (d, s) in row.iter_mut().zip(v.row(r)) {
            *d = s.to_f64c();
        }
        total += op.row(&row, *x, None);
    }
    let value = Tensor::scalar(T::from_f64c(total / targets.len() as f64));
    g.custom(&[raw], value, Box::new(op))
}
