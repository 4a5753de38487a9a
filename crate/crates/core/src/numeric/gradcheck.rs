use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, NumericError, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar computation with central differences.
///
/// `f` rebuilds the computation on a fresh graph from the given parameter vars.
/// At most `coords_per_param` coordinates of each parameter are perturbed
/// (all of them when it is `None`). The error of one coordinate is
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F, R>(
    f: F,
    params: &[Tensor<f64>],
    epsilon: f64,
    coords_per_param: Option<usize>,
    rng: &mut R,
) -> Result<GradCheckReport, NumericError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericError>,
    R: Rng,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64, NumericError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for (pi, &v) in vars.iter().enumerate() {
        let n = params[pi].len();
        let analytic = grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        if !analytic.is_finite() {
            return Err(NumericError::NonFinite("analytic gradient"));
        }
        let coords: Vec<usize> = match coords_per_param {
            Some(c) if c < n => sample(rng, n, c).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + epsilon;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - epsilon;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            if !numeric.is_finite() {
                return Err(NumericError::NonFinite("numeric gradient"));
            }
            let rel = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked,
    })
}
