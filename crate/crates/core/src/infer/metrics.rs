use serde::{Deserialize, Serialize};

use super::InferError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub epe: f64,
    pub pck: f64,
}

/// Mean endpoint error and the fraction of errors strictly below `alpha`.
pub fn metrics(
    pred: &[[f64; 2]],
    truth: &[[f64; 2]],
    alpha: f64,
) -> Result<FlowMetrics, InferError> {
    if pred.len() != truth.len() {
        return Err(InferError::Length(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(InferError::Empty);
    }
    let errs: Vec<f64> = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p[0] - t[0]).hypot(p[1] - t[1]))
        .collect();
    let n = errs.len() as f64;
    Ok(FlowMetrics {
        epe: errs.iter().sum::<f64>() / n,
        pck: errs.iter().filter(|&&e| e < alpha).count() as f64 / n,
    })
}

/// Mean IoU over paired masks; two empty masks score 1.
pub fn miou(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<f64, InferError> {
    if pred.len() != truth.len() {
        return Err(InferError::Length(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(InferError::Empty);
    }
    let mut total = 0.0;
    for (a, b) in pred.iter().zip(truth) {
        if a.len() != b.len() {
            return Err(InferError::Length(a.len(), b.len()));
        }
        let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
        total += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
    }
    Ok(total / pred.len() as f64)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, InferError> {
    if x.len() != y.len() {
        return Err(InferError::Length(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(InferError::TooFewPairs {
            need: 2,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(InferError::ZeroVariance);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveBin {
    pub x_mean: f64,
    pub y_mean: f64,
    pub count: usize,
}

/// Bins pairs by `x` into `bins` equal-count groups and averages each.
pub fn binned_curve(x: &[f64], y: &[f64], bins: usize) -> Vec<CurveBin> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let n = idx.len();
    (0..bins)
        .filter_map(|b| {
            let chunk = &idx[b * n / bins..(b + 1) * n / bins];
            if chunk.is_empty() {
                return None;
            }
            let c = chunk.len() as f64;
            Some(CurveBin {
                x_mean: chunk.iter().map(|&i| x[i]).sum::<f64>() / c,
                y_mean: chunk.iter().map(|&i| y[i]).sum::<f64>() / c,
                count: chunk.len(),
            })
        })
        .collect()
}
