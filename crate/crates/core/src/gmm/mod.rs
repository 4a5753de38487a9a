//! Full-covariance 2D Gaussian mixtures: the model's output distribution and
//! the divergence math used for moving-part segmentation.
//!
//! Every component carries a lower-triangular factor `L` with
//! `Σ = L·Lᵀ`; the JSON wire form carries `Σ` itself.

mod loss;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

pub use loss::{gmm_nll, RAW_PER_COMPONENT};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum GmmError {
    #[error("raw head has {0} values, expected a multiple of 6")]
    RawLength(usize),
    #[error("non-finite raw head value")]
    NonFiniteRaw,
    #[error("invalid mixture: {0}")]
    Invalid(String),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
}

/// Lower-triangular 2x2 factor `[[l11, 0], [l21, l22]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Chol2 {
    pub l11: f64,
    pub l21: f64,
    pub l22: f64,
}

impl Chol2 {
    pub fn diagonal(sx: f64, sy: f64) -> Self {
        Self {
            l11: sx,
            l21: 0.0,
            l22: sy,
        }
    }

    pub fn isotropic(s: f64) -> Self {
        Self::diagonal(s, s)
    }

    pub fn cov(&self) -> [[f64; 2]; 2] {
        let c00 = self.l11 * self.l11;
        let c01 = self.l11 * self.l21;
        let c11 = self.l21 * self.l21 + self.l22 * self.l22;
        [[c00, c01], [c01, c11]]
    }

    pub fn from_cov(c: [[f64; 2]; 2]) -> Result<Self, GmmError> {
        if !(c[0][0] > 0.0) {
            return Err(GmmError::NotPositiveDefinite);
        }
        let l11 = c[0][0].sqrt();
        let l21 = c[0][1] / l11;
        let rest = c[1][1] - l21 * l21;
        if !(rest > 0.0) {
            return Err(GmmError::NotPositiveDefinite);
        }
        Ok(Self {
            l11,
            l21,
            l22: rest.sqrt(),
        })
    }

    /// `L⁻¹·d` by forward substitution.
    #[inline]
    pub fn solve(&self, d: [f64; 2]) -> [f64; 2] {
        let z0 = d[0] / self.l11;
        [z0, (d[1] - self.l21 * z0) / self.l22]
    }

    #[inline]
    pub fn apply(&self, z: [f64; 2]) -> [f64; 2] {
        [self.l11 * z[0], self.l21 * z[0] + self.l22 * z[1]]
    }

    fn scaled(&self, c: f64) -> Self {
        Self {
            l11: self.l11 * c,
            l21: self.l21 * c,
            l22: self.l22 * c,
        }
    }
}

/// Log-density of `N(mean, L·Lᵀ)` at `x`.
#[inline]
pub fn gaussian_logpdf(mean: [f64; 2], chol: &Chol2, x: [f64; 2]) -> f64 {
    let z = chol.solve([x[0] - mean[0], x[1] - mean[1]]);
    -(2.0 * PI).ln() - (chol.l11 * chol.l22).ln() - 0.5 * (z[0] * z[0] + z[1] * z[1])
}

/// A K-component mixture of 2D Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct Gmm2 {
    weights: Vec<f64>,
    means: Vec<[f64; 2]>,
    chol: Vec<Chol2>,
}

/// One mixture component viewed as a mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mode {
    pub index: usize,
    pub mean: [f64; 2],
    pub weight: f64,
}

/// A single Gaussian given by mean and covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian2 {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl Gmm2 {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<[f64; 2]>,
        chol: Vec<Chol2>,
    ) -> Result<Self, GmmError> {
        let k = weights.len();
        if k == 0 || means.len() != k || chol.len() != k {
            return Err(GmmError::Invalid(format!(
                "{} weights, {} means, {} factors",
                k,
                means.len(),
                chol.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(GmmError::Invalid(format!("weights sum to {total}")));
        }
        if chol
            .iter()
            .any(|l| !(l.l11 > 0.0 && l.l22 > 0.0 && l.l21.is_finite()))
            || means.iter().flatten().any(|m| !m.is_finite())
        {
            return Err(GmmError::Invalid(
                "non-positive factor diagonal or non-finite mean".into(),
            ));
        }
        Ok(Self {
            weights,
            means,
            chol,
        })
    }

    pub fn single(mean: [f64; 2], chol: Chol2) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![mean],
            chol: vec![chol],
        }
    }

    /// Decodes a raw head of `6K` values laid out per component as
    /// `[logit, mean_x, mean_y, l11_raw, l21, l22_raw]`.
    ///
    /// Weights are the softmax of the logits; the factor diagonal is
    /// `sigma_min + softplus(raw)`; the off-diagonal passes through unless
    /// `diagonal_only` zeroes it.
    pub fn from_raw(raw: &[f64], sigma_min: f64, diagonal_only: bool) -> Result<Self, GmmError> {
        if raw.is_empty() || !raw.len().is_multiple_of(RAW_PER_COMPONENT) {
            return Err(GmmError::RawLength(raw.len()));
        }
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(GmmError::NonFiniteRaw);
        }
        let comps: Vec<&[f64]> = raw.chunks(RAW_PER_COMPONENT).collect();
        let max = comps.iter().map(|c| c[0]).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = comps.iter().map(|c| (c[0] - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let weights = exps.iter().map(|e| e / total).collect();
        let means = comps.iter().map(|c| [c[1], c[2]]).collect();
        let chol = comps
            .iter()
            .map(|c| Chol2 {
                l11: sigma_min + crate::numeric::softplus(c[3]),
                l21: if diagonal_only { 0.0 } else { c[4] },
                l22: sigma_min + crate::numeric::softplus(c[5]),
            })
            .collect();
        Ok(Self {
            weights,
            means,
            chol,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[[f64; 2]] {
        &self.means
    }

    pub fn factors(&self) -> &[Chol2] {
        &self.chol
    }

    pub fn component(&self, n: usize) -> Gaussian2 {
        Gaussian2 {
            mean: self.means[n],
            cov: self.chol[n].cov(),
        }
    }

    pub fn logpdf(&self, x: [f64; 2]) -> f64 {
        let terms: Vec<f64> = (0..self.k())
            .map(|n| self.weights[n].ln() + gaussian_logpdf(self.means[n], &self.chol[n], x))
            .collect();
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<[f64; 2]> {
        let pick = WeightedIndex::new(&self.weights).expect("valid weights");
        (0..n)
            .map(|_| {
                let c = pick.sample(rng);
                let z = [
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                ];
                let d = self.chol[c].apply(z);
                [self.means[c][0] + d[0], self.means[c][1] + d[1]]
            })
            .collect()
    }

    pub fn mean(&self) -> [f64; 2] {
        let mut m = [0.0; 2];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m[0] += w * mu[0];
            m[1] += w * mu[1];
        }
        m
    }

    /// Total covariance: within-component plus between-component spread.
    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let m = self.mean();
        let mut c = [[0.0; 2]; 2];
        for ((w, mu), l) in self.weights.iter().zip(&self.means).zip(&self.chol) {
            let s = l.cov();
            for i in 0..2 {
                for j in 0..2 {
                    c[i][j] += w * (s[i][j] + mu[i] * mu[j]);
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] -= m[i] * m[j];
            }
        }
        c
    }

    /// `sqrt(trace(Cov))`, the scalar spread of the mixture.
    pub fn std(&self) -> f64 {
        let c = self.covariance();
        (c[0][0] + c[1][1]).max(0.0).sqrt()
    }

    /// Components as modes, heaviest first; ties keep index order.
    pub fn modes(&self) -> Vec<Mode> {
        let mut modes: Vec<Mode> = (0..self.k())
            .map(|index| Mode {
                index,
                mean: self.means[index],
                weight: self.weights[index],
            })
            .collect();
        modes.sort_by(|a, b| b.weight.total_cmp(&a.weight));
        modes
    }

    /// The same distribution with components of identical mean and factor
    /// folded together, weights summed; first occurrence keeps its place.
    pub fn merge_duplicates(&self) -> Self {
        let mut out = Self {
            weights: Vec::new(),
            means: Vec::new(),
            chol: Vec::new(),
        };
        for k in 0..self.k() {
            match (0..out.k())
                .find(|&j| out.means[j] == self.means[k] && out.chol[j] == self.chol[k])
            {
                Some(j) => out.weights[j] += self.weights[k],
                None => {
                    out.weights.push(self.weights[k]);
                    out.means.push(self.means[k]);
                    out.chol.push(self.chol[k]);
                }
            }
        }
        out
    }

    /// Multiplies every mean and factor by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| [m[0] * c, m[1] * c]).collect(),
            chol: self.chol.iter().map(|l| l.scaled(c)).collect(),
        }
    }
}

fn det2(c: &[[f64; 2]; 2]) -> f64 {
    c[0][0] * c[1][1] - c[0][1] * c[1][0]
}

/// Closed-form `KL(a ‖ b)` between two 2D Gaussians.
pub fn gaussian_kl(a: &Gaussian2, b: &Gaussian2) -> Result<f64, GmmError> {
    let det_a = det2(&a.cov);
    let det_b = det2(&b.cov);
    if !(det_b > 0.0 && b.cov[0][0] > 0.0) || !(det_a > 0.0 && a.cov[0][0] > 0.0) {
        return Err(GmmError::NotPositiveDefinite);
    }
    let inv_b = [
        [b.cov[1][1] / det_b, -b.cov[0][1] / det_b],
        [-b.cov[1][0] / det_b, b.cov[0][0] / det_b],
    ];
    let mut trace = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            trace += inv_b[i][j] * a.cov[j][i];
        }
    }
    let d = [b.mean[0] - a.mean[0], b.mean[1] - a.mean[1]];
    let quad = d[0] * (inv_b[0][0] * d[0] + inv_b[0][1] * d[1])
        + d[1] * (inv_b[1][0] * d[0] + inv_b[1][1] * d[1]);
    Ok(0.5 * (trace + quad - 2.0 + (det_b / det_a).ln()))
}

/// Matched-bound approximation of `KL(f ‖ g)` between mixtures, clamped at zero.
///
/// Each component of `f` is paired with the component of `g` minimising
/// `KL(f_n ‖ g_m) - log π_g(m)` (lowest index on ties).
pub fn gmm_kl_matched(f: &Gmm2, g: &Gmm2) -> f64 {
    let g_comps: Vec<Gaussian2> = (0..g.k()).map(|m| g.component(m)).collect();
    let mut total = 0.0;
    for n in 0..f.k() {
        let pf = f.weights[n];
        if pf <= 0.0 {
            continue;
        }
        let fc = f.component(n);
        let mut best: Option<(f64, f64, usize)> = None;
        for (m, gc) in g_comps.iter().enumerate() {
            let pg = g.weights[m];
            if pg <= 0.0 {
                continue;
            }
            let kl = gaussian_kl(&fc, gc).expect("mixture components are positive definite");
            let cost = kl - pg.ln();
            if best.is_none_or(|(c, _, _)| cost < c) {
                best = Some((cost, kl, m));
            }
        }
        if let Some((_, kl, m)) = best {
            total += pf * (kl + pf.ln() - g.weights[m].ln());
        }
    }
    total.max(0.0)
}

/// JSON wire form: covariances rather than factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gmm2Json {
    pub weights: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub covs: Vec<[[f64; 2]; 2]>,
}

impl From<&Gmm2> for Gmm2Json {
    fn from(g: &Gmm2) -> Self {
        Self {
            weights: g.weights.clone(),
            means: g.means.clone(),
            covs: g.chol.iter().map(Chol2::cov).collect(),
        }
    }
}

impl TryFrom<Gmm2Json> for Gmm2 {
    type Error = GmmError;

    fn try_from(j: Gmm2Json) -> Result<Self, GmmError> {
        let chol = j
            .covs
            .into_iter()
            .map(Chol2::from_cov)
            .collect::<Result<Vec<_>, _>>()?;
        Gmm2::new(j.weights, j.means, chol)
    }
}

impl Serialize for Gmm2 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        Gmm2Json::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Gmm2 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Gmm2::try_from(Gmm2Json::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}
