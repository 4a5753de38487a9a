//! Synthetic articulated scenes whose conditional flow distributions are exact
//! Gaussian mixtures.
//!
//! A scene is a handful of convex parts on a static background plus a list of
//! global motion modes. Each mode moves every part rigidly; the background never
//! moves. Conditioning on pokes is exact Bayesian inference over the mode index.

mod dataset;
mod templates;

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::{Chol2, Gmm2};
use crate::layout::Poke;

pub use dataset::{derive_seed, Dataset, DatasetHeader, SceneRecord};
pub use templates::{gen_scene, GenOptions};

/// Raster channels: one per part slot, then texture.
pub const MAX_PARTS: usize = 5;
pub const CHANNELS: usize = MAX_PARTS + 1;
pub const DEFAULT_SIGMA_OBS: f64 = 0.01;
pub const MAX_FLOW: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error("oracle needs positive observation noise")]
    ZeroNoise,
    #[error("empty track list")]
    NoTracks,
    #[error("dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    Hinge,
    Drawer,
    Stack,
    Multi,
}

impl Template {
    pub const ALL: [Template; 4] = [
        Template::Hinge,
        Template::Drawer,
        Template::Stack,
        Template::Multi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Template::Hinge => "hinge",
            Template::Drawer => "drawer",
            Template::Stack => "stack",
            Template::Multi => "multi",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

/// Rotation by `theta` about `pivot`, then translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidMotion {
    pub theta: f64,
    pub pivot: [f64; 2],
    pub translation: [f64; 2],
}

impl RigidMotion {
    pub const IDENTITY: RigidMotion = RigidMotion {
        theta: 0.0,
        pivot: [0.0, 0.0],
        translation: [0.0, 0.0],
    };

    pub fn translate(t: [f64; 2]) -> Self {
        Self {
            translation: t,
            ..Self::IDENTITY
        }
    }

    pub fn rotate(theta: f64, pivot: [f64; 2]) -> Self {
        Self {
            theta,
            pivot,
            translation: [0.0, 0.0],
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        let d = [p[0] - self.pivot[0], p[1] - self.pivot[1]];
        [
            self.pivot[0] + c * d[0] - s * d[1] + self.translation[0],
            self.pivot[1] + s * d[0] + c * d[1] + self.translation[1],
        ]
    }

    /// Displacement `M(p) - p`.
    pub fn flow(&self, p: [f64; 2]) -> [f64; 2] {
        let q = self.apply(p);
        [q[0] - p[0], q[1] - p[1]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub weight: f64,
    /// One motion per part.
    pub motions: Vec<RigidMotion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub template: Template,
    /// Convex polygons with disjoint interiors. Part `j` is drawn in raster channel `j`.
    pub parts: Vec<Vec<[f64; 2]>>,
    pub modes: Vec<Mode>,
    pub sigma_obs: f64,
    pub render_seed: u64,
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Inside or on the boundary of a convex polygon of either orientation.
pub fn polygon_contains(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let n = poly.len();
    let (mut pos, mut neg) = (false, false);
    for i in 0..n {
        let c = cross(poly[i], poly[(i + 1) % n], p);
        pos |= c > 0.0;
        neg |= c < 0.0;
        if pos && neg {
            return false;
        }
    }
    true
}

pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| cross([0.0, 0.0], poly[i], poly[(i + 1) % n]))
        .sum::<f64>()
        .abs()
        / 2.0
}

pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<[f64; 2]> {
    vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.parts.is_empty() || self.parts.len() > MAX_PARTS {
            return bad(format!("{} parts", self.parts.len()));
        }
        for (j, poly) in self.parts.iter().enumerate() {
            if poly.len() < 3 || polygon_area(poly) <= 0.0 {
                return bad(format!("part {j} is degenerate"));
            }
            if poly.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return bad(format!("part {j} leaves the unit square"));
            }
        }
        if self.modes.is_empty() {
            return bad("no modes".into());
        }
        let total: f64 = self.modes.iter().map(|m| m.weight).sum();
        if (total - 1.0).abs() > 1e-9 || self.modes.iter().any(|m| !(m.weight > 0.0)) {
            return bad(format!("mode weights sum to {total}"));
        }
        if !(self.sigma_obs >= 0.0) {
            return bad("negative sigma_obs".into());
        }
        for (k, m) in self.modes.iter().enumerate() {
            if m.motions.len() != self.parts.len() {
                return bad(format!("mode {k} has {} motions", m.motions.len()));
            }
            // Displacement is affine in p, so its norm peaks at a vertex.
            for (poly, mo) in self.parts.iter().zip(&m.motions) {
                for &v in poly {
                    let f = mo.flow(v);
                    if f[0].hypot(f[1]) > MAX_FLOW {
                        return bad(format!("mode {k} flow exceeds {MAX_FLOW}"));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn part_at(&self, p: [f64; 2]) -> Option<usize> {
        self.parts.iter().position(|poly| polygon_contains(poly, p))
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn prior(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.weight).collect()
    }

    /// Noise-free flow at `p` under mode `k`.
    pub fn mode_flow(&self, k: usize, p: [f64; 2]) -> [f64; 2] {
        match self.part_at(p) {
            Some(j) => self.modes[k].motions[j].flow(p),
            None => [0.0, 0.0],
        }
    }

    fn log_posterior(&self, pokes: &[Poke]) -> Result<Vec<f64>, SynthError> {
        if pokes.is_empty() {
            return Ok(self.modes.iter().map(|m| m.weight.ln()).collect());
        }
        if !(self.sigma_obs > 0.0) {
            return Err(SynthError::ZeroNoise);
        }
        let inv = 1.0 / (2.0 * self.sigma_obs * self.sigma_obs);
        let parts: Vec<Option<usize>> = pokes.iter().map(|p| self.part_at(p.pos)).collect();
        Ok(self
            .modes
            .iter()
            .map(|m| {
                let mut lp = m.weight.ln();
                for (poke, part) in pokes.iter().zip(&parts) {
                    let mu = part.map_or([0.0, 0.0], |j| m.motions[j].flow(poke.pos));
                    let d = [poke.flow[0] - mu[0], poke.flow[1] - mu[1]];
                    lp -= (d[0] * d[0] + d[1] * d[1]) * inv;
                }
                lp
            })
            .collect())
    }

    /// Posterior over modes given pokes. The shared Gaussian normaliser cancels.
    pub fn gt_posterior(&self, pokes: &[Poke]) -> Result<Vec<f64>, SynthError> {
        let lp = self.log_posterior(pokes)?;
        let max = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(SynthError::Invalid("posterior vanished".into()));
        }
        let w: Vec<f64> = lp.iter().map(|l| (l - max).exp()).collect();
        let s: f64 = w.iter().sum();
        Ok(w.into_iter().map(|x| x / s).collect())
    }

    /// The exact conditional flow distribution at `q`, one component per mode.
    pub fn gt_conditional(&self, pokes: &[Poke], q: [f64; 2]) -> Result<Gmm2, SynthError> {
        self.conditional_with(&self.gt_posterior(pokes)?, q)
    }

    pub fn conditional_with(&self, posterior: &[f64], q: [f64; 2]) -> Result<Gmm2, SynthError> {
        if !(self.sigma_obs > 0.0) {
            return Err(SynthError::ZeroNoise);
        }
        let means = (0..self.num_modes())
            .map(|k| self.mode_flow(k, q))
            .collect();
        let chol = vec![Chol2::isotropic(self.sigma_obs); self.num_modes()];
        Gmm2::new(posterior.to_vec(), means, chol).map_err(|e| SynthError::Invalid(e.to_string()))
    }

    pub fn sample_episode(&self, rng: &mut impl Rng, n_tracks: usize) -> Episode {
        let pick =
            WeightedIndex::new(self.modes.iter().map(|m| m.weight)).expect("validated weights");
        let mode = pick.sample(rng);
        let noise = Normal::new(0.0, self.sigma_obs).expect("finite sigma");
        let tracks = (0..n_tracks)
            .map(|_| {
                let pos = [rng.gen::<f64>(), rng.gen::<f64>()];
                let f = self.mode_flow(mode, pos);
                let flow = [f[0] + noise.sample(rng), f[1] + noise.sample(rng)];
                Poke { pos, flow }
            })
            .collect();
        Episode {
            mode,
            tracks,
            static_flag: true,
        }
    }

    /// Multi-channel part-identity raster, values in `[0, 1]`.
    pub fn render(&self, size: usize) -> SceneRaster {
        let mut data = vec![0f32; CHANNELS * size * size];
        const SS: usize = 4;
        let mut cover = vec![0f64; MAX_PARTS * size * size];
        for y in 0..size {
            for x in 0..size {
                for sy in 0..SS {
                    for sx in 0..SS {
                        let p = [
                            (x as f64 + (sx as f64 + 0.5) / SS as f64) / size as f64,
                            (y as f64 + (sy as f64 + 0.5) / SS as f64) / size as f64,
                        ];
                        if let Some(j) = self.part_at(p) {
                            cover[(j * size + y) * size + x] += 1.0 / (SS * SS) as f64;
                        }
                    }
                }
            }
        }
        for j in 0..MAX_PARTS {
            for y in 0..size {
                for x in 0..size {
                    let mut acc = 0.0;
                    let mut n = 0.0;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                            if yy >= 0 && xx >= 0 && (yy as usize) < size && (xx as usize) < size {
                                acc += cover[(j * size + yy as usize) * size + xx as usize];
                                n += 1.0;
                            }
                        }
                    }
                    data[(j * size + y) * size + x] = (acc / n) as f32;
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.render_seed);
        let waves: Vec<[f64; 4]> = (0..4)
            .map(|_| {
                [
                    rng.gen_range(1.0..5.0),
                    rng.gen_range(1.0..5.0),
                    rng.gen_range(0.0..2.0 * PI),
                    rng.gen_range(0.5..1.0),
                ]
            })
            .collect();
        let norm: f64 = waves.iter().map(|w| w[3]).sum();
        for y in 0..size {
            for x in 0..size {
                let p = [
                    (x as f64 + 0.5) / size as f64,
                    (y as f64 + 0.5) / size as f64,
                ];
                let v: f64 = waves
                    .iter()
                    .map(|w| w[3] * (2.0 * PI * (w[0] * p[0] + w[1] * p[1]) + w[2]).cos())
                    .sum::<f64>();
                data[(MAX_PARTS * size + y) * size + x] = (0.5 + 0.5 * v / norm) as f32;
            }
        }
        SceneRaster {
            channels: CHANNELS,
            size,
            data,
        }
    }
}

/// `C x S x S`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRaster {
    pub channels: usize,
    pub size: usize,
    pub data: Vec<f32>,
}

impl SceneRaster {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.size + y) * self.size + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub mode: usize,
    pub tracks: Vec<Poke>,
    pub static_flag: bool,
}

/// True when at least 40% of tracks move by at most 3 px on a `frame_side_px` frame.
pub fn static_flag_heuristic(tracks: &[Poke], frame_side_px: usize) -> Result<bool, SynthError> {
    if tracks.is_empty() {
        return Err(SynthError::NoTracks);
    }
    let still = tracks
        .iter()
        .filter(|t| t.flow[0].hypot(t.flow[1]) * frame_side_px as f64 <= 3.0)
        .count();
    Ok(still * 5 >= tracks.len() * 2)
}

#[cfg(test)]
mod tests;
