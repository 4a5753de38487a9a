//! Downstream procedures on a trained model: pointwise prediction, dense
//! flow, autoregressive sampling and KL-based moving-part segmentation.

mod metrics;
mod reports;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::{gmm_kl_matched, Gmm2, GmmError};
use crate::layout::{LayoutError, Poke};
use crate::model::{
    Bound, DecoderInput, Forward, ImageCache, Incremental, ModelError, ModelParams,
};
use crate::numeric::{Graph, Tensor};
use crate::synth::{SceneRaster, SynthError};

pub use metrics::{binned_curve, metrics, miou, pearson, CurveBin, FlowMetrics};
pub use reports::{
    calibrate_threshold, calibration_report, eval_items, inner_cells, merged_modes, mode_report,
    oracle_heat, predict_items, probe_for, segmentation_cases, segmentation_eval,
    segmentation_heats, CalibrationBlock, CalibrationReport, EvalItem, ModeReport, SegCase,
    SegmentationEval,
};

/// Fallback when a checkpoint carries no calibrated threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_GRID: usize = 32;
/// PCK radius in normalized units: one pixel of a 64² frame.
pub const DEFAULT_ALPHA: f64 = 1.0 / 64.0;

#[derive(Debug, Error)]
pub enum InferError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Input(String),
    #[error("context budget {budget} exceeded: {needed} tokens")]
    Context { needed: usize, budget: usize },
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("zero variance")]
    ZeroVariance,
    #[error("need at least {need} pairs, got {got}")]
    TooFewPairs { need: usize, got: usize },
    #[error("empty eval set")]
    Empty,
}

impl From<LayoutError> for InferError {
    fn from(e: LayoutError) -> Self {
        InferError::Model(ModelError::Layout(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Mean,
    ArSample,
}

/// `grid × grid` flow vectors, row-major with y outer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseFlowField {
    pub grid: usize,
    pub flows: Vec<[f64; 2]>,
    pub kind: FieldKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DenseFlowField {
    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        self.flows[y * self.grid + x]
    }

    /// Little-endian f32 `dx, dy` pairs in grid order.
    pub fn to_f32_bytes(&self) -> Vec<u8> {
        self.flows
            .iter()
            .flatten()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub grid: usize,
    pub heat: Vec<f64>,
    pub mask: Vec<bool>,
    pub threshold: f64,
}

/// Cell centres of an `r × r` grid over the unit square, y outer.
pub fn grid_points(r: usize) -> Vec<[f64; 2]> {
    let s = r as f64;
    (0..r * r)
        .map(|i| [((i % r) as f64 + 0.5) / s, ((i / r) as f64 + 0.5) / s])
        .collect()
}

fn decode_rows(raw: &Tensor<f32>, params: &ModelParams) -> Result<Vec<Gmm2>, InferError> {
    let cfg = &params.config;
    (0..raw.rows())
        .map(|r| {
            let row: Vec<f64> = raw.row(r).iter().map(|&v| v as f64).collect();
            Ok(Gmm2::from_raw(&row, cfg.sigma_min, cfg.diagonal_only)?)
        })
        .collect()
}

/// One scene prepared for repeated queries: image tokens are encoded once.
pub struct Scene<'a> {
    pub params: &'a ModelParams,
    pub image: ImageCache,
    pub static_flag: bool,
}

impl<'a> Scene<'a> {
    pub fn new(params: &'a ModelParams, raster: &SceneRaster) -> Result<Self, InferError> {
        Ok(Self {
            params,
            image: ImageCache::encode(params, raster)?,
            static_flag: true,
        })
    }

    pub fn with_image(params: &'a ModelParams, image: ImageCache) -> Self {
        Self {
            params,
            image,
            static_flag: true,
        }
    }

    /// Raw head rows for all queries conditioned on all pokes, as one pass.
    pub fn predict_raw(
        &self,
        pokes: &[Poke],
        queries: &[[f64; 2]],
    ) -> Result<Tensor<f32>, InferError> {
        if queries.is_empty() {
            return Ok(Tensor::zeros(&[0, self.params.config.raw_len()]));
        }
        let cfg = &self.params.config;
        let mut g = Graph::<f32>::new();
        let p = Bound::bind(&mut g, self.params, false);
        let img = g.constant(self.image.tokens.clone());
        let input = DecoderInput::single(pokes, queries, self.static_flag);
        let raw = Forward::new(&mut g, &p, cfg).decode(img, &[input])?;
        Ok(g.value(raw).clone())
    }

    pub fn predict(&self, pokes: &[Poke], queries: &[[f64; 2]]) -> Result<Vec<Gmm2>, InferError> {
        decode_rows(&self.predict_raw(pokes, queries)?, self.params)
    }

    pub fn dense_mean(&self, pokes: &[Poke], r: usize) -> Result<DenseFlowField, InferError> {
        check_grid(r)?;
        let flows = self
            .predict(pokes, &grid_points(r))?
            .iter()
            .map(Gmm2::mean)
            .collect();
        Ok(DenseFlowField {
            grid: r,
            flows,
            kind: FieldKind::Mean,
            seed: None,
        })
    }

    /// Visits cells in a seeded random order, samples each from the current
    /// conditional and adds the sample to the pokes.
    pub fn ar_sample(
        &self,
        pokes: &[Poke],
        r: usize,
        seed: u64,
    ) -> Result<DenseFlowField, InferError> {
        check_grid(r)?;
        let budget = self.params.config.max_context;
        let needed = r * r + pokes.len();
        if needed > budget {
            return Err(InferError::Context { needed, budget });
        }
        let cells = grid_points(r);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..cells.len()).collect();
        order.shuffle(&mut rng);
        let mut inc = Incremental::new(self.params, &self.image, self.static_flag)?;
        let mut flows = vec![[0.0; 2]; cells.len()];
        let mut pending: Vec<Poke> = pokes.to_vec();
        for &c in &order {
            let raw = inc.push_and_query(&pending, &[cells[c]])?;
            let gmm = decode_rows(&raw, self.params)?.pop().expect("one row");
            let f = gmm.sample(&mut rng, 1)[0];
            flows[c] = f;
            pending = vec![Poke {
                pos: cells[c],
                flow: f,
            }];
        }
        Ok(DenseFlowField {
            grid: r,
            flows,
            kind: FieldKind::ArSample,
            seed: Some(seed),
        })
    }

    /// Per-cell matched-bound KL between the prediction given `poke` and the
    /// unconditional one.
    pub fn heat(&self, poke: Poke, r: usize) -> Result<Vec<f64>, InferError> {
        check_grid(r)?;
        let cells = grid_points(r);
        let cond = self.predict(&[poke], &cells)?;
        let uncond = self.predict(&[], &cells)?;
        Ok(cond
            .iter()
            .zip(&uncond)
            .map(|(c, u)| gmm_kl_matched(c, u))
            .collect())
    }

    pub fn segment(
        &self,
        poke: Poke,
        r: usize,
        threshold: f64,
    ) -> Result<SegmentationResult, InferError> {
        if threshold.is_nan() {
            return Err(InferError::Input("threshold is NaN".into()));
        }
        let heat = self.heat(poke, r)?;
        let mask = heat.iter().map(|&h| h > threshold).collect();
        Ok(SegmentationResult {
            grid: r,
            heat,
            mask,
            threshold,
        })
    }
}

fn check_grid(r: usize) -> Result<(), InferError> {
    if r == 0 {
        return Err(InferError::Input("grid must be positive".into()));
    }
    Ok(())
}

pub fn predict_pointwise(
    params: &ModelParams,
    raster: &SceneRaster,
    pokes: &[Poke],
    queries: &[[f64; 2]],
) -> Result<Vec<Gmm2>, InferError> {
    Scene::new(params, raster)?.predict(pokes, queries)
}

pub fn dense_mean_flow(
    params: &ModelParams,
    raster: &SceneRaster,
    pokes: &[Poke],
    r: usize,
) -> Result<DenseFlowField, InferError> {
    Scene::new(params, raster)?.dense_mean(pokes, r)
}

pub fn ar_sample_dense(
    params: &ModelParams,
    raster: &SceneRaster,
    pokes: &[Poke],
    r: usize,
    seed: u64,
) -> Result<DenseFlowField, InferError> {
    Scene::new(params, raster)?.ar_sample(pokes, r, seed)
}

pub fn segment_moving_part(
    params: &ModelParams,
    raster: &SceneRaster,
    poke: Poke,
    r: usize,
    threshold: f64,
) -> Result<SegmentationResult, InferError> {
    Scene::new(params, raster)?.segment(poke, r, threshold)
}
