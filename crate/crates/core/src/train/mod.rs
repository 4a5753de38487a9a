//! NLL training over teacher-forced nested poke sets.

mod optim;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::gmm_nll;
use crate::layout::{sample_nested_sets, LayoutError, NestedSets};
use crate::model::{
    Bound, Checkpoint, CheckpointMeta, DecoderInput, Forward, ModelConfig, ModelError, ModelParams,
};
use crate::numeric::{Graph, NumericError, Real, Var};
use crate::synth::{derive_seed, Dataset, SceneRecord, SynthError};

pub use optim::{lr_at, AdamW, OptimState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("non-finite loss")]
    NonFinite,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<NumericError> for TrainError {
    fn from(e: NumericError) -> Self {
        TrainError::Model(ModelError::Numeric(e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub np_max: usize,
    pub nq: usize,
    pub steps: u64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub eval_every: u64,
    /// Tracked points sampled per training episode.
    pub n_tracks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            np_max: 16,
            nq: 8,
            steps: 20_000,
            peak_lr: 3e-4,
            warmup_steps: 500,
            lr_schedule: LrSchedule::Cosine,
            weight_decay: 0.01,
            betas: (0.9, 0.99),
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            seed: 0,
            eval_every: 500,
            n_tracks: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.steps > 0 && self.warmup_steps >= self.steps {
            return bad("warmup_steps must be below steps");
        }
        if self.np_max == 0 || self.nq == 0 || self.batch_size == 0 {
            return bad("np_max, nq and batch_size must be positive");
        }
        if self.n_tracks < self.np_max + self.nq {
            return bad("n_tracks must cover np_max + nq");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        Ok(())
    }
}

/// Combined config file accepted by `fpt train --config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// One training example: a scene with its nested sets.
pub struct Example<'a> {
    pub scene: &'a SceneRecord,
    pub sets: NestedSets,
    pub static_flag: bool,
}

/// Mean NLL over all (set, query) pairs of every scene, then over scenes.
pub fn batch_loss<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &[Example],
) -> Result<Var, TrainError> {
    let rasters: Vec<_> = batch.iter().map(|e| &e.scene.raster).collect();
    let inputs: Vec<DecoderInput> = batch
        .iter()
        .map(|e| DecoderInput::nested(&e.sets, e.static_flag))
        .collect();
    let mut f = Forward::new(g, p, cfg);
    let img = f.encode(&rasters)?;
    let raw = f.decode(img, &inputs)?;
    // Equal per-scene query counts make the flat mean equal the mean of scene means.
    let counts: Vec<usize> = inputs.iter().map(DecoderInput::num_queries).collect();
    if counts.windows(2).any(|w| w[0] != w[1]) {
        return Err(TrainError::Config(
            "scenes in a batch need equal query counts".into(),
        ));
    }
    let targets: Vec<[f64; 2]> = batch
        .iter()
        .flat_map(|e| e.sets.flat_targets())
        .map(|t| t.flow)
        .collect();
    Ok(gmm_nll(g, raw, &targets, cfg.sigma_min, cfg.diagonal_only)?)
}

/// Draws the examples of training step `step`: scenes uniformly with replacement,
/// fresh episodes from each scene's oracle.
pub fn sample_batch<'a>(
    data: &'a Dataset,
    cfg: &TrainConfig,
    step: u64,
) -> Result<Vec<Example<'a>>, TrainError> {
    if data.scenes.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, step));
    (0..cfg.batch_size)
        .map(|_| {
            let scene = &data.scenes[rng.gen_range(0..data.scenes.len())];
            let ep = scene.spec.sample_episode(&mut rng, cfg.n_tracks);
            let sets = sample_nested_sets(&ep.tracks, cfg.np_max, cfg.nq, &mut rng)?;
            Ok(Example {
                scene,
                sets,
                static_flag: ep.static_flag,
            })
        })
        .collect()
}

/// Fixed held-out examples: the first stored episode of every scene.
pub struct EvalSet<'a> {
    pub examples: Vec<Example<'a>>,
    pub oracle_nll: f64,
}

impl<'a> EvalSet<'a> {
    pub fn new(data: &'a Dataset, np_max: usize, nq: usize, seed: u64) -> Result<Self, TrainError> {
        let mut examples = Vec::new();
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, scene) in data.scenes.iter().enumerate() {
            let Some(ep) = scene.episodes.first() else {
                continue;
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let np = np_max.min(ep.tracks.len().saturating_sub(nq));
            let sets = sample_nested_sets(&ep.tracks, np, nq, &mut rng)?;
            for (k, qs) in sets.queries.iter().enumerate() {
                for t in qs {
                    total -= scene
                        .spec
                        .gt_conditional(&sets.pokes[..k], t.pos)?
                        .logpdf(t.flow);
                    count += 1;
                }
            }
            examples.push(Example {
                scene,
                sets,
                static_flag: ep.static_flag,
            });
        }
        if count == 0 {
            return Err(TrainError::Config("eval set has no episodes".into()));
        }
        Ok(Self {
            examples,
            oracle_nll: total / count as f64,
        })
    }

    /// Mean model NLL, evaluated in chunks of `chunk` scenes.
    pub fn model_nll(&self, params: &ModelParams, chunk: usize) -> Result<f64, TrainError> {
        let mut total = 0.0;
        let mut count = 0usize;
        for group in self.examples.chunks(chunk.max(1)) {
            // Group by query count so each chunk has uniform shapes.
            let mut g = Graph::<f32>::new();
            let p = Bound::bind(&mut g, params, false);
            for ex in group {
                let loss = batch_loss(&mut g, &p, &params.config, std::slice::from_ref(ex))?;
                let n = ex.sets.flat_targets().len();
                total += g.value(loss).data()[0] as f64 * n as f64;
                count += n;
            }
        }
        Ok(total / count as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: u64,
    pub loss: Option<f64>,
    pub eval_nll: Option<f64>,
    pub oracle_nll: Option<f64>,
    pub lr: f64,
}

pub struct Trainer {
    pub params: ModelParams,
    pub opt: AdamW,
    pub cfg: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub lr: f64,
    pub skipped: bool,
}

impl Trainer {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX));
        let params = ModelParams::init(model, &mut rng)?;
        let opt = AdamW::new(&params);
        Ok(Self {
            params,
            opt,
            cfg: cfg.clone(),
        })
    }

    pub fn resume(
        params: ModelParams,
        state: OptimState,
        cfg: &TrainConfig,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        let opt = AdamW::from_state(&params, state)?;
        Ok(Self {
            params,
            opt,
            cfg: cfg.clone(),
        })
    }

    pub fn step_index(&self) -> u64 {
        self.opt.state.step
    }

    /// One optimisation step on the batch for the current step index.
    pub fn step(&mut self, data: &Dataset) -> Result<StepReport, TrainError> {
        let step = self.opt.state.step;
        let batch = sample_batch(data, &self.cfg, step)?;
        let mut g = Graph::<f32>::new();
        let p = Bound::bind(&mut g, &self.params, true);
        let loss = batch_loss(&mut g, &p, &self.params.config, &batch)?;
        let value = g.value(loss).data()[0] as f64;
        let lr = lr_at(&self.cfg, step);
        if !value.is_finite() {
            self.opt.skip();
            return Ok(StepReport {
                loss: value,
                lr,
                skipped: true,
            });
        }
        let grads = match g.backward(loss) {
            Ok(grads) => Some(grads),
            Err(NumericError::NonFinite(_)) => None,
            Err(e) => return Err(e.into()),
        };
        let skipped = match grads {
            Some(grads) => !self
                .opt
                .update(&mut self.params, &p, &grads, &self.cfg, lr)?,
            None => {
                self.opt.skip();
                true
            }
        };
        Ok(StepReport {
            loss: value,
            lr,
            skipped,
        })
    }

    /// Trains until `self.cfg.steps`, writing a metrics line at every eval point.
    pub fn run(
        &mut self,
        data: &Dataset,
        eval: Option<&EvalSet>,
        log: &mut dyn Write,
        mut on_eval: impl FnMut(&Trainer, &MetricsLine) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        let (mut acc, mut n) = (0.0, 0usize);
        let emit = |t: &Trainer,
                    loss: Option<f64>,
                    log: &mut dyn Write|
         -> Result<MetricsLine, TrainError> {
            let step = t.step_index();
            let (eval_nll, oracle_nll) = match eval {
                Some(e) => (Some(e.model_nll(&t.params, 8)?), Some(e.oracle_nll)),
                None => (None, None),
            };
            let line = MetricsLine {
                step,
                loss,
                eval_nll,
                oracle_nll,
                lr: lr_at(&t.cfg, step),
            };
            writeln!(log, "{}", serde_json::to_string(&line)?)?;
            log.flush()?;
            Ok(line)
        };
        if self.step_index() == 0 {
            let line = emit(self, None, log)?;
            on_eval(self, &line)?;
        }
        while self.step_index() < self.cfg.steps {
            let r = self.step(data)?;
            if r.loss.is_finite() {
                acc += r.loss;
                n += 1;
            }
            let s = self.step_index();
            if s.is_multiple_of(self.cfg.eval_every) || s == self.cfg.steps {
                let loss = (n > 0).then(|| acc / n as f64);
                let line = emit(self, loss, log)?;
                on_eval(self, &line)?;
                (acc, n) = (0.0, 0);
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            meta: CheckpointMeta {
                step: self.step_index(),
                ..meta
            },
        }
    }

    pub fn save_state(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.opt.state.to_bytes(&self.params))?;
        Ok(())
    }
}

/// Shuffled copy of `0..n`, for tests and tools that need a seeded order.
pub fn seeded_order(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

#[cfg(test)]
mod tests;
