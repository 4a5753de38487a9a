use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::{LrSchedule, TrainConfig, TrainError};
use crate::model::{decays, Bound, Checkpoint, CheckpointMeta, ModelError, ModelParams};
use crate::numeric::{Gradients, Tensor};

/// Learning rate for the update applied at 0-based step `step`.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> f64 {
    let warm = if cfg.warmup_steps == 0 {
        1.0
    } else {
        step as f64 / cfg.warmup_steps as f64
    };
    let decay = match cfg.lr_schedule {
        LrSchedule::Constant => 1.0,
        LrSchedule::Cosine if cfg.steps == 0 => 1.0,
        LrSchedule::Cosine => 0.5 * (1.0 + (PI * (step as f64 / cfg.steps as f64).min(1.0)).cos()),
    };
    cfg.peak_lr * warm.min(decay)
}

/// Adam moments and counters. `step` counts attempted updates, skipped ones included.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub skipped: u64,
    /// Updates actually applied, used for bias correction.
    pub applied: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

const MAGIC: &[u8; 4] = b"FPTS";

impl OptimState {
    pub fn zeros(params: &ModelParams) -> Self {
        let z: BTreeMap<_, _> = params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            step: 0,
            skipped: 0,
            applied: 0,
            m: z.clone(),
            v: z,
        }
    }

    /// `FPTS`, u64 step, skipped and applied counts, u64 length of the first
    /// moment blob, then both moments in checkpoint layout.
    pub fn to_bytes(&self, params: &ModelParams) -> Vec<u8> {
        let blob = |t: &BTreeMap<String, Tensor<f32>>| {
            let p = ModelParams {
                config: params.config.clone(),
                tensors: t.clone(),
            };
            Checkpoint {
                params: p,
                meta: CheckpointMeta::default(),
            }
            .to_bytes()
            .expect("moments match manifest")
        };
        let (m, v) = (blob(&self.m), blob(&self.v));
        let mut out = Vec::with_capacity(36 + m.len() + v.len());
        out.extend_from_slice(MAGIC);
        for x in [self.step, self.skipped, self.applied, m.len() as u64] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&m);
        out.extend_from_slice(&v);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let bad = || TrainError::Model(ModelError::Checkpoint("bad train state".into()));
        if bytes.len() < 36 || &bytes[..4] != MAGIC {
            return Err(bad());
        }
        let word = |i: usize| u64::from_le_bytes(bytes[4 + 8 * i..12 + 8 * i].try_into().unwrap());
        let mlen = word(3) as usize;
        if bytes.len() < 36 + mlen {
            return Err(bad());
        }
        let m = Checkpoint::from_bytes(&bytes[36..36 + mlen])?
            .params
            .tensors;
        let v = Checkpoint::from_bytes(&bytes[36 + mlen..])?.params.tensors;
        Ok(Self {
            step: word(0),
            skipped: word(1),
            applied: word(2),
            m,
            v,
        })
    }
}

/// AdamW with decoupled weight decay and global-norm clipping.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub state: OptimState,
}

impl AdamW {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            state: OptimState::zeros(params),
        }
    }

    pub fn from_state(params: &ModelParams, state: OptimState) -> Result<Self, TrainError> {
        for (k, t) in &params.tensors {
            let ok = |s: &BTreeMap<String, Tensor<f32>>| {
                s.get(k).is_some_and(|x| x.shape() == t.shape())
            };
            if !ok(&state.m) || !ok(&state.v) {
                return Err(TrainError::Config(format!(
                    "train state does not match parameter {k}"
                )));
            }
        }
        Ok(Self { state })
    }

    pub fn skip(&mut self) {
        self.state.step += 1;
        self.state.skipped += 1;
    }

    /// Applies one update. Returns false, touching nothing but the counters,
    /// when the gradient norm is not finite.
    pub fn update(
        &mut self,
        params: &mut ModelParams,
        bound: &Bound,
        grads: &Gradients<f32>,
        cfg: &TrainConfig,
        lr: f64,
    ) -> Result<bool, TrainError> {
        let mut sq = 0.0f64;
        let mut by_name: Vec<(&String, Option<&Tensor<f32>>)> = Vec::new();
        for (name, &var) in bound.iter() {
            let g = grads.get(var);
            if let Some(g) = g {
                sq += g
                    .data()
                    .iter()
                    .map(|&x| (x as f64) * (x as f64))
                    .sum::<f64>();
            }
            by_name.push((name, g));
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            self.skip();
            return Ok(false);
        }
        let clip = if cfg.grad_clip_norm > 0.0 && norm > cfg.grad_clip_norm {
            cfg.grad_clip_norm / norm
        } else {
            1.0
        };
        let (b1, b2) = cfg.betas;
        let t = (self.state.applied + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (name, g) in by_name {
            let p = params
                .tensors
                .get_mut(name)
                .ok_or_else(|| TrainError::Config(format!("unknown parameter {name}")))?;
            let m = self
                .state
                .m
                .get_mut(name)
                .ok_or_else(|| TrainError::Config(format!("no moment for {name}")))?;
            let v = self
                .state
                .v
                .get_mut(name)
                .ok_or_else(|| TrainError::Config(format!("no moment for {name}")))?;
            let wd = if decays(name) { cfg.weight_decay } else { 0.0 };
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.map_or(0.0, |g| g.data()[i] as f64) * clip;
                let mi = b1 * md[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * vd[i] as f64 + (1.0 - b2) * gi * gi;
                md[i] = mi as f32;
                vd[i] = vi as f32;
                let step = (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps);
                let x = pd[i] as f64;
                pd[i] = (x - lr * (step + wd * x)) as f32;
            }
        }
        self.state.step += 1;
        self.state.applied += 1;
        Ok(true)
    }
}
