//! The poke transformer: a small image encoder, a poke/query token stream with
//! query-causal self-attention and cross-attention to image tokens, and a
//! mixture head.

mod checkpoint;
mod forward;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmm::{GmmError, RAW_PER_COMPONENT};
use crate::layout::LayoutError;
use crate::numeric::{NumericError, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use forward::{
    bilinear_weights, image_feature_at, Bound, DecoderInput, Forward, ImageCache, Incremental,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub k: usize,
    pub ffn_expand: usize,
    pub num_freq: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub encoder_depth: usize,
    pub sigma_min: f64,
    pub diagonal_only: bool,
    pub channels: usize,
    pub rope_base: f64,
    /// Upper bound on decoder tokens per scene (pokes plus queries).
    pub max_context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 128,
            heads: 4,
            k: 4,
            ffn_expand: 3,
            num_freq: 8,
            image_size: 64,
            patch_size: 4,
            encoder_depth: 4,
            sigma_min: 0.005,
            diagonal_only: false,
            channels: crate::synth::CHANNELS,
            rope_base: 10000.0,
            max_context: 4096,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad("width must be divisible by heads");
        }
        if !self.head_dim().is_multiple_of(4) {
            return bad("head dimension must be divisible by 4");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad("image_size must be divisible by patch_size");
        }
        if self.depth == 0 || self.ffn_expand == 0 || self.num_freq == 0 || self.channels == 0 {
            return bad("depth, ffn_expand, num_freq and channels must be positive");
        }
        if !(self.sigma_min > 0.0) || !(self.rope_base > 1.0) {
            return bad("sigma_min must be positive and rope_base above 1");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads.max(1)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn raw_len(&self) -> usize {
        RAW_PER_COMPONENT * self.k
    }

    /// Every parameter name with its shape, sorted by name.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.width;
        let e = self.ffn_expand * w;
        let mut m = BTreeMap::new();
        let mut put = |n: String, s: Vec<usize>| {
            m.insert(n, s);
        };
        put(
            "enc.patch.w".into(),
            vec![self.channels * self.patch_size * self.patch_size, w],
        );
        put("enc.patch.b".into(), vec![1, w]);
        for i in 0..self.encoder_depth {
            put(format!("enc.{i}.norm1"), vec![1, w]);
            put(format!("enc.{i}.norm2"), vec![1, w]);
            for p in ["wq", "wk", "wv", "wo"] {
                put(format!("enc.{i}.attn.{p}"), vec![w, w]);
            }
            put(format!("enc.{i}.ffn.w1"), vec![w, e]);
            put(format!("enc.{i}.ffn.w3"), vec![w, e]);
            put(format!("enc.{i}.ffn.w2"), vec![e, w]);
        }
        put("enc.norm".into(), vec![1, w]);
        put("poke.a_flow".into(), vec![4 * self.num_freq, w]);
        put("poke.b_flow".into(), vec![4 * self.num_freq, w]);
        put("poke.a_img".into(), vec![w, w]);
        put("poke.b_img".into(), vec![w, w]);
        put("poke.out".into(), vec![w, w]);
        put("query.emb".into(), vec![1, w]);
        for i in 0..self.depth {
            for n in ["norm1", "norm2", "norm3"] {
                put(format!("dec.{i}.{n}.gain"), vec![2, w]);
                put(format!("dec.{i}.{n}.shift"), vec![2, w]);
            }
            for a in ["self", "cross"] {
                for p in ["wq", "wk", "wv", "wo"] {
                    put(format!("dec.{i}.{a}.{p}"), vec![w, w]);
                }
            }
            put(format!("dec.{i}.ffn.w1"), vec![w, e]);
            put(format!("dec.{i}.ffn.w3"), vec![w, e]);
            put(format!("dec.{i}.ffn.w2"), vec![e, w]);
        }
        put("dec.norm.gain".into(), vec![2, w]);
        put("dec.norm.shift".into(), vec![2, w]);
        put("head.w1".into(), vec![w, w]);
        put("head.w3".into(), vec![w, w]);
        put("head.w2".into(), vec![w, self.raw_len()]);
        put("head.b".into(), vec![1, self.raw_len()]);
        m.into_iter().collect()
    }
}

/// True for matrices that take weight decay; norms, tables, biases and
/// embeddings are exempt.
pub fn decays(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or("");
    !(name.contains("norm") || last == "b" || last == "emb" || last == "shift" || last == "gain")
}

/// Softplus inverse, used to place initial head scales.
fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

/// Initial spread of every mixture component.
pub const INIT_SIGMA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let residual_scale = 1.0 / ((2 * (config.depth + config.encoder_depth)) as f64).sqrt();
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.manifest() {
            let n: usize = shape.iter().product();
            let last = name.rsplit('.').next().unwrap();
            let t = if last == "gain"
                || name.ends_with("norm")
                || name.ends_with("norm1")
                || name.ends_with("norm2")
            {
                Tensor::full(&shape, 1.0f32)
            } else if last == "shift" || name == "enc.patch.b" {
                Tensor::zeros(&shape)
            } else if name == "head.b" {
                let mut b = vec![0f32; n];
                let raw = softplus_inv(INIT_SIGMA - config.sigma_min) as f32;
                for c in 0..config.k {
                    b[c * RAW_PER_COMPONENT + 3] = raw;
                    b[c * RAW_PER_COMPONENT + 5] = raw;
                }
                Tensor::new(shape.clone(), b)?
            } else if name == "query.emb" {
                normal(rng, &shape, 1.0)
            } else {
                let fan_in = shape[0] as f64;
                let mut std = 1.0 / fan_in.sqrt();
                if last == "wo" || (last == "w2" && !name.starts_with("head")) || name == "poke.out"
                {
                    std *= residual_scale;
                }
                if name == "head.w2" {
                    std *= 0.1;
                }
                normal(rng, &shape, std)
            };
            tensors.insert(name, t);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> &Tensor<f32> {
        &self.tensors[name]
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks names and shapes against the config manifest.
    pub fn check(&self) -> Result<(), ModelError> {
        let manifest = self.config.manifest();
        if manifest.len() != self.tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} tensors, manifest has {}",
                self.tensors.len(),
                manifest.len()
            )));
        }
        for (name, shape) in manifest {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::Checkpoint(format!(
                        "{name}: shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(ModelError::Checkpoint(format!("missing tensor {name}"))),
            }
        }
        Ok(())
    }
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let d = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| d.sample(rng) as f32)
}

#[cfg(test)]
mod tests;
