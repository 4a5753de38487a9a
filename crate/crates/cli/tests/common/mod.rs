#![allow(dead_code)]

use std::path::{Path, PathBuf};

use fpt_core::model::{save_checkpoint, Checkpoint, CheckpointMeta, ModelConfig, ModelParams};
use fpt_core::synth::{Dataset, GenOptions, Template};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn tiny() -> ModelConfig {
    ModelConfig {
        depth: 1,
        width: 16,
        heads: 2,
        k: 2,
        ffn_expand: 2,
        num_freq: 2,
        image_size: 16,
        patch_size: 4,
        encoder_depth: 1,
        max_context: 300,
        ..ModelConfig::default()
    }
}

pub fn tiny_checkpoint(threshold: Option<f64>) -> Checkpoint {
    let params = ModelParams::init(&tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    Checkpoint {
        params,
        meta: CheckpointMeta {
            segmentation_threshold: threshold,
            step: 0,
        },
    }
}

pub fn tiny_data(n: usize) -> Dataset {
    let opts = GenOptions {
        sigma_obs: 0.01,
        image_size: 16,
    };
    Dataset::generate(&[Template::Hinge, Template::Drawer], n, 1, 32, 5, &opts).unwrap()
}

/// Writes a tiny checkpoint and a three-scene dataset into `dir`.
pub fn fixtures(dir: &Path) -> (PathBuf, PathBuf) {
    let ck = dir.join("tiny.fptc");
    save_checkpoint(&ck, &tiny_checkpoint(Some(0.3))).unwrap();
    let data = dir.join("tiny.fptd");
    tiny_data(3).write(&data).unwrap();
    (ck, data)
}
