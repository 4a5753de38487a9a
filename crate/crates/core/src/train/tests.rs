use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gmm::{gmm_nll, Gmm2};
use crate::numeric::Tensor;
use crate::synth::{GenOptions, Template};

fn tiny() -> ModelConfig {
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
        ..ModelConfig::default()
    }
}

fn tcfg() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        np_max: 3,
        nq: 2,
        steps: 20,
        warmup_steps: 2,
        peak_lr: 3e-3,
        eval_every: 5,
        n_tracks: 16,
        ..TrainConfig::default()
    }
}

fn data(templates: &[Template], n: usize, seed: u64) -> Dataset {
    let opts = GenOptions {
        sigma_obs: 0.01,
        image_size: 16,
    };
    Dataset::generate(templates, n, 1, 16, seed, &opts).unwrap()
}

fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

fn raw_of(gmm: &Gmm2, sigma_min: f64) -> Vec<f64> {
    let mut raw = Vec::new();
    for n in 0..gmm.k() {
        let l = gmm.factors()[n];
        let m = gmm.means()[n];
        raw.extend([
            gmm.weights()[n].max(1e-300).ln(),
            m[0],
            m[1],
            softplus_inv(l.l11 - sigma_min),
            l.l21,
            softplus_inv(l.l22 - sigma_min),
        ]);
    }
    raw
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig {
        warmup_steps: 20_000,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        np_max: 0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        n_tracks: 10,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
    let rc: RunConfig =
        serde_json::from_str(r#"{"train":{"steps":7,"lr_schedule":"constant"}}"#).unwrap();
    assert_eq!(rc.train.steps, 7);
    assert_eq!(rc.train.lr_schedule, LrSchedule::Constant);
    assert_eq!(rc.model, ModelConfig::default());
}

#[test]
fn schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(&cfg, 0), 0.0);
    assert!((lr_at(&cfg, 250) - 1.5e-4).abs() < 1e-12);
    assert!(
        (lr_at(&cfg, 500) - 3e-4 * 0.5 * (1.0 + (std::f64::consts::PI * 0.025).cos())).abs()
            < 1e-12
    );
    assert!(lr_at(&cfg, 20_000) < 1e-12);
    let c = TrainConfig {
        lr_schedule: LrSchedule::Constant,
        ..cfg
    };
    assert_eq!(lr_at(&c, 10_000), 3e-4);
}

fn quadratic_step(x0: f32, grad: f32, wd: f64, lr: f64) -> f32 {
    let model = tiny();
    let mut params = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    params
        .tensors
        .get_mut("query.emb")
        .unwrap()
        .data_mut()
        .fill(x0);
    let mut opt = AdamW::new(&params);
    let mut g = Graph::<f32>::new();
    let p = Bound::bind(&mut g, &params, true);
    let e = p.var("query.emb");
    let n = g.value(e).len();
    let target = g.constant(Tensor::full(g.value(e).shape(), grad));
    let prod = g.mul(e, target).unwrap();
    // d/dx of sum(grad * x) is grad for every entry.
    let s = g.sum(prod).unwrap();
    let _ = n;
    let grads = g.backward(s).unwrap();
    let cfg = TrainConfig {
        weight_decay: wd,
        grad_clip_norm: 0.0,
        ..TrainConfig::default()
    };
    assert!(opt.update(&mut params, &p, &grads, &cfg, lr).unwrap());
    params.get("query.emb").data()[0]
}

#[test]
fn zero_gradient_without_decay_is_identity() {
    let model = tiny();
    let mut params = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let before = params.clone();
    let mut opt = AdamW::new(&params);
    let mut g = Graph::<f32>::new();
    let p = Bound::bind(&mut g, &params, true);
    let z = g.constant(Tensor::scalar(0.0));
    let e = p.var("head.b");
    let s = g.sum(e).unwrap();
    let s = g.mul(s, z).unwrap();
    let grads = g.backward(s).unwrap();
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    assert!(opt.update(&mut params, &p, &grads, &cfg, 1e-2).unwrap());
    assert_eq!(params, before);
    assert_eq!(opt.state.step, 1);
}

#[test]
fn quadratic_step_shrinks() {
    // Gradient of x²/2 at x = 1 is 1.
    let x = quadratic_step(1.0, 1.0, 0.0, 0.1);
    assert!(x.abs() < 1.0, "{x}");
    assert!((x - 0.9).abs() < 1e-5, "{x}");
    // Decoupled decay on a decaying matrix without gradient.
    let x = quadratic_step(1.0, 0.0, 0.5, 0.1);
    assert_eq!(x, 1.0, "embeddings are exempt");
}

#[test]
fn clipping_bounds_update() {
    let a = quadratic_step(1.0, 100.0, 0.0, 0.1);
    let b = quadratic_step(1.0, 1.0, 0.0, 0.1);
    // Adam normalises scale, so both move by lr.
    assert!((a - b).abs() < 1e-5);
}

#[test]
fn oracle_raw_gives_oracle_nll() {
    let d = data(&[Template::Hinge], 3, 4);
    let eval = EvalSet::new(&d, 3, 2, 9).unwrap();
    let sigma_min = 0.005;
    let mut raws = Vec::new();
    let mut targets = Vec::new();
    for ex in &eval.examples {
        for (k, qs) in ex.sets.queries.iter().enumerate() {
            for t in qs {
                let gmm = ex
                    .scene
                    .spec
                    .gt_conditional(&ex.sets.pokes[..k], t.pos)
                    .unwrap();
                raws.push(raw_of(&gmm, sigma_min));
                targets.push(t.flow);
            }
        }
    }
    let mut g = Graph::<f64>::new();
    let raw = g.constant(Tensor::from_rows(&raws).unwrap());
    let loss = gmm_nll(&mut g, raw, &targets, sigma_min, false).unwrap();
    let v = g.value(loss).data()[0];
    assert!(
        (v - eval.oracle_nll).abs() < 1e-6,
        "{v} vs {}",
        eval.oracle_nll
    );
}

#[test]
fn single_component_floor() {
    let sigma_min = 0.02;
    // softplus(-40) is ~4e-18: the factor diagonal collapses onto sigma_min.
    let raw = vec![vec![0.0, 0.0, 0.0, -40.0, 0.0, -40.0]; 5];
    let mut g = Graph::<f64>::new();
    let r = g.constant(Tensor::from_rows(&raw).unwrap());
    let loss = gmm_nll(&mut g, r, &[[0.0, 0.0]; 5], sigma_min, false).unwrap();
    let d = sigma_min;
    let want = -(1.0 / (2.0 * std::f64::consts::PI * d * d)).ln();
    assert!((g.value(loss).data()[0] - want).abs() < 1e-9);
}

#[test]
fn masked_loss_equals_prefix_passes() {
    let model = tiny();
    let params = ModelParams::init(&model, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let d = data(&[Template::Hinge, Template::Drawer], 2, 5);
    let cfg = tcfg();
    let batch = sample_batch(&d, &cfg, 3).unwrap();
    let mut g = Graph::<f64>::new();
    let p = Bound::bind(&mut g, &params, false);
    let joint = batch_loss(&mut g, &p, &model, &batch).unwrap();
    let joint = g.value(joint).data()[0];

    let mut total = 0.0;
    let mut n = 0;
    for ex in &batch {
        for (k, qs) in ex.sets.queries.iter().enumerate() {
            let qpos: Vec<_> = qs.iter().map(|t| t.pos).collect();
            let input = DecoderInput::single(&ex.sets.pokes[..k], &qpos, ex.static_flag);
            let mut g = Graph::<f64>::new();
            let p = Bound::bind(&mut g, &params, false);
            let mut f = Forward::new(&mut g, &p, &model);
            let img = f.encode(&[&ex.scene.raster]).unwrap();
            let raw = f.decode(img, &[input]).unwrap();
            let targets: Vec<_> = qs.iter().map(|t| t.flow).collect();
            let l = gmm_nll(&mut g, raw, &targets, model.sigma_min, false).unwrap();
            total += g.value(l).data()[0] * qs.len() as f64;
            n += qs.len();
        }
    }
    let prefix = total / n as f64;
    assert!((joint - prefix).abs() < 1e-5, "{joint} vs {prefix}");
}

#[test]
fn zero_steps_keeps_init() {
    let model = tiny();
    let cfg = TrainConfig {
        steps: 0,
        warmup_steps: 0,
        ..tcfg()
    };
    let d = data(&[Template::Hinge], 2, 1);
    let mut t = Trainer::new(&model, &cfg).unwrap();
    let init = t.params.clone();
    let mut log = Vec::new();
    t.run(&d, None, &mut log, |_, _| Ok(())).unwrap();
    let ck = t.checkpoint(CheckpointMeta::default());
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(back.params, init);
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), 1);
}

#[test]
fn deterministic_and_resumable() {
    let model = tiny();
    let cfg = tcfg();
    let d = data(&[Template::Hinge], 4, 2);
    let ev = data(&[Template::Hinge], 2, 3);
    let eval = EvalSet::new(&ev, 3, 2, 0).unwrap();

    let mut a = Trainer::new(&model, &cfg).unwrap();
    let mut log_a = Vec::new();
    a.run(&d, Some(&eval), &mut log_a, |_, _| Ok(())).unwrap();

    let mut b = Trainer::new(&model, &cfg).unwrap();
    let mut log_b = Vec::new();
    b.run(&d, Some(&eval), &mut log_b, |_, _| Ok(())).unwrap();
    assert_eq!(log_a, log_b);
    assert_eq!(a.params, b.params);

    // Stop half way, persist, reload, continue.
    let half = TrainConfig { ..cfg.clone() };
    let mut c = Trainer::new(&model, &half).unwrap();
    let mut log_c = Vec::new();
    for _ in 0..10 {
        c.step(&d).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let state_path = dir.path().join("state.bin");
    let ck_path = dir.path().join("model.fptc");
    c.save_state(&state_path).unwrap();
    crate::model::save_checkpoint(&ck_path, &c.checkpoint(CheckpointMeta::default())).unwrap();
    drop(c);
    let params = crate::model::load_checkpoint(&ck_path).unwrap().params;
    let state = OptimState::from_bytes(&std::fs::read(&state_path).unwrap()).unwrap();
    let mut r = Trainer::resume(params, state, &cfg).unwrap();
    r.run(&d, Some(&eval), &mut log_c, |_, _| Ok(())).unwrap();
    assert_eq!(r.params, a.params);
    let tail_a: Vec<_> = String::from_utf8(log_a)
        .unwrap()
        .lines()
        .skip(3)
        .map(String::from)
        .collect();
    let tail_c: Vec<_> = String::from_utf8(log_c)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(tail_a, tail_c);
}

#[test]
fn short_run_reduces_eval_nll() {
    let model = tiny();
    let cfg = TrainConfig {
        steps: 60,
        warmup_steps: 5,
        peak_lr: 3e-3,
        batch_size: 4,
        eval_every: 60,
        ..tcfg()
    };
    let d = data(&[Template::Hinge], 16, 7);
    let ev = data(&[Template::Hinge], 4, 8);
    let eval = EvalSet::new(&ev, 3, 2, 0).unwrap();
    let mut t = Trainer::new(&model, &cfg).unwrap();
    let mut lines = Vec::new();
    t.run(&d, Some(&eval), &mut std::io::sink(), |_, l| {
        lines.push(l.clone());
        Ok(())
    })
    .unwrap();
    let first = lines.first().unwrap().eval_nll.unwrap();
    let last = lines.last().unwrap().eval_nll.unwrap();
    assert!(last < first - 0.2, "{first} -> {last}");
    assert!(last >= eval.oracle_nll - 0.1);
}
