use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;

fn scene(t: Template, seed: u64) -> (SceneSpec, SceneRaster) {
    gen_scene(
        &mut ChaCha8Rng::seed_from_u64(seed),
        t,
        &GenOptions {
            sigma_obs: 0.01,
            image_size: 32,
        },
    )
}

/// Body `[0.2,0.4]x[0.3,0.6]` with a door on its right; both lift by 0.1 or the door swings.
fn toy_hinge(sigma_obs: f64) -> SceneSpec {
    let lift = RigidMotion::translate([0.0, 0.1]);
    SceneSpec {
        template: Template::Hinge,
        parts: vec![rect(0.4, 0.3, 0.6, 0.6), rect(0.2, 0.3, 0.4, 0.6)],
        modes: vec![
            Mode {
                weight: 0.5,
                motions: vec![lift, lift],
            },
            Mode {
                weight: 0.5,
                motions: vec![RigidMotion::rotate(-0.5, [0.4, 0.6]), RigidMotion::IDENTITY],
            },
        ],
        sigma_obs,
        render_seed: 1,
    }
}

fn centroid(poly: &[[f64; 2]]) -> [f64; 2] {
    let n = poly.len() as f64;
    [
        poly.iter().map(|p| p[0]).sum::<f64>() / n,
        poly.iter().map(|p| p[1]).sum::<f64>() / n,
    ]
}

#[test]
fn hinge_parts_move_independently() {
    for seed in 0..20 {
        let (s, _) = scene(Template::Hinge, seed);
        assert_eq!(s.prior(), vec![0.25; 4]);
        assert_eq!(s.parts.len(), 2);
        let (door, body) = (centroid(&s.parts[0]), centroid(&s.parts[1]));
        // Knowing the door swings says nothing about the box.
        let poke = Poke {
            pos: door,
            flow: s.mode_flow(1, door),
        };
        let w = s.gt_posterior(&[poke]).unwrap();
        assert!((w[1] - w[3]).abs() < 1e-12 && w[1] + w[3] > 0.95, "{w:?}");
        let b = s.gt_conditional(&[], body).unwrap();
        let lifted: f64 = (0..4)
            .filter(|&k| s.mode_flow(k, body)[1] > 0.1)
            .map(|k| b.weights()[k])
            .sum();
        assert_eq!(lifted, 0.5);
    }
}

#[test]
fn template_shapes() {
    for seed in 0..20 {
        assert_eq!(scene(Template::Drawer, seed).0.num_modes(), 3);
        let (st, _) = scene(Template::Stack, seed);
        assert_eq!((st.parts.len(), st.num_modes()), (3, 3));
        let (m, _) = scene(Template::Multi, seed);
        assert!((3..=5).contains(&m.parts.len()) && (4..=8).contains(&m.num_modes()));
    }
}

#[test]
fn background_never_moves() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in Template::ALL {
        for seed in 0..10 {
            let (s, _) = scene(t, seed);
            for _ in 0..500 {
                let p = [rng.gen(), rng.gen()];
                if s.part_at(p).is_none() {
                    for k in 0..s.num_modes() {
                        assert_eq!(s.mode_flow(k, p), [0.0, 0.0]);
                    }
                }
            }
        }
    }
}

#[test]
fn generation_is_seed_deterministic() {
    for t in Template::ALL {
        let (a, ra) = scene(t, 77);
        let (b, rb) = scene(t, 77);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let bytes = |r: &SceneRaster| {
            r.data
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect::<Vec<u8>>()
        };
        assert_eq!(bytes(&ra), bytes(&rb));
    }
}

#[test]
fn raster_values_in_unit_range() {
    for t in Template::ALL {
        let (s, r) = scene(t, 5);
        assert_eq!(r.data.len(), CHANNELS * 32 * 32);
        assert!(r.data.iter().all(|v| (0.0..=1.0).contains(v)));
        // The part channel is lit at the part's centroid.
        let c = centroid(&s.parts[0]);
        assert!(r.at(0, (c[1] * 32.0) as usize, (c[0] * 32.0) as usize) > 0.5);
    }
}

#[test]
fn posterior_examples() {
    let s = toy_hinge(0.01);
    assert_eq!(s.gt_posterior(&[]).unwrap(), vec![0.5, 0.5]);
    let both = Poke {
        pos: [0.3, 0.45],
        flow: [0.0, 0.1],
    };
    let w = s.gt_posterior(&[both]).unwrap();
    assert!(w[1] < 1e-10, "{w:?}");
    let direct = (-(0.1f64.powi(2)) / (2.0 * 0.01f64.powi(2))).exp();
    assert!((w[1] / w[0] - direct).abs() < 1e-15);
    let half = s
        .gt_posterior(&[Poke {
            pos: [0.3, 0.45],
            flow: [0.0, 0.05],
        }])
        .unwrap();
    assert!((half[0] - 0.5).abs() < 1e-12 && (half[1] - 0.5).abs() < 1e-12);
}

#[test]
fn conditional_examples() {
    let s = toy_hinge(0.01);
    let bg = s.gt_conditional(&[], [0.9, 0.1]).unwrap();
    assert!(bg.means().iter().all(|m| *m == [0.0, 0.0]));
    assert!(
        (bg.logpdf([0.0, 0.0])
            - Gmm2::single([0.0, 0.0], Chol2::isotropic(0.01)).logpdf([0.0, 0.0]))
        .abs()
            < 1e-12
    );
    let b = s.gt_conditional(&[], [0.3, 0.45]).unwrap();
    assert_eq!(b.k(), 2);
    assert_eq!(b.weights(), &[0.5, 0.5]);
    assert!(b.means().contains(&[0.0, 0.0]));
    assert!(matches!(
        toy_hinge(0.0).gt_conditional(&[], [0.3, 0.4]),
        Err(SynthError::ZeroNoise)
    ));
}

#[test]
fn conditional_mean_matches_sampled_flows() {
    for t in [Template::Hinge, Template::Stack] {
        let (s, _) = scene(t, 9);
        let q = centroid(s.parts.last().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, s.sigma_obs).unwrap();
        let n = 100_000;
        let mut acc = [0.0, 0.0];
        for _ in 0..n {
            let z = s.sample_episode(&mut rng, 0).mode;
            let f = s.mode_flow(z, q);
            acc[0] += f[0] + noise.sample(&mut rng);
            acc[1] += f[1] + noise.sample(&mut rng);
        }
        let g = s.gt_conditional(&[], q).unwrap();
        let sd = g.covariance();
        for a in 0..2 {
            let bound = 3.0 * (sd[a][a] / n as f64).sqrt() + 1e-12;
            assert!(
                (acc[a] / n as f64 - g.mean()[a]).abs() < bound,
                "{t:?} axis {a}"
            );
        }
    }
}

#[test]
fn oracle_matches_rejection_sampling() {
    // Episodes kept with probability proportional to the poke likelihood are exact
    // posterior draws. Both sides share the per-mode Gaussian, so the mixture KL is
    // bounded by the KL between mode frequencies.
    for seed in 0..3 {
        let (s, _) = scene(Template::Hinge, seed);
        let door = centroid(&s.parts[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = s.mode_flow(1, door);
        let poke = Poke {
            pos: door,
            flow: [target[0] * 0.5 + 0.01, target[1] * 0.5 + 0.15 * 0.5],
        };
        let sig2 = s.sigma_obs * s.sigma_obs;
        let lik = |z: usize| {
            let m = s.mode_flow(z, poke.pos);
            (-((poke.flow[0] - m[0]).powi(2) + (poke.flow[1] - m[1]).powi(2)) / (2.0 * sig2)).exp()
        };
        let k = s.num_modes();
        let top = (0..k).map(lik).fold(0.0, f64::max);
        let mut counts = vec![0usize; k];
        let mut kept = 0;
        while kept < 100_000 {
            let z = s.sample_episode(&mut rng, 0).mode;
            if rng.gen::<f64>() < lik(z) / top {
                counts[z] += 1;
                kept += 1;
            }
        }
        let w = s.gt_posterior(&[poke]).unwrap();
        let kl: f64 = (0..k)
            .filter(|&k| counts[k] > 0)
            .map(|k| {
                let p = counts[k] as f64 / kept as f64;
                p * (p / w[k]).ln()
            })
            .sum();
        assert!(kl < 0.02, "seed {seed}: {kl} ({counts:?} vs {w:?})");
    }
}

#[test]
fn episodes_follow_the_prior() {
    let (s, _) = scene(Template::Stack, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 10_000;
    let mut counts = vec![0usize; s.num_modes()];
    for _ in 0..n {
        counts[s.sample_episode(&mut rng, 1).mode] += 1;
    }
    for (k, w) in s.prior().iter().enumerate() {
        let sd = (w * (1.0 - w) / n as f64).sqrt();
        assert!(
            (counts[k] as f64 / n as f64 - w).abs() < 3.0 * sd,
            "mode {k}"
        );
    }
}

#[test]
fn noiseless_episodes_are_rigid() {
    let (mut s, _) = scene(Template::Hinge, 2);
    s.sigma_obs = 0.0;
    let e = s.sample_episode(&mut ChaCha8Rng::seed_from_u64(5), 500);
    for t in &e.tracks {
        assert_eq!(t.flow, s.mode_flow(e.mode, t.pos));
        assert!(t.flow[0].hypot(t.flow[1]) <= MAX_FLOW);
        assert!((0.0..=1.0).contains(&t.pos[0]) && (0.0..=1.0).contains(&t.pos[1]));
    }
}

#[test]
fn static_flag_examples() {
    let still = Poke {
        pos: [0.5, 0.5],
        flow: [0.0, 0.0],
    };
    let fast = Poke {
        pos: [0.5, 0.5],
        flow: [0.5, 0.5],
    };
    assert!(static_flag_heuristic(&[still; 10], 448).unwrap());
    assert!(!static_flag_heuristic(&[fast; 10], 448).unwrap());
    let mut mixed = vec![still; 4];
    mixed.extend([fast; 6]);
    assert!(static_flag_heuristic(&mixed, 448).unwrap());
    let edge = Poke {
        pos: [0.5, 0.5],
        flow: [3.0 / 448.0, 0.0],
    };
    let mut at_threshold = vec![edge; 2];
    at_threshold.extend([fast; 3]);
    assert!(static_flag_heuristic(&at_threshold, 448).unwrap());
    let mut below = vec![still; 3];
    below.extend([fast; 5]);
    assert!(!static_flag_heuristic(&below, 448).unwrap());
    assert!(matches!(
        static_flag_heuristic(&[], 448),
        Err(SynthError::NoTracks)
    ));
}

#[test]
fn dataset_round_trip() {
    let opts = GenOptions {
        sigma_obs: 0.01,
        image_size: 16,
    };
    let ds = Dataset::generate(&[Template::Hinge, Template::Drawer], 5, 2, 12, 42, &opts).unwrap();
    assert_eq!(ds.scenes[1].spec.template, Template::Drawer);
    let bytes = ds.to_bytes().unwrap();
    let back = Dataset::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.scenes[3].spec, ds.scenes[3].spec);
    let again =
        Dataset::generate(&[Template::Hinge, Template::Drawer], 5, 2, 12, 42, &opts).unwrap();
    assert_eq!(again.to_bytes().unwrap(), bytes);
    let empty = Dataset::generate(&[Template::Hinge], 0, 1, 4, 0, &opts).unwrap();
    assert!(Dataset::from_bytes(&empty.to_bytes().unwrap())
        .unwrap()
        .scenes
        .is_empty());
    assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(Dataset::from_bytes(b"XXXX").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_scenes_validate(seed in any::<u64>(), t in 0usize..4) {
        let (s, _) = gen_scene(&mut ChaCha8Rng::seed_from_u64(seed), Template::ALL[t], &GenOptions { sigma_obs: 0.01, image_size: 8 });
        prop_assert!(s.validate().is_ok(), "{:?}", s.validate());
    }

    #[test]
    fn posterior_ignores_poke_order(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, _) = scene(Template::Drawer, seed);
        let mut pokes = s.sample_episode(&mut rng, n).tracks;
        let a = s.gt_posterior(&pokes).unwrap();
        pokes.shuffle(&mut rng);
        let b = s.gt_posterior(&pokes).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
