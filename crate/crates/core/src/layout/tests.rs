use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numeric::{grad_check, Graph};

fn rows(m: &AttnMask) -> Vec<Vec<u8>> {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|&b| b as u8).collect())
        .collect()
}

#[test]
fn one_poke_one_query_pattern() {
    let m = build_query_causal_mask(TokenLayout::new(1, 1));
    assert_eq!(rows(&m), vec![vec![1, 0, 0], vec![0, 1, 0], vec![1, 0, 1]]);
}

#[test]
fn no_pokes_means_self_attention_only() {
    let m = build_query_causal_mask(TokenLayout::new(0, 1));
    assert_eq!(rows(&m), vec![vec![1]]);
    let m = build_query_causal_mask(TokenLayout::new(0, 3));
    assert_eq!(m.count(), 3);
}

#[test]
fn nonzero_count_matches_formula() {
    assert_eq!(build_query_causal_mask(TokenLayout::new(2, 1)).count(), 9);
    for np in 0..=8 {
        for nq in 1..=4 {
            let layout = TokenLayout::new(np, nq);
            let m = build_query_causal_mask(layout);
            assert_eq!(m.rows(), np + (np + 1) * nq);
            assert_eq!(m.count(), layout.mask_nonzeros(), "np={np} nq={nq}");
            assert_eq!(m.count(), np * (np + 1) / 2 + nq * (np + 1) * (np + 2) / 2);
        }
    }
}

/// Two attention layers with rotary positions over a token stream.
fn two_layers(
    g: &mut Graph<f64>,
    x: &Tensor<f64>,
    pos: &[[f64; 2]],
    w: &Tensor<f64>,
    mask: Option<&AttnMask>,
) -> Tensor<f64> {
    let rope = Rope::new(pos, 2, 4, 10000.0, 8).unwrap();
    let mut h = g.constant(x.clone());
    let wv = g.constant(w.clone());
    for _ in 0..2 {
        let p = g.matmul(h, wv).unwrap();
        let q = rope.record(g, p).unwrap();
        let a = g.masked_attention(q, q, h, 2, mask).unwrap();
        h = g.add(a, h).unwrap();
    }
    g.value(h).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masked_pass_equals_prefix_passes(np in 0usize..=6, nq in 1usize..=3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = TokenLayout::new(np, nq);
        let n = layout.total();
        let x = Tensor::from_fn(&[n, 8], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::from_fn(&[8, 8], |_| rng.gen_range(-0.5..0.5));
        let pos: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen(), rng.gen()]).collect();
        let mask = build_query_causal_mask(layout);
        let full = two_layers(&mut Graph::new(), &x, &pos, &w, Some(&mask));
        for set in 0..=np {
            for j in 0..nq {
                let qt = layout.query_token(set, j);
                let idx: Vec<usize> = (0..set).chain([qt]).collect();
                let sub = Tensor::from_rows(&idx.iter().map(|&i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
                let sub_pos: Vec<[f64; 2]> = idx.iter().map(|&i| pos[i]).collect();
                let causal = AttnMask::from_fn(idx.len(), idx.len(), |r, c| c <= r);
                let out = two_layers(&mut Graph::new(), &sub, &sub_pos, &w, Some(&causal));
                for (a, b) in out.row(set).iter().zip(full.row(qt)) {
                    prop_assert!((a - b).abs() < 1e-5, "set {set} query {j}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn rope_relative_shift(seed in any::<u64>(), dx in -0.3..0.3f64, dy in -0.3..0.3f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
        let b = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
        let dot = |p: [f64; 2], q: [f64; 2]| {
            let r = rope_apply(&[u.clone(), v.clone()], &[p, q], 2, 10000.0, 16).unwrap();
            r[0].iter().zip(&r[1]).map(|(x, y)| x * y).sum::<f64>()
        };
        let shifted = dot([a[0] + dx, a[1] + dy], [b[0] + dx, b[1] + dy]);
        prop_assert!((dot(a, b) - shifted).abs() < 1e-5);
        let r = rope_apply(&[u.clone()], &[a], 2, 10000.0, 16).unwrap();
        let n0: f64 = u.iter().map(|x| x * x).sum();
        let n1: f64 = r[0].iter().map(|x| x * x).sum();
        prop_assert!((n0.sqrt() - n1.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn fourier_bounded(fx in prop_oneof![-1e9..1e9f64, -3.0..3.0f64], fy in prop_oneof![-1e9..1e9f64, -3.0..3.0f64], nf in 1usize..10) {
        let e = fourier_embed_flow([fx, fy], nf);
        prop_assert_eq!(e.len(), 4 * nf);
        prop_assert!(e.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn nested_sets_are_prefixes(np in 0usize..10, nq in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tracks: Vec<Poke> = (0..20).map(|i| Poke { pos: [i as f64 / 20.0, 0.5], flow: [i as f64, 0.0] }).collect();
        let sets = sample_nested_sets(&tracks, np, nq, &mut rng).unwrap();
        prop_assert_eq!(sets.pokes.len(), np);
        prop_assert_eq!(sets.queries.len(), np + 1);
        for q in &sets.queries {
            prop_assert_eq!(q.len(), nq);
            // Queries never reuse a poke and carry their track's flow.
            for t in q {
                prop_assert!(!sets.pokes.iter().any(|p| p.pos == t.pos));
                prop_assert_eq!(t.flow[0], (t.pos[0] * 20.0).round());
            }
        }
        let mut distinct: Vec<f64> = sets.pokes.iter().map(|p| p.flow[0]).collect();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        prop_assert_eq!(distinct.len(), np);
    }
}

#[test]
fn nested_sampling_edge_cases() {
    let tracks: Vec<Poke> = (0..6)
        .map(|i| Poke {
            pos: [i as f64 / 6.0, 0.0],
            flow: [0.0, 0.0],
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = sample_nested_sets(&tracks, 0, 4, &mut rng).unwrap();
    assert!(s.pokes.is_empty());
    assert_eq!(s.queries.len(), 1);
    assert_eq!(
        sample_nested_sets(&tracks, 4, 3, &mut rng),
        Err(LayoutError::InsufficientTracks {
            needed: 7,
            available: 6
        })
    );
    let a = sample_nested_sets(&tracks, 3, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = sample_nested_sets(&tracks, 3, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rope_identity_at_origin_and_bad_dims() {
    let u = vec![vec![0.3, -0.1, 0.7, 0.2, 1.0, -2.0, 0.5, 0.5]];
    assert_eq!(rope_apply(&u, &[[0.0, 0.0]], 1, 10000.0, 16).unwrap(), u);
    assert_eq!(
        rope_apply(&u, &[[0.0, 0.0]], 4, 10000.0, 16),
        Err(LayoutError::HeadDim(2))
    );
    assert!(Rope::new(&[[0.0, 0.0]], 1, 6, 10000.0, 16).is_err());
}

#[test]
fn rope_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pos: Vec<[f64; 2]> = (0..3).map(|_| [rng.gen(), rng.gen()]).collect();
    let rope = Rope::new(&pos, 2, 8, 100.0, 4).unwrap();
    let x = Tensor::from_fn(&[3, 16], |_| rng.gen_range(-1.0..1.0));
    let w = Tensor::from_fn(&[3, 16], |_| rng.gen_range(-1.0..1.0));
    let rep = grad_check(
        |g, v| {
            let r = rope.record(g, v[0])?;
            let c = g.constant(w.clone());
            let m = g.mul(r, c)?;
            g.sum(m)
        },
        &[x],
        1e-6,
        None,
        &mut rng,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-8);
}

#[test]
fn fourier_examples() {
    let e = fourier_embed_flow([0.0, 0.0], 8);
    for k in 0..16 {
        assert_eq!(e[2 * k], 0.0);
        assert_eq!(e[2 * k + 1], 1.0);
    }
    let e = fourier_embed_flow([0.5f64.atanh(), 0.0], 1);
    assert!((e[0] - 1.0).abs() < 1e-12);
    assert!(e[1].abs() < 1e-12);
}
