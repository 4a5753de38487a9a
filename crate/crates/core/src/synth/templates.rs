//! Scene templates. Every motion parameter is a fixed function of the drawn
//! geometry, so the raster alone determines the mode set and its weights.

use rand::Rng;

use super::{rect, Mode, RigidMotion, SceneRaster, SceneSpec, Template, DEFAULT_SIGMA_OBS};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenOptions {
    pub sigma_obs: f64,
    pub image_size: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            sigma_obs: DEFAULT_SIGMA_OBS,
            image_size: 64,
        }
    }
}

pub const HINGE_ANGLE: f64 = 0.5;
pub const HINGE_LIFT: f64 = 0.15;
pub const DRAWER_STEP: f64 = 0.12;
pub const TOPPLE_ANGLE: f64 = 0.4;

pub fn gen_scene(
    rng: &mut impl Rng,
    template: Template,
    opts: &GenOptions,
) -> (SceneSpec, SceneRaster) {
    let render_seed = rng.gen();
    let (parts, modes) = match template {
        Template::Hinge => hinge(rng),
        Template::Drawer => drawer(rng),
        Template::Stack => stack(rng),
        Template::Multi => multi(rng),
    };
    let spec = SceneSpec {
        template,
        parts,
        modes,
        sigma_obs: opts.sigma_obs,
        render_seed,
    };
    debug_assert!(spec.validate().is_ok(), "{:?}", spec.validate());
    let raster = spec.render(opts.image_size);
    (spec, raster)
}

/// Part 0 is a door hinged to a fixed frame on its outer edge, part 1 a box
/// beside it. The door swings or stays, and independently the box lifts or
/// stays, giving four equally likely modes.
fn hinge(rng: &mut impl Rng) -> (Vec<Vec<[f64; 2]>>, Vec<Mode>) {
    let wb = rng.gen_range(0.2..0.3);
    let wa = rng.gen_range(0.15..0.25);
    let h = rng.gen_range(0.25..0.35);
    let y0 = rng.gen_range(0.3..0.95 - h - HINGE_LIFT);
    let right = rng.gen_bool(0.5);
    let x0 = rng.gen_range(0.1..0.9 - wa - wb);
    let (door, body, outer) = if right {
        (
            rect(x0 + wb, y0, x0 + wb + wa, y0 + h),
            rect(x0, y0, x0 + wb, y0 + h),
            x0 + wb + wa,
        )
    } else {
        (
            rect(x0, y0, x0 + wa, y0 + h),
            rect(x0 + wa, y0, x0 + wa + wb, y0 + h),
            x0,
        )
    };
    let side = if right { 1.0 } else { -1.0 };
    let lift = RigidMotion::translate([0.0, HINGE_LIFT]);
    let swing = RigidMotion::rotate(side * HINGE_ANGLE, [outer, y0 + h]);
    let id = RigidMotion::IDENTITY;
    let modes = [(id, id), (swing, id), (id, lift), (swing, lift)]
        .into_iter()
        .map(|(d, b)| Mode {
            weight: 0.25,
            motions: vec![d, b],
        })
        .collect();
    (vec![door, body], modes)
}

/// Part 0 is a drawer below static body part 1, pulled out by one of three
/// extensions.
fn drawer(rng: &mut impl Rng) -> (Vec<Vec<[f64; 2]>>, Vec<Mode>) {
    let w = rng.gen_range(0.3..0.45);
    let h = rng.gen_range(0.25..0.35);
    let hd = rng.gen_range(0.08..0.12);
    let x0 = rng.gen_range(0.1..0.9 - w);
    let y0 = rng.gen_range(0.05..0.95 - h - hd - 2.0 * DRAWER_STEP);
    let body = rect(x0, y0, x0 + w, y0 + h);
    let slab = rect(x0 + 0.1 * w, y0 + h, x0 + 0.9 * w, y0 + h + hd);
    let modes = (0..3)
        .map(|e| Mode {
            weight: 1.0 / 3.0,
            motions: vec![
                RigidMotion::translate([0.0, DRAWER_STEP * e as f64]),
                RigidMotion::IDENTITY,
            ],
        })
        .collect();
    (vec![slab, body], modes)
}

/// Three blocks stacked bottom (part 0) to top. The two upper blocks topple
/// together about a top corner of the base block, or stay.
fn stack(rng: &mut impl Rng) -> (Vec<Vec<[f64; 2]>>, Vec<Mode>) {
    let base_y = rng.gen_range(0.8..0.9);
    let cx = rng.gen_range(0.35..0.65);
    let widths = [
        rng.gen_range(0.22..0.3),
        rng.gen_range(0.15..0.21),
        rng.gen_range(0.1..0.14),
    ];
    let heights = [
        rng.gen_range(0.12..0.16),
        rng.gen_range(0.1..0.14),
        rng.gen_range(0.08..0.12),
    ];
    let mut parts = Vec::new();
    let mut y = base_y;
    let mut c = cx;
    for (i, (&w, &h)) in widths.iter().zip(&heights).enumerate() {
        if i > 0 {
            c += rng.gen_range(-0.02..0.02);
        }
        parts.push(rect(c - w / 2.0, y - h, c + w / 2.0, y));
        y -= h;
    }
    let top = base_y - heights[0];
    let left = RigidMotion::rotate(-TOPPLE_ANGLE, [cx - widths[0] / 2.0, top]);
    let right = RigidMotion::rotate(TOPPLE_ANGLE, [cx + widths[0] / 2.0, top]);
    let id = RigidMotion::IDENTITY;
    let modes = vec![
        Mode {
            weight: 0.3,
            motions: vec![id, left, left],
        },
        Mode {
            weight: 0.3,
            motions: vec![id, right, right],
        },
        Mode {
            weight: 0.4,
            motions: vec![id, id, id],
        },
    ];
    (parts, modes)
}

/// 3-5 rectangles on a coarse grid with 4-8 random joint modes.
fn multi(rng: &mut impl Rng) -> (Vec<Vec<[f64; 2]>>, Vec<Mode>) {
    let n_parts = rng.gen_range(3..=5);
    let mut cells: Vec<usize> = (0..9).collect();
    for i in 0..n_parts {
        let j = rng.gen_range(i..9);
        cells.swap(i, j);
    }
    let parts: Vec<Vec<[f64; 2]>> = cells[..n_parts]
        .iter()
        .map(|&c| {
            let (cx, cy) = (0.2 + 0.3 * (c % 3) as f64, 0.2 + 0.3 * (c / 3) as f64);
            let (hw, hh) = (rng.gen_range(0.06..0.12), rng.gen_range(0.06..0.12));
            rect(cx - hw, cy - hh, cx + hw, cy + hh)
        })
        .collect();
    let n_modes = rng.gen_range(4..=8);
    let raw: Vec<f64> = (0..n_modes).map(|_| rng.gen_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    let modes = raw
        .iter()
        .map(|w| Mode {
            weight: w / total,
            motions: parts
                .iter()
                .map(|poly| {
                    if rng.gen_bool(0.5) {
                        return RigidMotion::IDENTITY;
                    }
                    let c = [
                        (poly[0][0] + poly[2][0]) / 2.0,
                        (poly[0][1] + poly[2][1]) / 2.0,
                    ];
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    let m = rng.gen_range(0.08..0.2);
                    RigidMotion {
                        theta: rng.gen_range(-0.3..0.3),
                        pivot: c,
                        translation: [m * a.cos(), m * a.sin()],
                    }
                })
                .collect(),
        })
        .collect();
    (parts, modes)
}
