use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{binned_curve, miou, pearson, CurveBin};
use super::{grid_points, InferError, Scene};
use crate::gmm::{Gmm2, Mode};
use crate::layout::{Poke, Target};
use crate::model::ModelParams;
use crate::synth::{Dataset, RigidMotion, SceneSpec, Template};

/// A held-out prediction problem: one scene, a poke set and queries with
/// their observed flows.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub scene: usize,
    pub pokes: Vec<Poke>,
    pub queries: Vec<Target>,
}

/// For every stored episode and every count `n` in `poke_counts`, the first
/// `n` tracks become pokes and the next `nq` the queries.
pub fn eval_items(
    data: &Dataset,
    templates: Option<&[Template]>,
    poke_counts: &[usize],
    nq: usize,
) -> Vec<EvalItem> {
    let mut items = Vec::new();
    for (i, s) in data.scenes.iter().enumerate() {
        if templates.is_some_and(|t| !t.contains(&s.spec.template)) {
            continue;
        }
        for ep in &s.episodes {
            for &n in poke_counts {
                if n + nq > ep.tracks.len() {
                    continue;
                }
                let queries = ep.tracks[n..n + nq]
                    .iter()
                    .map(|t| Target {
                        pos: t.pos,
                        flow: t.flow,
                    })
                    .collect();
                items.push(EvalItem {
                    scene: i,
                    pokes: ep.tracks[..n].to_vec(),
                    queries,
                });
            }
        }
    }
    items
}

/// Predictions for every item, encoding each scene's image once.
pub fn predict_items(
    params: &ModelParams,
    data: &Dataset,
    items: &[EvalItem],
) -> Result<Vec<Vec<Gmm2>>, InferError> {
    let mut cached: Option<(usize, Scene)> = None;
    let mut out = Vec::with_capacity(items.len());
    for it in items {
        if cached.as_ref().map(|c| c.0) != Some(it.scene) {
            let rec = data
                .scenes
                .get(it.scene)
                .ok_or_else(|| InferError::Input(format!("no scene {}", it.scene)))?;
            cached = Some((it.scene, Scene::new(params, &rec.raster)?));
        }
        let scene = &cached.as_ref().expect("set above").1;
        let qs: Vec<[f64; 2]> = it.queries.iter().map(|t| t.pos).collect();
        out.push(scene.predict(&it.pokes, &qs)?);
    }
    Ok(out)
}

/// Components merged greedily, heaviest first. A component joins the first
/// cluster whose founding member lies within twice the smaller principal std
/// of the two: two equal Gaussians that close have one density maximum.
/// Clusters keep the founder's index and mean and are sorted by weight.
pub fn merged_modes(g: &Gmm2) -> Vec<Mode> {
    let mut out: Vec<(Mode, f64)> = Vec::new();
    for m in g.modes() {
        let s = principal_std(g.component(m.index).cov);
        match out
            .iter_mut()
            .find(|(c, cs)| dist(c.mean, m.mean) <= 2.0 * s.min(*cs))
        {
            Some((c, _)) => c.weight += m.weight,
            None => out.push((m, s)),
        }
    }
    let mut modes: Vec<Mode> = out.into_iter().map(|(m, _)| m).collect();
    modes.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    modes
}

fn principal_std(c: [[f64; 2]; 2]) -> f64 {
    let (tr, det) = (c[0][0] + c[1][1], c[0][0] * c[1][1] - c[0][1] * c[1][0]);
    (0.5 * tr + (0.25 * tr * tr - det).max(0.0).sqrt()).sqrt()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopWeightRow {
    pub pokes: usize,
    pub top_weight: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub k: usize,
    pub n_queries: usize,
    /// Weights and distances below are over [`merged_modes`].
    ///
    /// Mean of the largest distance between mode means with weight > 0.05,
    /// divided by the mean poke magnitude. Queries whose pokes barely move are
    /// left out.
    pub diversity: Option<f64>,
    pub diversity_by_template: BTreeMap<String, f64>,
    pub top_weight_vs_pokes: Vec<TopWeightRow>,
    pub nearest_weight: f64,
    /// Same as `nearest_weight` over raw components.
    pub nearest_component_weight: f64,
    pub mean_component_weight: f64,
    pub pck_top1: f64,
    pub pck_nearest: f64,
    pub alpha: f64,
}

pub fn mode_report(
    data: &Dataset,
    items: &[EvalItem],
    preds: &[Vec<Gmm2>],
    alpha: f64,
) -> Result<ModeReport, InferError> {
    if items.len() != preds.len() {
        return Err(InferError::Length(items.len(), preds.len()));
    }
    let mut k = 0;
    let mut n = 0usize;
    let (mut nearest_w, mut nearest_cw, mut top_hits, mut near_hits) = (0.0, 0.0, 0usize, 0usize);
    let mut div: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut by_pokes: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (it, ps) in items.iter().zip(preds) {
        if ps.len() != it.queries.len() {
            return Err(InferError::Length(ps.len(), it.queries.len()));
        }
        let template = data.scenes[it.scene].spec.template.name().to_string();
        let scale = if it.pokes.is_empty() {
            0.0
        } else {
            it.pokes
                .iter()
                .map(|p| p.flow[0].hypot(p.flow[1]))
                .sum::<f64>()
                / it.pokes.len() as f64
        };
        for (q, g) in it.queries.iter().zip(ps) {
            k = g.k();
            n += 1;
            let closest = |ms: &[Mode]| {
                *ms.iter()
                    .min_by(|a, b| dist(a.mean, q.flow).total_cmp(&dist(b.mean, q.flow)))
                    .expect("k ≥ 1")
            };
            nearest_cw += closest(&g.modes()).weight;
            let modes = merged_modes(g);
            let top = &modes[0];
            let e = by_pokes.entry(it.pokes.len()).or_default();
            e.0 += top.weight;
            e.1 += 1;
            let nearest = closest(&modes);
            nearest_w += nearest.weight;
            top_hits += (dist(top.mean, q.flow) < alpha) as usize;
            near_hits += (dist(nearest.mean, q.flow) < alpha) as usize;
            if scale > 1e-3 {
                let sig: Vec<_> = modes.iter().filter(|m| m.weight > 0.05).collect();
                let mut spread: f64 = 0.0;
                for a in &sig {
                    for b in &sig {
                        spread = spread.max(dist(a.mean, b.mean));
                    }
                }
                let d = div.entry(template.clone()).or_default();
                d.0 += spread / scale;
                d.1 += 1;
            }
        }
    }
    if n == 0 {
        return Err(InferError::Empty);
    }
    let total_div: (f64, usize) = div.values().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(ModeReport {
        k,
        n_queries: n,
        diversity: (total_div.1 > 0).then(|| total_div.0 / total_div.1 as f64),
        diversity_by_template: div
            .into_iter()
            .map(|(t, (s, c))| (t, s / c as f64))
            .collect(),
        top_weight_vs_pokes: by_pokes
            .into_iter()
            .map(|(pokes, (s, c))| TopWeightRow {
                pokes,
                top_weight: s / c as f64,
                count: c,
            })
            .collect(),
        nearest_weight: nearest_w / n as f64,
        nearest_component_weight: nearest_cw / n as f64,
        mean_component_weight: 1.0 / k as f64,
        pck_top1: top_hits as f64 / n as f64,
        pck_nearest: near_hits as f64 / n as f64,
        alpha,
    })
}

pub const MIN_CALIBRATION_PAIRS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBlock {
    pub pairs: usize,
    pub pearson_rho: f64,
    pub curve: Vec<CurveBin>,
}

impl CalibrationBlock {
    /// `x` is predicted spread, `y` the endpoint error of the predicted mean.
    pub fn from_pairs(x: &[f64], y: &[f64]) -> Result<Self, InferError> {
        if x.len() < MIN_CALIBRATION_PAIRS {
            return Err(InferError::TooFewPairs {
                need: MIN_CALIBRATION_PAIRS,
                got: x.len(),
            });
        }
        Ok(Self {
            pairs: x.len(),
            pearson_rho: pearson(x, y)?,
            curve: binned_curve(x, y, 10),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub all: CalibrationBlock,
    /// At most two pokes.
    pub low: CalibrationBlock,
    /// At least eight pokes.
    pub high: CalibrationBlock,
}

pub fn calibration_report(
    items: &[EvalItem],
    preds: &[Vec<Gmm2>],
) -> Result<CalibrationReport, InferError> {
    if items.len() != preds.len() {
        return Err(InferError::Length(items.len(), preds.len()));
    }
    let mut all = (Vec::new(), Vec::new());
    let mut low = (Vec::new(), Vec::new());
    let mut high = (Vec::new(), Vec::new());
    for (it, ps) in items.iter().zip(preds) {
        for (q, g) in it.queries.iter().zip(ps) {
            let (x, y) = (g.std(), dist(g.mean(), q.flow));
            all.0.push(x);
            all.1.push(y);
            let np = it.pokes.len();
            let bucket = if np <= 2 {
                Some(&mut low)
            } else if np >= 8 {
                Some(&mut high)
            } else {
                None
            };
            if let Some(b) = bucket {
                b.0.push(x);
                b.1.push(y);
            }
        }
    }
    Ok(CalibrationReport {
        all: CalibrationBlock::from_pairs(&all.0, &all.1)?,
        low: CalibrationBlock::from_pairs(&low.0, &low.1)?,
        high: CalibrationBlock::from_pairs(&high.0, &high.1)?,
    })
}

/// A segmentation problem: a poke that pins one mode, and the cells of the
/// parts that move under it.
#[derive(Clone, Debug, PartialEq)]
pub struct SegCase {
    pub scene: usize,
    pub poke: Poke,
    pub truth: Vec<bool>,
}

/// Probe for a scene: hinge pokes the door in the mode where only the door
/// swings, drawer pokes the slab fully pulled, stack pokes the top block
/// toppling one way. The poke sits at the interior cell of the largest flow,
/// so it is unambiguous which part was touched.
pub fn probe_for(spec: &SceneSpec, r: usize) -> Option<(Poke, Vec<bool>)> {
    let (part, mode) = match spec.template {
        Template::Hinge => (0, 1),
        Template::Drawer => (0, 2),
        Template::Stack => (spec.parts.len() - 1, 1),
        Template::Multi => return None,
    };
    let cells = grid_points(r);
    let truth: Vec<bool> = cells
        .iter()
        .map(|&c| {
            spec.part_at(c)
                .is_some_and(|j| spec.modes[mode].motions[j] != RigidMotion::IDENTITY)
        })
        .collect();
    let mut inner = inner_cells(spec, part, r);
    if inner.is_empty() {
        // grid too coarse for an interior cell
        inner = grid_points(r)
            .into_iter()
            .filter(|&c| spec.part_at(c) == Some(part))
            .collect();
    }
    let pos = inner.iter().max_by(|a, b| {
        let fa = spec.mode_flow(mode, **a);
        let fb = spec.mode_flow(mode, **b);
        fa[0].hypot(fa[1]).total_cmp(&fb[0].hypot(fb[1]))
    })?;
    Some((
        Poke {
            pos: *pos,
            flow: spec.mode_flow(mode, *pos),
        },
        truth,
    ))
}

/// Cells of an `r × r` grid whose 3×3 neighbourhood lies inside `part`.
pub fn inner_cells(spec: &SceneSpec, part: usize, r: usize) -> Vec<[f64; 2]> {
    let h = 1.0 / r as f64;
    grid_points(r)
        .into_iter()
        .filter(|&c| {
            (-1..=1).all(|dy| {
                (-1..=1).all(|dx| {
                    spec.part_at([c[0] + dx as f64 * h, c[1] + dy as f64 * h]) == Some(part)
                })
            })
        })
        .collect()
}

pub fn segmentation_cases(data: &Dataset, templates: &[Template], r: usize) -> Vec<SegCase> {
    data.scenes
        .iter()
        .enumerate()
        .filter(|(_, s)| templates.contains(&s.spec.template))
        .filter_map(|(i, s)| {
            probe_for(&s.spec, r).map(|(poke, truth)| SegCase {
                scene: i,
                poke,
                truth,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationEval {
    pub threshold: f64,
    pub miou: f64,
    pub miou_half: f64,
    pub miou_double: f64,
    pub cases: usize,
}

fn masks_at(heats: &[Vec<f64>], t: f64) -> Vec<Vec<bool>> {
    heats
        .iter()
        .map(|h| h.iter().map(|&v| v > t).collect())
        .collect()
}

pub fn segmentation_heats(
    params: &ModelParams,
    data: &Dataset,
    cases: &[SegCase],
    r: usize,
) -> Result<Vec<Vec<f64>>, InferError> {
    cases
        .iter()
        .map(|c| Scene::new(params, &data.scenes[c.scene].raster)?.heat(c.poke, r))
        .collect()
}

pub fn segmentation_eval(
    heats: &[Vec<f64>],
    cases: &[SegCase],
    threshold: f64,
) -> Result<SegmentationEval, InferError> {
    let truth: Vec<Vec<bool>> = cases.iter().map(|c| c.truth.clone()).collect();
    let at = |t: f64| miou(&masks_at(heats, t), &truth);
    Ok(SegmentationEval {
        threshold,
        miou: at(threshold)?,
        miou_half: at(threshold / 2.0)?,
        miou_double: at(threshold * 2.0)?,
        cases: cases.len(),
    })
}

/// Picks, from a log-spaced grid, the threshold whose worst mIoU over
/// `{t/2, t, 2t}` is highest.
pub fn calibrate_threshold(heats: &[Vec<f64>], cases: &[SegCase]) -> Result<f64, InferError> {
    let mut best: Option<(f64, f64)> = None;
    for i in 0..40 {
        let t = 0.02 * 1.15f64.powi(i);
        let e = segmentation_eval(heats, cases, t)?;
        let worst = e.miou.min(e.miou_half).min(e.miou_double);
        if best.is_none_or(|(w, _)| worst > w) {
            best = Some((worst, t));
        }
    }
    best.map(|b| b.1).ok_or(InferError::Empty)
}

/// Matched-bound heat of the exact conditional, with duplicate components
/// merged so that identical marginals score zero.
pub fn oracle_heat(spec: &SceneSpec, poke: Poke, r: usize) -> Result<Vec<f64>, InferError> {
    let post = spec.gt_posterior(&[poke])?;
    let prior = spec.prior();
    grid_points(r)
        .into_iter()
        .map(|c| {
            let f = spec.conditional_with(&post, c)?.merge_duplicates();
            let g = spec.conditional_with(&prior, c)?.merge_duplicates();
            Ok(crate::gmm::gmm_kl_matched(&f, &g))
        })
        .collect()
}
