//! Token layout for poke/query streams, nested poke sets and positional encodings.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::numeric::{AttnMask, CustomOp, Graph, NumericError, Real, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("need {needed} tracked points, have {available}")]
    InsufficientTracks { needed: usize, available: usize },
    #[error("head dimension {0} is not divisible by 4")]
    HeadDim(usize),
    #[error("{features} feature rows for {positions} positions")]
    Length { features: usize, positions: usize },
    #[error("position ({0}, {1}) outside the unit square")]
    OutOfRange(f64, f64),
}

/// A known point motion: position in `[0,1]²` (x right, y down) and its flow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Poke {
    pub pos: [f64; 2],
    pub flow: [f64; 2],
}

/// Pokes `0..np` followed by `np + 1` groups of `nq` queries, group `i` conditioned
/// on the first `i` pokes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub np: usize,
    pub nq: usize,
}

impl TokenLayout {
    pub fn new(np: usize, nq: usize) -> Self {
        Self { np, nq }
    }

    pub fn num_sets(&self) -> usize {
        self.np + 1
    }

    pub fn total(&self) -> usize {
        self.np + self.num_sets() * self.nq
    }

    pub fn query_token(&self, set: usize, j: usize) -> usize {
        self.np + set * self.nq + j
    }

    /// Exact number of allowed pairs in [`build_query_causal_mask`].
    pub fn mask_nonzeros(&self) -> usize {
        let (np, nq) = (self.np, self.nq);
        np * (np + 1) / 2 + nq * (np + 1) * (np + 2) / 2
    }
}

pub fn build_query_causal_mask(layout: TokenLayout) -> AttnMask {
    let groups: Vec<(usize, usize)> = (0..layout.num_sets()).map(|i| (i, layout.nq)).collect();
    group_mask(layout.np, &groups)
}

/// Pokes attend causally among themselves; queries follow in groups of
/// `(prefix, count)` and each query sees the first `prefix` pokes and itself.
pub fn group_mask(np: usize, groups: &[(usize, usize)]) -> AttnMask {
    let mut owner = Vec::new();
    for &(prefix, count) in groups {
        owner.extend(std::iter::repeat_n(prefix.min(np), count));
    }
    let n = np + owner.len();
    AttnMask::from_fn(n, n, |r, c| {
        if r < np {
            c <= r
        } else {
            c < owner[r - np] || c == r
        }
    })
}

/// One query with its ground-truth flow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub pos: [f64; 2],
    pub flow: [f64; 2],
}

/// Ordered pokes plus, for every prefix length `i = 0..=np`, its query targets.
#[derive(Clone, Debug, PartialEq)]
pub struct NestedSets {
    pub pokes: Vec<Poke>,
    pub queries: Vec<Vec<Target>>,
}

impl NestedSets {
    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(self.pokes.len(), self.queries.first().map_or(0, Vec::len))
    }

    /// Targets flattened in token order.
    pub fn flat_targets(&self) -> Vec<Target> {
        self.queries.iter().flatten().copied().collect()
    }
}

/// Pokes are the first `np` entries of a uniform permutation of `tracks`; each set's
/// queries are drawn without replacement from the rest.
pub fn sample_nested_sets(
    tracks: &[Poke],
    np: usize,
    nq: usize,
    rng: &mut impl Rng,
) -> Result<NestedSets, LayoutError> {
    if tracks.len() < np + nq {
        return Err(LayoutError::InsufficientTracks {
            needed: np + nq,
            available: tracks.len(),
        });
    }
    let mut order: Vec<usize> = (0..tracks.len()).collect();
    order.shuffle(rng);
    let pokes = order[..np].iter().map(|&i| tracks[i]).collect();
    let rest = &order[np..];
    let queries = (0..=np)
        .map(|_| {
            rest.choose_multiple(rng, nq)
                .map(|&i| Target {
                    pos: tracks[i].pos,
                    flow: tracks[i].flow,
                })
                .collect()
        })
        .collect();
    Ok(NestedSets { pokes, queries })
}

/// `[sin(2^k π t), cos(2^k π t)]` for `t = tanh(flow)`, axis-major, length `4 * num_freq`.
pub fn fourier_embed_flow(flow: [f64; 2], num_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * num_freq);
    for v in flow {
        let t = v.tanh();
        let mut f = PI * t;
        for _ in 0..num_freq {
            out.push(f.sin());
            out.push(f.cos());
            f *= 2.0;
        }
    }
    out
}

/// Precomputed rotation angles for 2D axial rotary embeddings.
///
/// Within each head, the first half of the dimensions is rotated pairwise by
/// `x * G * w_k`, the second half by `y * G * w_k`, `w_k = base^(-4k / head_dim)`.
#[derive(Clone, Debug)]
pub struct Rope {
    heads: usize,
    head_dim: usize,
    /// `[tokens, head_dim / 2]` cos and sin, x-angles then y-angles.
    cos: Vec<f64>,
    sin: Vec<f64>,
    tokens: usize,
}

impl Rope {
    pub fn new(
        positions: &[[f64; 2]],
        heads: usize,
        head_dim: usize,
        base: f64,
        grid: usize,
    ) -> Result<Self, LayoutError> {
        if !head_dim.is_multiple_of(4) || head_dim == 0 {
            return Err(LayoutError::HeadDim(head_dim));
        }
        let quarter = head_dim / 4;
        let omega: Vec<f64> = (0..quarter)
            .map(|k| base.powf(-4.0 * k as f64 / head_dim as f64))
            .collect();
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for p in positions {
            for axis in 0..2 {
                let s = p[axis] * grid as f64;
                for w in &omega {
                    let a = s * w;
                    cos.push(a.cos());
                    sin.push(a.sin());
                }
            }
        }
        Ok(Self {
            heads,
            head_dim,
            cos,
            sin,
            tokens: positions.len(),
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    fn rotate<T: Real>(&self, x: &[T], out: &mut [T], inverse: bool) {
        let width = self.heads * self.head_dim;
        let half = self.head_dim / 2;
        for t in 0..self.tokens {
            let (c, s) = (
                &self.cos[t * half..(t + 1) * half],
                &self.sin[t * half..(t + 1) * half],
            );
            for h in 0..self.heads {
                let base = t * width + h * self.head_dim;
                for p in 0..half {
                    let (i, j) = (base + 2 * p, base + 2 * p + 1);
                    let cz = T::from_f64c(c[p]);
                    let sz = if inverse {
                        -T::from_f64c(s[p])
                    } else {
                        T::from_f64c(s[p])
                    };
                    let (a, b) = (x[i], x[j]);
                    out[i] = a * cz - b * sz;
                    out[j] = a * sz + b * cz;
                }
            }
        }
    }

    /// Rotates a `[tokens, heads * head_dim]` matrix.
    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>, NumericError> {
        let width = self.heads * self.head_dim;
        if x.shape() != [self.tokens, width] {
            return Err(NumericError::Shape(format!(
                "rope over {:?}, expected [{}, {width}]",
                x.shape(),
                self.tokens
            )));
        }
        let mut out = Tensor::zeros(x.shape());
        self.rotate(x.data(), out.data_mut(), false);
        Ok(out)
    }

    /// Records the rotation on a graph; the backward pass applies the inverse rotation.
    pub fn record<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var, NumericError> {
        let value = self.apply(g.value(x))?;
        g.custom(&[x], value, Box::new(self.clone()))
    }
}

impl<T: Real> CustomOp<T> for Rope {
    fn name(&self) -> &'static str {
        "rope"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>> {
        let mut d = Tensor::zeros(grad.shape());
        self.rotate(grad.data(), d.data_mut(), true);
        vec![Some(d)]
    }
}

/// Free-function form over plain per-token vectors.
pub fn rope_apply(
    features: &[Vec<f64>],
    positions: &[[f64; 2]],
    heads: usize,
    base: f64,
    grid: usize,
) -> Result<Vec<Vec<f64>>, LayoutError> {
    if features.len() != positions.len() {
        return Err(LayoutError::Length {
            features: features.len(),
            positions: positions.len(),
        });
    }
    let width = features.first().map_or(0, Vec::len);
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(LayoutError::HeadDim(width));
    }
    let rope = Rope::new(positions, heads, width / heads, base, grid)?;
    let flat: Vec<f64> = features.iter().flatten().copied().collect();
    let t = Tensor::new(vec![features.len(), width], flat).expect("rows of equal width");
    let out = rope.apply(&t).expect("shape checked above");
    Ok((0..features.len()).map(|r| out.row(r).to_vec()).collect())
}

pub fn check_unit(p: [f64; 2]) -> Result<(), LayoutError> {
    if (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]) {
        Ok(())
    } else {
        Err(LayoutError::OutOfRange(p[0], p[1]))
    }
}

#[cfg(test)]
mod tests;
