use std::collections::HashMap;
use std::sync::Arc;

use super::{ModelConfig, ModelError, ModelParams};
use crate::layout::{check_unit, fourier_embed_flow, group_mask, NestedSets, Poke, Rope};
use crate::numeric::{AttnBlock, AttnMask, Graph, Real, Tensor, Var};
use crate::synth::SceneRaster;

const EPS: f64 = 1e-6;

/// Parameters registered on one graph.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn bind<T: Real>(g: &mut Graph<T>, params: &ModelParams, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(n, t)| {
                let t = t.cast::<T>();
                (
                    n.clone(),
                    if trainable { g.param(t) } else { g.constant(t) },
                )
            })
            .collect();
        Self { vars }
    }

    /// Binds 64-bit copies, for verification.
    pub fn bind_f64(
        g: &mut Graph<f64>,
        tensors: &HashMap<String, Tensor<f64>>,
        trainable: bool,
    ) -> Self {
        let vars = tensors
            .iter()
            .map(|(n, t)| {
                (
                    n.clone(),
                    if trainable {
                        g.param(t.clone())
                    } else {
                        g.constant(t.clone())
                    },
                )
            })
            .collect();
        Self { vars }
    }

    pub fn from_vars(names: &[String], vars: &[Var]) -> Self {
        Self {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// One scene's decoder stream: pokes, then query groups `(prefix, positions)`
/// where every query sees the first `prefix` pokes.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderInput {
    pub pokes: Vec<Poke>,
    pub groups: Vec<(usize, Vec<[f64; 2]>)>,
    pub static_flag: bool,
}

impl DecoderInput {
    /// Teacher-forced nested sets: group `i` conditions on the first `i` pokes.
    pub fn nested(sets: &NestedSets, static_flag: bool) -> Self {
        let groups = sets
            .queries
            .iter()
            .enumerate()
            .map(|(i, q)| (i, q.iter().map(|t| t.pos).collect()))
            .collect();
        Self {
            pokes: sets.pokes.clone(),
            groups,
            static_flag,
        }
    }

    /// All queries conditioned on all pokes.
    pub fn single(pokes: &[Poke], queries: &[[f64; 2]], static_flag: bool) -> Self {
        Self {
            pokes: pokes.to_vec(),
            groups: vec![(pokes.len(), queries.to_vec())],
            static_flag,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.groups.iter().map(|(_, q)| q.len()).sum()
    }

    pub fn num_tokens(&self) -> usize {
        self.pokes.len() + self.num_queries()
    }

    pub fn mask(&self) -> AttnMask {
        let shape: Vec<(usize, usize)> = self.groups.iter().map(|(p, q)| (*p, q.len())).collect();
        group_mask(self.pokes.len(), &shape)
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        for p in &self.pokes {
            check_unit(p.pos)?;
            if !(p.flow[0].is_finite() && p.flow[1].is_finite()) {
                return Err(ModelError::Input("non-finite poke flow".into()));
            }
        }
        for (prefix, qs) in &self.groups {
            if *prefix > self.pokes.len() {
                return Err(ModelError::Input(format!(
                    "query prefix {prefix} exceeds {} pokes",
                    self.pokes.len()
                )));
            }
            for &q in qs {
                check_unit(q)?;
            }
        }
        if self.num_tokens() > cfg.max_context {
            return Err(ModelError::Input(format!(
                "{} tokens exceed the context budget {}",
                self.num_tokens(),
                cfg.max_context
            )));
        }
        Ok(())
    }
}

/// Bilinear weights of the `grid x grid` token lattice (centres at `(i + 0.5) / grid`)
/// at `p`, as `(token index, weight)` pairs.
pub fn bilinear_weights(p: [f64; 2], grid: usize) -> Vec<(usize, f64)> {
    if grid == 1 {
        return vec![(0, 1.0)];
    }
    let axis = |v: f64| {
        let u = (v * grid as f64 - 0.5).clamp(0.0, (grid - 1) as f64);
        let i0 = (u.floor() as usize).min(grid - 2);
        (i0, u - i0 as f64)
    };
    let (x0, fx) = axis(p[0]);
    let (y0, fy) = axis(p[1]);
    let mut out = Vec::with_capacity(4);
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            out.push(((y0 + dy) * grid + x0 + dx, wy * wx));
        }
    }
    out
}

/// Bilinear interpolation of one scene's `[grid², width]` tokens.
pub fn image_feature_at(
    tokens: &Tensor<f32>,
    grid: usize,
    p: [f64; 2],
) -> Result<Vec<f32>, ModelError> {
    check_unit(p)?;
    let w = tokens.cols();
    let mut out = vec![0f32; w];
    for (i, wt) in bilinear_weights(p, grid) {
        for (o, &t) in out.iter_mut().zip(tokens.row(i)) {
            *o += wt as f32 * t;
        }
    }
    Ok(out)
}

fn token_centres(grid: usize) -> Vec<[f64; 2]> {
    (0..grid * grid)
        .map(|i| {
            [
                ((i % grid) as f64 + 0.5) / grid as f64,
                ((i / grid) as f64 + 0.5) / grid as f64,
            ]
        })
        .collect()
}

fn patches<T: Real>(
    raster: &SceneRaster,
    cfg: &ModelConfig,
    out: &mut Vec<T>,
) -> Result<(), ModelError> {
    let (s, p, c) = (cfg.image_size, cfg.patch_size, cfg.channels);
    if raster.size != s || raster.channels != c || raster.data.len() != c * s * s {
        return Err(ModelError::Input(format!(
            "raster {}x{}x{}, model expects {c}x{s}x{s}",
            raster.channels, raster.size, raster.size
        )));
    }
    let g = s / p;
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        out.push(T::from_f64c(raster.at(ch, gy * p + dy, gx * p + dx) as f64));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Graph-building context for one forward pass.
pub struct Forward<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    pub p: &'a Bound,
    pub cfg: &'a ModelConfig,
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn new(g: &'a mut Graph<T>, p: &'a Bound, cfg: &'a ModelConfig) -> Self {
        Self { g, p, cfg }
    }

    fn lin(&mut self, x: Var, name: &str) -> Result<Var, ModelError> {
        Ok(self.g.matmul(x, self.p.var(name))?)
    }

    fn norm(&mut self, x: Var, gain: &str) -> Result<Var, ModelError> {
        let n = self.g.rms_norm(x, T::from_f64c(EPS))?;
        Ok(self.g.mul(n, self.p.var(gain))?)
    }

    /// RMS norm with per-token gain and shift rows picked by the static flag.
    fn adanorm(&mut self, x: Var, name: &str, flags: &[usize]) -> Result<Var, ModelError> {
        let n = self.g.rms_norm(x, T::from_f64c(EPS))?;
        let gain = self
            .g
            .gather_rows(self.p.var(&format!("{name}.gain")), flags)?;
        let shift = self
            .g
            .gather_rows(self.p.var(&format!("{name}.shift")), flags)?;
        let scaled = self.g.mul(n, gain)?;
        Ok(self.g.add(scaled, shift)?)
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let a = self.lin(x, &format!("{prefix}.w1"))?;
        let b = self.lin(x, &format!("{prefix}.w3"))?;
        let h = self.g.silu_gate(a, b)?;
        self.lin(h, &format!("{prefix}.w2"))
    }

    /// `[B * G², width]` image tokens for a batch of rasters.
    pub fn encode(&mut self, rasters: &[&SceneRaster]) -> Result<Var, ModelError> {
        let cfg = self.cfg;
        let grid = cfg.grid();
        let n = grid * grid;
        let mut data = Vec::new();
        for r in rasters {
            patches(r, cfg, &mut data)?;
        }
        let cols = cfg.channels * cfg.patch_size * cfg.patch_size;
        let x = self
            .g
            .constant(Tensor::new(vec![rasters.len() * n, cols], data)?);
        let x = self.lin(x, "enc.patch.w")?;
        let mut x = self.g.add(x, self.p.var("enc.patch.b"))?;
        let centres = token_centres(grid);
        let pos: Vec<[f64; 2]> = (0..rasters.len())
            .flat_map(|_| centres.iter().copied())
            .collect();
        let rope = Rope::new(&pos, cfg.heads, cfg.head_dim(), cfg.rope_base, grid)?;
        let blocks: Vec<AttnBlock> = (0..rasters.len())
            .map(|b| AttnBlock {
                q_start: b * n,
                q_len: n,
                k_start: b * n,
                k_len: n,
                mask: None,
            })
            .collect();
        for i in 0..cfg.encoder_depth {
            let h = self.norm(x, &format!("enc.{i}.norm1"))?;
            let q = self.lin(h, &format!("enc.{i}.attn.wq"))?;
            let k = self.lin(h, &format!("enc.{i}.attn.wk"))?;
            let v = self.lin(h, &format!("enc.{i}.attn.wv"))?;
            let (q, k) = (rope.record(self.g, q)?, rope.record(self.g, k)?);
            let a = self.g.attention_blocks(q, k, v, cfg.heads, &blocks)?;
            let a = self.lin(a, &format!("enc.{i}.attn.wo"))?;
            x = self.g.add(x, a)?;
            let h = self.norm(x, &format!("enc.{i}.norm2"))?;
            let f = self.ffn(h, &format!("enc.{i}.ffn"))?;
            x = self.g.add(x, f)?;
        }
        self.norm(x, "enc.norm")
    }

    /// Poke tokens from flow embeddings and bilinear image features.
    /// `image_rows[i]` is the first image-token row of poke `i`'s scene.
    fn poke_tokens(
        &mut self,
        pokes: &[Poke],
        image_rows: &[usize],
        image: Var,
    ) -> Result<Var, ModelError> {
        let cfg = self.cfg;
        let grid = cfg.grid();
        let nf = cfg.num_freq;
        let fourier: Vec<T> = pokes
            .iter()
            .flat_map(|p| fourier_embed_flow(p.flow, nf))
            .map(T::from_f64c)
            .collect();
        let f = self
            .g
            .constant(Tensor::new(vec![pokes.len(), 4 * nf], fourier)?);
        let total_rows = self.g.value(image).rows();
        let mut interp = Tensor::zeros(&[pokes.len(), total_rows]);
        for (r, (p, &base)) in pokes.iter().zip(image_rows).enumerate() {
            for (i, w) in bilinear_weights(p.pos, grid) {
                interp.data_mut()[r * total_rows + base + i] += T::from_f64c(w);
            }
        }
        let interp = self.g.constant(interp);
        let feat = self.g.matmul(interp, image)?;
        let a1 = self.lin(f, "poke.a_flow")?;
        let a2 = self.lin(feat, "poke.a_img")?;
        let a = self.g.add(a1, a2)?;
        let b1 = self.lin(f, "poke.b_flow")?;
        let b2 = self.lin(feat, "poke.b_img")?;
        let b = self.g.add(b1, b2)?;
        let h = self.g.silu_gate(a, b)?;
        self.lin(h, "poke.out")
    }

    /// Cross-attention keys and values of image tokens for every decoder layer.
    fn cross_kv(&mut self, image: Var, image_rope: &Rope) -> Result<Vec<(Var, Var)>, ModelError> {
        (0..self.cfg.depth)
            .map(|i| {
                let k = self.lin(image, &format!("dec.{i}.cross.wk"))?;
                let k = image_rope.record(self.g, k)?;
                let v = self.lin(image, &format!("dec.{i}.cross.wv"))?;
                Ok((k, v))
            })
            .collect()
    }

    /// One decoder block. Self-attention keys are `prefix` rows (if any) followed
    /// by the block's own rows; returns the output and the block's own keys/values.
    #[allow(clippy::too_many_arguments)]
    fn block(
        &mut self,
        i: usize,
        x: Var,
        flags: &[usize],
        rope: &Rope,
        prefix: Option<(Var, Var)>,
        self_blocks: &[AttnBlock],
        cross: (Var, Var),
        cross_blocks: &[AttnBlock],
    ) -> Result<(Var, Var, Var), ModelError> {
        let heads = self.cfg.heads;
        let h = self.adanorm(x, &format!("dec.{i}.norm1"), flags)?;
        let q = self.lin(h, &format!("dec.{i}.self.wq"))?;
        let k = self.lin(h, &format!("dec.{i}.self.wk"))?;
        let v = self.lin(h, &format!("dec.{i}.self.wv"))?;
        let (q, k) = (rope.record(self.g, q)?, rope.record(self.g, k)?);
        let (kk, vv) = match prefix {
            Some((pk, pv)) => (self.g.concat_rows(&[pk, k])?, self.g.concat_rows(&[pv, v])?),
            None => (k, v),
        };
        let a = self.g.attention_blocks(q, kk, vv, heads, self_blocks)?;
        let a = self.lin(a, &format!("dec.{i}.self.wo"))?;
        let x = self.g.add(x, a)?;
        let h = self.adanorm(x, &format!("dec.{i}.norm2"), flags)?;
        let q = self.lin(h, &format!("dec.{i}.cross.wq"))?;
        let q = rope.record(self.g, q)?;
        let c = self
            .g
            .attention_blocks(q, cross.0, cross.1, heads, cross_blocks)?;
        let c = self.lin(c, &format!("dec.{i}.cross.wo"))?;
        let x = self.g.add(x, c)?;
        let h = self.adanorm(x, &format!("dec.{i}.norm3"), flags)?;
        let f = self.ffn(h, &format!("dec.{i}.ffn"))?;
        Ok((self.g.add(x, f)?, k, v))
    }

    fn head(&mut self, x: Var, flags: &[usize]) -> Result<Var, ModelError> {
        let h = self.adanorm(x, "dec.norm", flags)?;
        let a = self.lin(h, "head.w1")?;
        let b = self.lin(h, "head.w3")?;
        let h = self.g.silu_gate(a, b)?;
        let r = self.lin(h, "head.w2")?;
        Ok(self.g.add(r, self.p.var("head.b"))?)
    }

    /// Raw mixture parameters `[total queries, 6K]`, scenes in order, queries in
    /// group order. `image` holds `G²` rows per scene.
    pub fn decode(&mut self, image: Var, inputs: &[DecoderInput]) -> Result<Var, ModelError> {
        let cfg = self.cfg;
        let grid = cfg.grid();
        let n_img = grid * grid;
        if self.g.value(image).rows() != inputs.len() * n_img {
            return Err(ModelError::Input(
                "image tokens do not match the scene count".into(),
            ));
        }
        for inp in inputs {
            inp.validate(cfg)?;
        }
        let all_pokes: Vec<Poke> = inputs
            .iter()
            .flat_map(|s| s.pokes.iter().copied())
            .collect();
        let image_rows: Vec<usize> = inputs
            .iter()
            .enumerate()
            .flat_map(|(b, s)| std::iter::repeat_n(b * n_img, s.pokes.len()))
            .collect();
        let n_queries: usize = inputs.iter().map(DecoderInput::num_queries).sum();
        if n_queries == 0 {
            return Err(ModelError::Input("no queries".into()));
        }
        let query_tok = self
            .g
            .gather_rows(self.p.var("query.emb"), &vec![0; n_queries])?;
        let stacked = if all_pokes.is_empty() {
            query_tok
        } else {
            let pt = self.poke_tokens(&all_pokes, &image_rows, image)?;
            self.g.concat_rows(&[pt, query_tok])?
        };
        // Reorder into per-scene streams [pokes_b, queries_b].
        let np_total = all_pokes.len();
        let (mut order, mut pos, mut flags, mut query_rows) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let (mut self_blocks, mut cross_blocks) = (Vec::new(), Vec::new());
        let (mut pi, mut qi) = (0, 0);
        for (b, inp) in inputs.iter().enumerate() {
            let start = order.len();
            let flag = inp.static_flag as usize;
            for p in &inp.pokes {
                order.push(pi);
                pos.push(p.pos);
                pi += 1;
            }
            for (_, qs) in &inp.groups {
                for &q in qs {
                    query_rows.push(order.len());
                    order.push(np_total + qi);
                    pos.push(q);
                    qi += 1;
                }
            }
            let len = order.len() - start;
            flags.extend(std::iter::repeat_n(flag, len));
            self_blocks.push(AttnBlock {
                q_start: start,
                q_len: len,
                k_start: start,
                k_len: len,
                mask: Some(Arc::new(inp.mask())),
            });
            cross_blocks.push(AttnBlock {
                q_start: start,
                q_len: len,
                k_start: b * n_img,
                k_len: n_img,
                mask: None,
            });
        }
        let mut x = self.g.gather_rows(stacked, &order)?;
        let rope = Rope::new(&pos, cfg.heads, cfg.head_dim(), cfg.rope_base, grid)?;
        let img_pos: Vec<[f64; 2]> = (0..inputs.len())
            .flat_map(|_| token_centres(grid))
            .collect();
        let img_rope = Rope::new(&img_pos, cfg.heads, cfg.head_dim(), cfg.rope_base, grid)?;
        let cross = self.cross_kv(image, &img_rope)?;
        for (i, &kv) in cross.iter().enumerate() {
            x = self
                .block(i, x, &flags, &rope, None, &self_blocks, kv, &cross_blocks)?
                .0;
        }
        let xq = self.g.gather_rows(x, &query_rows)?;
        let qflags: Vec<usize> = query_rows.iter().map(|&r| flags[r]).collect();
        self.head(xq, &qflags)
    }
}

/// Encoded image tokens of one scene, reusable across requests.
#[derive(Clone, Debug)]
pub struct ImageCache {
    pub tokens: Tensor<f32>,
}

impl ImageCache {
    pub fn encode(params: &ModelParams, raster: &SceneRaster) -> Result<Self, ModelError> {
        let mut g = Graph::<f32>::new();
        let p = Bound::bind(&mut g, params, false);
        let t = Forward::new(&mut g, &p, &params.config).encode(&[raster])?;
        Ok(Self {
            tokens: g.value(t).clone(),
        })
    }
}

/// Key/value cache over a growing poke prefix. Adding pokes and querying
/// reproduces the full masked pass exactly, because pokes only ever see earlier
/// pokes.
pub struct Incremental<'a> {
    params: &'a ModelParams,
    image: Tensor<f32>,
    flag: usize,
    keys: Vec<Tensor<f32>>,
    values: Vec<Tensor<f32>>,
    cross: Vec<(Tensor<f32>, Tensor<f32>)>,
    pokes: usize,
}

impl<'a> Incremental<'a> {
    pub fn new(
        params: &'a ModelParams,
        image: &ImageCache,
        static_flag: bool,
    ) -> Result<Self, ModelError> {
        let cfg = &params.config;
        let mut g = Graph::<f32>::new();
        let p = Bound::bind(&mut g, params, false);
        let img = g.constant(image.tokens.clone());
        let grid = cfg.grid();
        let img_rope = Rope::new(
            &token_centres(grid),
            cfg.heads,
            cfg.head_dim(),
            cfg.rope_base,
            grid,
        )?;
        let mut f = Forward::new(&mut g, &p, cfg);
        let kv = f.cross_kv(img, &img_rope)?;
        let cross = kv
            .iter()
            .map(|&(k, v)| (g.value(k).clone(), g.value(v).clone()))
            .collect();
        let empty = || Tensor::zeros(&[0, cfg.width]);
        Ok(Self {
            params,
            image: image.tokens.clone(),
            flag: static_flag as usize,
            keys: (0..cfg.depth).map(|_| empty()).collect(),
            values: (0..cfg.depth).map(|_| empty()).collect(),
            cross,
            pokes: 0,
        })
    }

    pub fn num_pokes(&self) -> usize {
        self.pokes
    }

    /// Runs new tokens (pokes then queries) against the cache. Pokes attend
    /// causally; queries see every poke and themselves.
    fn run(
        &mut self,
        pokes: &[Poke],
        queries: &[[f64; 2]],
    ) -> Result<Option<Tensor<f32>>, ModelError> {
        let cfg = &self.params.config;
        let grid = cfg.grid();
        for p in pokes {
            check_unit(p.pos)?;
        }
        for &q in queries {
            check_unit(q)?;
        }
        if self.pokes + pokes.len() + queries.len() > cfg.max_context {
            return Err(ModelError::Input(format!(
                "context budget {} exceeded",
                cfg.max_context
            )));
        }
        let mut g = Graph::<f32>::new();
        let p = Bound::bind(&mut g, self.params, false);
        let img = g.constant(self.image.clone());
        let mut f = Forward::new(&mut g, &p, cfg);
        let mut parts = Vec::new();
        if !pokes.is_empty() {
            parts.push(f.poke_tokens(pokes, &vec![0; pokes.len()], img)?);
        }
        if !queries.is_empty() {
            parts.push(f.g.gather_rows(f.p.var("query.emb"), &vec![0; queries.len()])?);
        }
        let mut x = f.g.concat_rows(&parts)?;
        let n = pokes.len() + queries.len();
        let pos: Vec<[f64; 2]> = pokes
            .iter()
            .map(|p| p.pos)
            .chain(queries.iter().copied())
            .collect();
        let rope = Rope::new(&pos, cfg.heads, cfg.head_dim(), cfg.rope_base, grid)?;
        let (c, np) = (self.pokes, pokes.len());
        let mask = AttnMask::from_fn(n, c + n, |r, col| {
            if col < c + np {
                r >= np || col <= c + r
            } else {
                col == c + r
            }
        });
        let self_blocks = [AttnBlock {
            q_start: 0,
            q_len: n,
            k_start: 0,
            k_len: c + n,
            mask: Some(Arc::new(mask)),
        }];
        let cross_blocks = [AttnBlock {
            q_start: 0,
            q_len: n,
            k_start: 0,
            k_len: grid * grid,
            mask: None,
        }];
        let flags = vec![self.flag; n];
        let mut new_kv = Vec::new();
        for i in 0..cfg.depth {
            let prefix = if c > 0 {
                Some((
                    f.g.constant(self.keys[i].clone()),
                    f.g.constant(self.values[i].clone()),
                ))
            } else {
                None
            };
            let ck = f.g.constant(self.cross[i].0.clone());
            let cv = f.g.constant(self.cross[i].1.clone());
            let (out, k, v) = f.block(
                i,
                x,
                &flags,
                &rope,
                prefix,
                &self_blocks,
                (ck, cv),
                &cross_blocks,
            )?;
            new_kv.push((k, v));
            x = out;
        }
        let raw = if queries.is_empty() {
            None
        } else {
            let rows: Vec<usize> = (np..n).collect();
            let xq = f.g.gather_rows(x, &rows)?;
            let h = f.head(xq, &vec![self.flag; queries.len()])?;
            Some(f.g.value(h).clone())
        };
        if np > 0 {
            for (i, (k, v)) in new_kv.into_iter().enumerate() {
                let take = |t: &Tensor<f32>| t.data()[..np * cfg.width].to_vec();
                let mut kd = std::mem::replace(&mut self.keys[i], Tensor::zeros(&[0, cfg.width]))
                    .into_data();
                kd.extend(take(g.value(k)));
                let mut vd = std::mem::replace(&mut self.values[i], Tensor::zeros(&[0, cfg.width]))
                    .into_data();
                vd.extend(take(g.value(v)));
                self.keys[i] = Tensor::new(vec![c + np, cfg.width], kd)?;
                self.values[i] = Tensor::new(vec![c + np, cfg.width], vd)?;
            }
            self.pokes += np;
        }
        Ok(raw)
    }

    pub fn push_pokes(&mut self, pokes: &[Poke]) -> Result<(), ModelError> {
        if !pokes.is_empty() {
            self.run(pokes, &[])?;
        }
        Ok(())
    }

    /// Pushes `pokes`, then answers `queries` conditioned on all pokes so far,
    /// in one pass.
    pub fn push_and_query(
        &mut self,
        pokes: &[Poke],
        queries: &[[f64; 2]],
    ) -> Result<Tensor<f32>, ModelError> {
        if queries.is_empty() {
            return Err(ModelError::Input("no queries".into()));
        }
        Ok(self.run(pokes, queries)?.expect("queries present"))
    }

    /// Raw head rows for queries conditioned on every pushed poke.
    pub fn query(&mut self, queries: &[[f64; 2]]) -> Result<Tensor<f32>, ModelError> {
        if queries.is_empty() {
            return Err(ModelError::Input("no queries".into()));
        }
        Ok(self.run(&[], queries)?.expect("queries present"))
    }
}
