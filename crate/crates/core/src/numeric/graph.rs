use std::sync::Arc;

use super::{AttnMask, NumericError, Real, Tensor};

/// One attention problem inside [`Graph::attention_blocks`]: query rows
/// `q_start..q_start + q_len` attend to key rows `k_start..k_start + k_len`.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub mask: Option<Arc<AttnMask>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Gradient for each input, in input order. `None` means no contribution.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Softmax(Var),
    LogSumExp(Var),
    RmsNorm {
        x: Var,
        inv_rms: Vec<T>,
    },
    SiluGate(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
        probs: Vec<T>,
        blocks: Vec<AttnBlock>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Tanh(Var),
    Softplus(Var),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run tape. Operations are recorded in execution order; [`Graph::backward`]
/// walks them once in reverse.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<(), NumericError> {
    if a.shape() != b.shape() {
        return Err(NumericError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::from_f64c(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        parents: &[Var],
        what: &'static str,
    ) -> Result<Var, NumericError> {
        if !value.is_finite() {
            return Err(NumericError::NonFinite(what));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        // Constant subgraphs keep no backward state.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mat_dims(&self, v: Var, what: &str) -> Result<(usize, usize), NumericError> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(NumericError::Shape(format!(
                "{what}: expected matrix, got {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (m, k) = self.mat_dims(a, "matmul lhs")?;
        let (k2, n) = self.mat_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(NumericError::Shape(format!(
                "matmul inner dims {k} vs {k2}"
            )));
        }
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            n,
            1,
            T::zero(),
            out.data_mut(),
            n,
            1,
        );
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Elementwise sum; `b` may also be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| x + y)
                .collect();
            let out = Tensor::new(va.shape().to_vec(), data)?;
            return self.push(out, Op::Add(a, b), &[a, b], "add");
        }
        if vb.rows() == 1 && vb.len() == va.cols() {
            let c = va.cols();
            let row = vb.data();
            let data = va
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + row[i % c])
                .collect();
            let out = Tensor::new(va.shape().to_vec(), data)?;
            return self.push(out, Op::AddRow(a, b), &[a, b], "add");
        }
        Err(NumericError::Shape(format!(
            "add: {:?} vs {:?}",
            va.shape(),
            vb.shape()
        )))
    }

    /// Elementwise product; `b` may also be a single broadcast row.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| x * y)
                .collect();
            let out = Tensor::new(va.shape().to_vec(), data)?;
            return self.push(out, Op::Mul(a, b), &[a, b], "mul");
        }
        if vb.rows() == 1 && vb.len() == va.cols() {
            let c = va.cols();
            let row = vb.data();
            let data = va
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x * row[i % c])
                .collect();
            let out = Tensor::new(va.shape().to_vec(), data)?;
            return self.push(out, Op::MulRow(a, b), &[a, b], "mul");
        }
        Err(NumericError::Shape(format!(
            "mul: {:?} vs {:?}",
            va.shape(),
            vb.shape()
        )))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, NumericError> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a], "scale")
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericError> {
        let mut out = self.value(a).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_row(row);
        }
        self.push(out, Op::Softmax(a), &[a], "softmax")
    }

    /// Log-sum-exp over the last dimension, one value per row.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var, NumericError> {
        let va = self.value(a);
        let c = va.cols();
        let data: Vec<T> = va
            .data()
            .chunks(c)
            .map(|row| {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
            })
            .collect();
        let out = Tensor::new(vec![data.len(), 1], data)?;
        self.push(out, Op::LogSumExp(a), &[a], "logsumexp")
    }

    /// Parameter-free RMS normalization over the last dimension.
    pub fn rms_norm(&mut self, a: Var, eps: T) -> Result<Var, NumericError> {
        let va = self.value(a);
        let c = va.cols();
        let n = T::from_usize(c).unwrap();
        let mut out = va.clone();
        let mut inv_rms = Vec::with_capacity(va.rows());
        for row in out.data_mut().chunks_mut(c) {
            let ms = row.iter().map(|&x| x * x).sum::<T>() / n;
            let inv = T::one() / (ms + eps).sqrt();
            for x in row.iter_mut() {
                *x *= inv;
            }
            inv_rms.push(inv);
        }
        self.push(out, Op::RmsNorm { x: a, inv_rms }, &[a], "rms_norm")
    }

    /// `silu(a) * b`, the SwiGLU gate.
    pub fn silu_gate(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "silu_gate")?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * sigmoid(x) * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::SiluGate(a, b), &[a, b], "silu_gate")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericError> {
        let out = self.value(a).map(T::tanh);
        self.push(out, Op::Tanh(a), &[a], "tanh")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, NumericError> {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), &[a], "softplus")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericError> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericError> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Selects rows of a matrix; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericError> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(NumericError::Shape(format!("gather_rows index {i} >= {r}")));
            }
            data.extend_from_slice(va.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        self.push(
            out,
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
            &[a],
            "gather_rows",
        )
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericError> {
        let Some(&first) = parts.first() else {
            return Err(NumericError::Shape("concat_rows of nothing".into()));
        };
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(NumericError::Shape(format!(
                    "concat_rows cols {} vs {c}",
                    v.cols()
                )));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    /// Multi-head scaled dot-product attention over `[tokens, heads*head_dim]` layouts.
    ///
    /// Masked pairs receive the additive [`Real::MASK_FILL`] before the softmax, so
    /// their weight is exactly zero. A row with no allowed entry is an error.
    pub fn masked_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&AttnMask>,
    ) -> Result<Var, NumericError> {
        let tq = self.value(q).shape()[0];
        let s = self.value(k).shape()[0];
        let block = AttnBlock {
            q_start: 0,
            q_len: tq,
            k_start: 0,
            k_len: s,
            mask: mask.map(|m| Arc::new(m.clone())),
        };
        self.attention_blocks(q, k, v, heads, &[block])
    }

    /// Several independent attention problems sharing one set of projections.
    /// Query rows outside every block produce zeros.
    pub fn attention_blocks(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: &[AttnBlock],
    ) -> Result<Var, NumericError> {
        let (tq, width) = self.mat_dims(q, "attention q")?;
        let (s, wk) = self.mat_dims(k, "attention k")?;
        let (sv, wv) = self.mat_dims(v, "attention v")?;
        if wk != width || wv != width || sv != s {
            return Err(NumericError::Shape(format!(
                "attention q {tq}x{width}, k {s}x{wk}, v {sv}x{wv}"
            )));
        }
        if heads == 0 || width % heads != 0 {
            return Err(NumericError::Shape(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        for b in blocks {
            if b.q_start + b.q_len > tq || b.k_start + b.k_len > s || b.k_len == 0 {
                return Err(NumericError::Shape(format!(
                    "attention block {b:?} outside {tq}x{s}"
                )));
            }
            if let Some(m) = &b.mask {
                if m.rows() != b.q_len || m.cols() != b.k_len {
                    return Err(NumericError::Shape(format!(
                        "mask {}x{} for attention block {}x{}",
                        m.rows(),
                        m.cols(),
                        b.q_len,
                        b.k_len
                    )));
                }
                if let Some(r) = (0..b.q_len).find(|&r| !m.row(r).iter().any(|&x| x)) {
                    return Err(NumericError::FullyMaskedRow(b.q_start + r));
                }
            }
        }
        let dh = width / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let total: usize = blocks.iter().map(|b| b.q_len * b.k_len).sum();
        let mut probs = vec![T::zero(); heads * total];
        let mut out = Tensor::zeros(&[tq, width]);
        let mut off = 0;
        for b in blocks {
            let (n, m) = (b.q_len, b.k_len);
            if n == 0 {
                continue;
            }
            let (qo, ko) = (b.q_start * width, b.k_start * width);
            for h in 0..heads {
                let p = &mut probs[off..off + n * m];
                off += n * m;
                T::gemm_raw(
                    n,
                    dh,
                    m,
                    scale,
                    &qd[qo + h * dh..],
                    width,
                    1,
                    &kd[ko + h * dh..],
                    1,
                    width,
                    T::zero(),
                    p,
                    m,
                    1,
                );
                if let Some(mask) = &b.mask {
                    for r in 0..n {
                        for (x, &ok) in p[r * m..(r + 1) * m].iter_mut().zip(mask.row(r)) {
                            if !ok {
                                *x += T::MASK_FILL;
                            }
                        }
                    }
                }
                for row in p.chunks_mut(m) {
                    softmax_row(row);
                }
                T::gemm_raw(
                    n,
                    m,
                    dh,
                    T::one(),
                    p,
                    m,
                    1,
                    &vd[ko + h * dh..],
                    width,
                    1,
                    T::one(),
                    &mut out.data_mut()[qo + h * dh..],
                    width,
                    1,
                );
            }
        }
        let blocks = blocks.to_vec();
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
                blocks,
            },
            &[q, k, v],
            "masked_attention",
        )
    }

    /// Records an externally computed value with its own backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var, NumericError> {
        let name = op.name();
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
            name,
        )
    }

    /// Reverse sweep from a scalar. Each recorded operation is visited once.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericError> {
        if self.value(loss).len() != 1 {
            return Err(NumericError::Shape(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if !g.is_finite() {
                return Err(NumericError::NonFinite("gradient"));
            }
            self.backward_node(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                leaf_grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), NumericError> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.requires_grad(*a) {
                    let mut da = Tensor::zeros(&[m, k]);
                    // dA = dC · Bᵀ
                    T::gemm_raw(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        n,
                        1,
                        vb.data(),
                        1,
                        n,
                        T::zero(),
                        da.data_mut(),
                        k,
                        1,
                    );
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = Tensor::zeros(&[k, n]);
                    // dB = Aᵀ · dC
                    T::gemm_raw(
                        k,
                        m,
                        n,
                        T::one(),
                        va.data(),
                        1,
                        k,
                        g.data(),
                        n,
                        1,
                        T::zero(),
                        db.data_mut(),
                        n,
                        1,
                    );
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    let c = g.cols();
                    let mut db = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, db)?);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.requires_grad(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let c = g.cols();
                if self.requires_grad(*a) {
                    let row = vb.data();
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * row[i % c])
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); c];
                    for (gr, ar) in g.data().chunks(c).zip(va.data().chunks(c)) {
                        for j in 0..c {
                            db[j] += gr[j] * ar[j];
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), db)?);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * *c)),
            Op::Softmax(a) => {
                let c = out.cols();
                let mut d = g.clone();
                for (dr, yr) in d.data_mut().chunks_mut(c).zip(out.data().chunks(c)) {
                    let dot: T = dr.iter().zip(yr).map(|(&x, &y)| x * y).sum();
                    for (x, &y) in dr.iter_mut().zip(yr) {
                        *x = y * (*x - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSumExp(a) => {
                let va = self.value(*a);
                let c = va.cols();
                let mut d = va.clone();
                for (r, row) in d.data_mut().chunks_mut(c).enumerate() {
                    let lse = out.data()[r];
                    let gr = g.data()[r];
                    for x in row.iter_mut() {
                        *x = (*x - lse).exp() * gr;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::RmsNorm { x, inv_rms } => {
                let c = out.cols();
                let n = T::from_usize(c).unwrap();
                let mut d = g.clone();
                for ((dr, yr), &inv) in d
                    .data_mut()
                    .chunks_mut(c)
                    .zip(out.data().chunks(c))
                    .zip(inv_rms)
                {
                    let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for (dx, &y) in dr.iter_mut().zip(yr) {
                        *dx = (*dx - y * dot) * inv;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::SiluGate(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g
                        .data()
                        .iter()
                        .zip(va.data().iter().zip(vb.data()))
                        .map(|(&gr, (&x, &y))| {
                            let s = sigmoid(x);
                            gr * y * s * (T::one() + x * (T::one() - s))
                        })
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.requires_grad(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(&gr, &x)| gr * x * sigmoid(x))
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Tanh(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gr, &y)| gr * (T::one() - y * y))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Softplus(a) => {
                let va = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gr, &x)| gr * sigmoid(x))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::GatherRows { x, idx } => {
                let vx = self.value(*x);
                let c = vx.cols();
                let mut d = Tensor::zeros(vx.shape());
                for (r, &i) in idx.iter().enumerate() {
                    let src = g.row(r);
                    for (dst, &s) in d.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                        *dst += s;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let n = vp.len();
                    if self.requires_grad(p) {
                        let d = Tensor::new(
                            vp.shape().to_vec(),
                            g.data()[offset..offset + n].to_vec(),
                        )?;
                        self.accumulate(grads, p, d);
                    }
                    offset += n;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
                blocks,
            } => {
                self.attention_backward(*q, *k, *v, *heads, *scale, probs, blocks, g, grads);
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
                let ds = op.backward(&vals, out, g);
                for (&i, d) in inputs.iter().zip(ds) {
                    if let Some(d) = d {
                        if d.shape() != self.value(i).shape() {
                            return Err(NumericError::Shape(format!(
                                "{} backward shape",
                                op.name()
                            )));
                        }
                        self.accumulate(grads, i, d);
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
        probs: &[T],
        blocks: &[AttnBlock],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, width) = (qv.shape()[0], qv.shape()[1]);
        let s = kv.shape()[0];
        let dh = width / heads;
        let mut dq = Tensor::zeros(&[tq, width]);
        let mut dk = Tensor::zeros(&[s, width]);
        let mut dv = Tensor::zeros(&[s, width]);
        let mut off = 0;
        for b in blocks {
            let (n, m) = (b.q_len, b.k_len);
            if n == 0 {
                continue;
            }
            let (qo, ko) = (b.q_start * width, b.k_start * width);
            let mut ds = vec![T::zero(); n * m];
            for h in 0..heads {
                let p = &probs[off..off + n * m];
                off += n * m;
                // dP = dO · Vᵀ
                T::gemm_raw(
                    n,
                    dh,
                    m,
                    T::one(),
                    &g.data()[qo + h * dh..],
                    width,
                    1,
                    &vv.data()[ko + h * dh..],
                    1,
                    width,
                    T::zero(),
                    &mut ds,
                    m,
                    1,
                );
                for (dr, pr) in ds.chunks_mut(m).zip(p.chunks(m)) {
                    let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for (x, &pp) in dr.iter_mut().zip(pr) {
                        *x = pp * (*x - dot) * scale;
                    }
                }
                T::gemm_raw(
                    n,
                    m,
                    dh,
                    T::one(),
                    &ds,
                    m,
                    1,
                    &kv.data()[ko + h * dh..],
                    width,
                    1,
                    T::one(),
                    &mut dq.data_mut()[qo + h * dh..],
                    width,
                    1,
                );
                T::gemm_raw(
                    m,
                    n,
                    dh,
                    T::one(),
                    &ds,
                    1,
                    m,
                    &qv.data()[qo + h * dh..],
                    width,
                    1,
                    T::one(),
                    &mut dk.data_mut()[ko + h * dh..],
                    width,
                    1,
                );
                T::gemm_raw(
                    m,
                    n,
                    dh,
                    T::one(),
                    p,
                    1,
                    m,
                    &g.data()[qo + h * dh..],
                    width,
                    1,
                    T::one(),
                    &mut dv.data_mut()[ko + h * dh..],
                    width,
                    1,
                );
            }
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}
