//! Wengert-list reverse-mode autodiff over [`Tensor`] values.
//!
//! A `Tape` owns every intermediate of one forward pass; ops append nodes and
//! return [`Var`] handles. `backward` fills gradients for all nodes reachable
//! from a scalar root. `grad_check` replays the recorded graph in f64 to get
//! central finite differences that are not polluted by f32 rounding, then
//! compares against the f32 analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::tensor::{kernels, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddRow(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    Reshape(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Bmm(Var, Var),
    BmmNt(Var, Var),
    AddBroadcastMat(Var, Var),
    SoftmaxLast(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f32 },
    CrossEntropyMean { logits: Var, targets: Vec<usize> },
    PickPerRow(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    /// Identity forward; multiplies the incoming gradient by `1` normally.
    /// A `back_scale != 1` deliberately corrupts the backward rule so that
    /// gradient checking can be shown to catch bad derivatives.
    DebugIdentity(Var, f32),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-owner record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root w.r.t. `v`, if backward ran.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0).and_then(|g| {
            g.as_ref()
                .map(|buf| Tensor::from_raw(self.nodes[v.0].value.shape().to_vec(), buf.clone()))
        })
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::invalid(format!("{op} expects 2-d, got {s:?}"))),
        }
    }

    fn dims3(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.value(v).shape() {
            [b, r, c] => Ok((*b, *r, *c)),
            s => Err(Error::invalid(format!("{op} expects 3-d, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let out = self.value(a).scale(c)?;
        Ok(self.push(out, Op::Scale(a, c)))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).sigmoid()?;
        Ok(self.push(out, Op::Sigmoid(a)))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).gelu()?;
        Ok(self.push(out, Op::Gelu(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, len)?;
        Ok(self.push(out, Op::SliceCols(a, start, len)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Tensor::concat_cols(&tensors)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(table).gather_rows(idx)?;
        Ok(self.push(out, Op::GatherRows(table, idx.to_vec())))
    }

    /// Batched `a (B,m,k) @ b (B,k,n)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, m, k) = self.dims3(a, "bmm")?;
        let (bb, k2, n) = self.dims3(b, "bmm")?;
        if ba != bb || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            kernels::matmul(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        if !kernels::all_finite(&out) {
            return Err(Error::non_finite("bmm"));
        }
        Ok(self.push(Tensor::from_raw(vec![ba, m, n], out), Op::Bmm(a, b)))
    }

    /// Batched `a (B,m,k) @ b (B,n,k)ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, m, k) = self.dims3(a, "bmm_nt")?;
        let (bb, n, k2) = self.dims3(b, "bmm_nt")?;
        if ba != bb || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "bmm_nt",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            kernels::matmul_nt(
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * n * k..(i + 1) * n * k],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        if !kernels::all_finite(&out) {
            return Err(Error::non_finite("bmm_nt"));
        }
        Ok(self.push(Tensor::from_raw(vec![ba, m, n], out), Op::BmmNt(a, b)))
    }

    /// Add an `(m,n)` matrix to every batch slice of an `(B,m,n)` tensor.
    pub fn add_broadcast_mat(&mut self, a: Var, m: Var) -> Result<Var> {
        let (b, r, c) = self.dims3(a, "add_broadcast_mat")?;
        let (mr, mc) = self.dims2(m, "add_broadcast_mat")?;
        if (mr, mc) != (r, c) {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast_mat",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(m).shape().to_vec(),
            });
        }
        let mat = self.value(m).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for i in 0..b {
            for (x, y) in out[i * r * c..(i + 1) * r * c].iter_mut().zip(&mat) {
                *x += y;
            }
        }
        Ok(self.push(Tensor::from_raw(vec![b, r, c], out), Op::AddBroadcastMat(a, m)))
    }

    /// Softmax over the last dimension of a 2-d or 3-d tensor.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.value(a).shape().to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::invalid("softmax_last on scalar"))?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            kernels::softmax_inplace(row);
        }
        if !kernels::all_finite(&out) {
            return Err(Error::non_finite("softmax_last"));
        }
        Ok(self.push(Tensor::from_raw(shape, out), Op::SoftmaxLast(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let out = self
            .value(x)
            .layer_norm_rows(self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(logits, "cross_entropy_mean")?;
        if targets.len() != r {
            return Err(Error::invalid(format!(
                "cross_entropy_mean: {r} rows vs {} targets",
                targets.len()
            )));
        }
        let mut nll = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::TokenOutOfRange { id: t, vocab: c });
            }
            let row = &self.value(logits).data()[i * c..(i + 1) * c];
            let mut max = f32::NEG_INFINITY;
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut lse = 0.0f64;
            for &v in row {
                lse += ((v - max) as f64).exp();
            }
            nll += lse.ln() + max as f64 - row[t] as f64;
        }
        let loss = (nll / r as f64) as f32;
        if !loss.is_finite() {
            return Err(Error::non_finite("cross_entropy_mean"));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyMean { logits, targets: targets.to_vec() },
        ))
    }

    /// `out[i] = a[i, idx[i]]` for a 2-d input.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(a, "pick_per_row")?;
        if idx.len() != r {
            return Err(Error::invalid(format!("pick_per_row: {r} rows vs {} indices", idx.len())));
        }
        let mut out = Vec::with_capacity(r);
        for (i, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(Error::invalid(format!("pick_per_row index {j} out of range {c}")));
            }
            out.push(self.value(a).data()[i * c + j]);
        }
        Ok(self.push(Tensor::vector(out), Op::PickPerRow(a, idx.to_vec())))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum() as f32;
        Ok(self.push(Tensor::scalar(s), Op::SumAll(a)))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).mean() as f32;
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(a)))
    }

    /// Identity with an adjustable backward multiplier; `back_scale = 1.0`
    /// is a true identity, anything else is an intentionally wrong rule.
    pub fn debug_identity(&mut self, a: Var, back_scale: f32) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::DebugIdentity(a, back_scale))
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<f32> {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn take_grad(&self, v: Var) -> Vec<f32> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()])
    }

    /// Reverse sweep from a scalar root. Populates gradients for every node;
    /// nodes unreachable from the root keep zero gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grad_buf(root)[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            let dy = self.take_grad(Var(i));
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = self.dims2(a, "matmul")?;
                    let n = self.value(b).shape()[1];
                    let bv = self.value(b).data().to_vec();
                    let av = self.value(a).data().to_vec();
                    {
                        let ga = self.grad_buf(a);
                        let mut tmp = vec![0.0; m * k];
                        kernels::matmul_nt(&dy, &bv, &mut tmp, m, n, k);
                        for (g, t) in ga.iter_mut().zip(&tmp) {
                            *g += t;
                        }
                    }
                    {
                        let gb = self.grad_buf(b);
                        kernels::matmul_tn(&av, &dy, gb, k, m, n, true);
                    }
                }
                Op::Add(a, b) => {
                    for (g, d) in self.grad_buf(a).iter_mut().zip(&dy) {
                        *g += d;
                    }
                    for (g, d) in self.grad_buf(b).iter_mut().zip(&dy) {
                        *g += d;
                    }
                }
                Op::Sub(a, b) => {
                    for (g, d) in self.grad_buf(a).iter_mut().zip(&dy) {
                        *g += d;
                    }
                    for (g, d) in self.grad_buf(b).iter_mut().zip(&dy) {
                        *g -= d;
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.value(a).data().to_vec();
                    let bv = self.value(b).data().to_vec();
                    for ((g, d), v) in self.grad_buf(a).iter_mut().zip(&dy).zip(&bv) {
                        *g += d * v;
                    }
                    for ((g, d), v) in self.grad_buf(b).iter_mut().zip(&dy).zip(&av) {
                        *g += d * v;
                    }
                }
                Op::Scale(a, c) => {
                    for (g, d) in self.grad_buf(a).iter_mut().zip(&dy) {
                        *g += d * c;
                    }
                }
                Op::AddRow(a, bias) => {
                    for (g, d) in self.grad_buf(a).iter_mut().zip(&dy) {
                        *g += d;
                    }
                    let c = self.value(bias).numel();
                    let gb = self.grad_buf(bias);
                    for row in dy.chunks_exact(c) {
                        for (g, d) in gb.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let yv = self.nodes[i].value.data().to_vec();
                    for ((g, d), y) in self.grad_buf(a).iter_mut().zip(&dy).zip(&yv) {
                        *g += d * kernels::sigmoid_grad(*y);
                    }
                }
                Op::Gelu(a) => {
                    let xv = self.value(a).data().to_vec();
                    for ((g, d), x) in self.grad_buf(a).iter_mut().zip(&dy).zip(&xv) {
                        *g += d * kernels::gelu_grad(*x);
                    }
                }
                Op::Reshape(a) | Op::DebugIdentity(a, _) => {
                    let s = if let Op::DebugIdentity(_, s) = self.nodes[i].op { s } else { 1.0 };
                    for (g, d) in self.grad_buf(a).iter_mut().zip(&dy) {
                        *g += d * s;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let (_, c) = self.dims2(a, "slice_cols")?;
                    let ga = self.grad_buf(a);
                    for (r, row) in dy.chunks_exact(len).enumerate() {
                        for (j, d) in row.iter().enumerate() {
                            ga[r * c + start + j] += d;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let widths: Vec<usize> =
                        parts.iter().map(|p| self.value(*p).shape()[1]).collect();
                    let total: usize = widths.iter().sum();
                    let mut off = 0;
                    for (p, w) in parts.iter().zip(&widths) {
                        let gp = self.grad_buf(*p);
                        for (r, chunk) in gp.chunks_exact_mut(*w).enumerate() {
                            for (j, g) in chunk.iter_mut().enumerate() {
                                *g += dy[r * total + off + j];
                            }
                        }
                        off += w;
                    }
                }
                Op::GatherRows(table, idx) => {
                    let c = self.value(table).shape()[1];
                    let gt = self.grad_buf(table);
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            gt[src * c + j] += dy[r * c + j];
                        }
                    }
                }
                Op::Bmm(a, b) => {
                    let (bn, m, k) = self.dims3(a, "bmm")?;
                    let n = self.value(b).shape()[2];
                    let av = self.value(a).data().to_vec();
                    let bv = self.value(b).data().to_vec();
                    {
                        let ga = self.grad_buf(a);
                        let mut tmp = vec![0.0; m * k];
                        for t in 0..bn {
                            kernels::matmul_nt(
                                &dy[t * m * n..(t + 1) * m * n],
                                &bv[t * k * n..(t + 1) * k * n],
                                &mut tmp,
                                m,
                                n,
                                k,
                            );
                            for (g, v) in ga[t * m * k..(t + 1) * m * k].iter_mut().zip(&tmp) {
                                *g += v;
                            }
                        }
                    }
                    {
                        let gb = self.grad_buf(b);
                        for t in 0..bn {
                            kernels::matmul_tn(
                                &av[t * m * k..(t + 1) * m * k],
                                &dy[t * m * n..(t + 1) * m * n],
                                &mut gb[t * k * n..(t + 1) * k * n],
                                k,
                                m,
                                n,
                                true,
                            );
                        }
                    }
                }
                Op::BmmNt(a, b) => {
                    let (bn, m, k) = self.dims3(a, "bmm_nt")?;
                    let n = self.value(b).shape()[1];
                    let av = self.value(a).data().to_vec();
                    let bv = self.value(b).data().to_vec();
                    {
                        let ga = self.grad_buf(a);
                        for t in 0..bn {
                            let mut tmp = vec![0.0; m * k];
                            kernels::matmul(
                                &dy[t * m * n..(t + 1) * m * n],
                                &bv[t * n * k..(t + 1) * n * k],
                                &mut tmp,
                                m,
                                n,
                                k,
                            );
                            for (g, v) in ga[t * m * k..(t + 1) * m * k].iter_mut().zip(&tmp) {
                                *g += v;
                            }
                        }
                    }
                    {
                        let gb = self.grad_buf(b);
                        for t in 0..bn {
                            kernels::matmul_tn(
                                &dy[t * m * n..(t + 1) * m * n],
                                &av[t * m * k..(t + 1) * m * k],
                                &mut gb[t * n * k..(t + 1) * n * k],
                                n,
                                m,
                                k,
                                true,
                            );
                        }
                    }
                }
                Op::AddBroadcastMat(a, m) => {
                    for (g, d) in self.grad_buf(a).iter_mut().zip(&dy) {
                        *g += d;
                    }
                    let mn = self.value(m).numel();
                    let gm = self.grad_buf(m);
                    for chunk in dy.chunks_exact(mn) {
                        for (g, d) in gm.iter_mut().zip(chunk) {
                            *g += d;
                        }
                    }
                }
                Op::SoftmaxLast(a) => {
                    let shape = self.nodes[i].value.shape().to_vec();
                    let c = *shape.last().unwrap();
                    let yv = self.nodes[i].value.data().to_vec();
                    let ga = self.grad_buf(a);
                    for (r, (yrow, drow)) in yv.chunks_exact(c).zip(dy.chunks_exact(c)).enumerate() {
                        let mut dot = 0.0f64;
                        for (y, d) in yrow.iter().zip(drow) {
                            dot += *y as f64 * *d as f64;
                        }
                        for j in 0..c {
                            ga[r * c + j] += yrow[j] * (drow[j] - dot as f32);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (rows, c) = self.dims2(x, "layer_norm")?;
                    let xv = self.value(x).data().to_vec();
                    let gv = self.value(gamma).data().to_vec();
                    let mut gx_buf = vec![0.0f32; rows * c];
                    let mut ggamma = vec![0.0f32; c];
                    let mut gbeta = vec![0.0f32; c];
                    for r in 0..rows {
                        let xr = &xv[r * c..(r + 1) * c];
                        let dr = &dy[r * c..(r + 1) * c];
                        let mean = (kernels::sum_f64(xr) / c as f64) as f32;
                        let mut var = 0.0f64;
                        for &v in xr {
                            let d = (v - mean) as f64;
                            var += d * d;
                        }
                        let inv = 1.0 / (((var / c as f64) as f32) + eps).sqrt();
                        let mut sum_g = 0.0f64;
                        let mut sum_gx = 0.0f64;
                        for j in 0..c {
                            let xhat = (xr[j] - mean) * inv;
                            let g = dr[j] * gv[j];
                            sum_g += g as f64;
                            sum_gx += (g * xhat) as f64;
                            ggamma[j] += dr[j] * xhat;
                            gbeta[j] += dr[j];
                        }
                        let mg = (sum_g / c as f64) as f32;
                        let mgx = (sum_gx / c as f64) as f32;
                        for j in 0..c {
                            let xhat = (xr[j] - mean) * inv;
                            gx_buf[r * c + j] = inv * (dr[j] * gv[j] - mg - xhat * mgx);
                        }
                    }
                    for (g, v) in self.grad_buf(x).iter_mut().zip(&gx_buf) {
                        *g += v;
                    }
                    for (g, v) in self.grad_buf(gamma).iter_mut().zip(&ggamma) {
                        *g += v;
                    }
                    for (g, v) in self.grad_buf(beta).iter_mut().zip(&gbeta) {
                        *g += v;
                    }
                }
                Op::CrossEntropyMean { logits, targets } => {
                    let (r, c) = self.dims2(logits, "cross_entropy_mean")?;
                    let lv = self.value(logits).data().to_vec();
                    let scale = dy[0] / r as f32;
                    let gl = self.grad_buf(logits);
                    for (row, &t) in targets.iter().enumerate() {
                        let mut probs = lv[row * c..(row + 1) * c].to_vec();
                        kernels::softmax_inplace(&mut probs);
                        for j in 0..c {
                            let indicator = if j == t { 1.0 } else { 0.0 };
                            gl[row * c + j] += scale * (probs[j] - indicator);
                        }
                    }
                }
                Op::PickPerRow(a, idx) => {
                    let (_, c) = self.dims2(a, "pick_per_row")?;
                    let ga = self.grad_buf(a);
                    for (r, &j) in idx.iter().enumerate() {
                        ga[r * c + j] += dy[r];
                    }
                }
                Op::SumAll(a) => {
                    for g in self.grad_buf(a).iter_mut() {
                        *g += dy[0];
                    }
                }
                Op::MeanAll(a) => {
                    let n = self.value(a).numel() as f32;
                    for g in self.grad_buf(a).iter_mut() {
                        *g += dy[0] / n;
                    }
                }
            }
        }
        Ok(())
    }

    /// Replay the recorded graph in f64 with some leaves overridden.
    /// Used as the finite-difference oracle for `grad_check`.
    fn eval_f64(&self, root: Var, overrides: &[(Var, &[f64])]) -> Result<f64> {
        let mut vals: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        for i in 0..=root.0 {
            let node = &self.nodes[i];
            let get = |vals: &Vec<Option<Vec<f64>>>, v: Var| -> Vec<f64> {
                vals[v.0].clone().expect("topological order violated")
            };
            let out: Vec<f64> = match &node.op {
                Op::Leaf => {
                    let mut v: Vec<f64> = node.value.data().iter().map(|&x| x as f64).collect();
                    for (ov, data) in overrides {
                        if ov.0 == i {
                            v = data.to_vec();
                        }
                    }
                    v
                }
                Op::Matmul(a, b) => {
                    let (m, k) = self.dims2(*a, "matmul")?;
                    let n = self.value(*b).shape()[1];
                    let av = get(&vals, *a);
                    let bv = get(&vals, *b);
                    let mut out = vec![0.0; m * n];
                    for r in 0..m {
                        for j in 0..n {
                            let mut s = 0.0;
                            for t in 0..k {
                                s += av[r * k + t] * bv[t * n + j];
                            }
                            out[r * n + j] = s;
                        }
                    }
                    out
                }
                Op::Add(a, b) => get(&vals, *a).iter().zip(get(&vals, *b)).map(|(x, y)| x + y).collect(),
                Op::Sub(a, b) => get(&vals, *a).iter().zip(get(&vals, *b)).map(|(x, y)| x - y).collect(),
                Op::Mul(a, b) => get(&vals, *a).iter().zip(get(&vals, *b)).map(|(x, y)| x * y).collect(),
                Op::Scale(a, c) => get(&vals, *a).iter().map(|x| x * *c as f64).collect(),
                Op::AddRow(a, bias) => {
                    let bv = get(&vals, *bias);
                    let mut out = get(&vals, *a);
                    for row in out.chunks_exact_mut(bv.len()) {
                        for (x, b) in row.iter_mut().zip(&bv) {
                            *x += b;
                        }
                    }
                    out
                }
                Op::Sigmoid(a) => get(&vals, *a).iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
                Op::Gelu(a) => get(&vals, *a)
                    .iter()
                    .map(|&x| {
                        let c = (2.0f64 / std::f64::consts::PI).sqrt();
                        0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
                    })
                    .collect(),
                Op::Reshape(a) | Op::DebugIdentity(a, _) => get(&vals, *a),
                Op::SliceCols(a, start, len) => {
                    let (r, c) = self.dims2(*a, "slice_cols")?;
                    let av = get(&vals, *a);
                    let mut out = Vec::with_capacity(r * len);
                    for i in 0..r {
                        out.extend_from_slice(&av[i * c + start..i * c + start + len]);
                    }
                    out
                }
                Op::ConcatCols(parts) => {
                    let widths: Vec<usize> =
                        parts.iter().map(|p| self.value(*p).shape()[1]).collect();
                    let rows = self.value(parts[0]).shape()[0];
                    let bufs: Vec<Vec<f64>> = parts.iter().map(|p| get(&vals, *p)).collect();
                    let mut out = Vec::new();
                    for r in 0..rows {
                        for (buf, w) in bufs.iter().zip(&widths) {
                            out.extend_from_slice(&buf[r * w..(r + 1) * w]);
                        }
                    }
                    out
                }
                Op::GatherRows(table, idx) => {
                    let c = self.value(*table).shape()[1];
                    let tv = get(&vals, *table);
                    let mut out = Vec::with_capacity(idx.len() * c);
                    for &r in idx {
                        out.extend_from_slice(&tv[r * c..(r + 1) * c]);
                    }
                    out
                }
                Op::Bmm(a, b) => {
                    let (bn, m, k) = self.dims3(*a, "bmm")?;
                    let n = self.value(*b).shape()[2];
                    let av = get(&vals, *a);
                    let bv = get(&vals, *b);
                    let mut out = vec![0.0; bn * m * n];
                    for t in 0..bn {
                        for r in 0..m {
                            for j in 0..n {
                                let mut s = 0.0;
                                for q in 0..k {
                                    s += av[t * m * k + r * k + q] * bv[t * k * n + q * n + j];
                                }
                                out[t * m * n + r * n + j] = s;
                            }
                        }
                    }
                    out
                }
                Op::BmmNt(a, b) => {
                    let (bn, m, k) = self.dims3(*a, "bmm_nt")?;
                    let n = self.value(*b).shape()[1];
                    let av = get(&vals, *a);
                    let bv = get(&vals, *b);
                    let mut out = vec![0.0; bn * m * n];
                    for t in 0..bn {
                        for r in 0..m {
                            for j in 0..n {
                                let mut s = 0.0;
                                for q in 0..k {
                                    s += av[t * m * k + r * k + q] * bv[t * n * k + j * k + q];
                                }
                                out[t * m * n + r * n + j] = s;
                            }
                        }
                    }
                    out
                }
                Op::AddBroadcastMat(a, m) => {
                    let mv = get(&vals, *m);
                    let mut out = get(&vals, *a);
                    for chunk in out.chunks_exact_mut(mv.len()) {
                        for (x, y) in chunk.iter_mut().zip(&mv) {
                            *x += y;
                        }
                    }
                    out
                }
                Op::SoftmaxLast(a) => {
                    let c = *node.value.shape().last().unwrap();
                    let mut out = get(&vals, *a);
                    for row in out.chunks_exact_mut(c) {
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for v in row.iter_mut() {
                            *v = (*v - max).exp();
                            sum += *v;
                        }
                        for v in row.iter_mut() {
                            *v /= sum;
                        }
                    }
                    out
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (rows, c) = self.dims2(*x, "layer_norm")?;
                    let xv = get(&vals, *x);
                    let gv = get(&vals, *gamma);
                    let bv = get(&vals, *beta);
                    let mut out = vec![0.0; rows * c];
                    for r in 0..rows {
                        let xr = &xv[r * c..(r + 1) * c];
                        let mean: f64 = xr.iter().sum::<f64>() / c as f64;
                        let var: f64 = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + *eps as f64).sqrt();
                        for j in 0..c {
                            out[r * c + j] = (xr[j] - mean) * inv * gv[j] + bv[j];
                        }
                    }
                    out
                }
                Op::CrossEntropyMean { logits, targets } => {
                    let (r, c) = self.dims2(*logits, "cross_entropy_mean")?;
                    let lv = get(&vals, *logits);
                    let mut nll = 0.0;
                    for (row, &t) in targets.iter().enumerate() {
                        let xr = &lv[row * c..(row + 1) * c];
                        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse: f64 = xr.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                        nll += lse - xr[t];
                    }
                    vec![nll / r as f64]
                }
                Op::PickPerRow(a, idx) => {
                    let (_, c) = self.dims2(*a, "pick_per_row")?;
                    let av = get(&vals, *a);
                    idx.iter().enumerate().map(|(r, &j)| av[r * c + j]).collect()
                }
                Op::SumAll(a) => vec![get(&vals, *a).iter().sum()],
                Op::MeanAll(a) => {
                    let v = get(&vals, *a);
                    vec![v.iter().sum::<f64>() / v.len() as f64]
                }
            };
            if !out.iter().all(|v| v.is_finite()) {
                return Err(Error::non_finite("grad_check probe"));
            }
            vals[i] = Some(out);
        }
        Ok(vals[root.0].as_ref().unwrap()[0])
    }
}

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

/// Compare analytic gradients of `root` w.r.t. `leaves` against central
/// finite differences of the f64 replay, step `h`, pass iff
/// max |analytic − numeric| / max(|analytic|, |numeric|, 1e-6) ≤ `tol`.
pub fn grad_check(tape: &mut Tape, root: Var, leaves: &[Var], h: f64, tol: f64) -> Result<GradCheckReport> {
    if tape.value(root).numel() != 1 {
        return Err(Error::invalid("grad_check root must be scalar"));
    }
    tape.backward(root)?;
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for &leaf in leaves {
        let analytic = tape
            .grad(leaf)
            .ok_or_else(|| Error::invalid("leaf has no gradient"))?;
        let base: Vec<f64> = tape.value(leaf).data().iter().map(|&x| x as f64).collect();
        for j in 0..base.len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[j] += h;
            minus[j] -= h;
            let fp = tape.eval_f64(root, &[(leaf, &plus)])?;
            let fm = tape.eval_f64(root, &[(leaf, &minus)])?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[j] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, checked, pass: max_rel <= tol })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn product_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0).with_grad());
        let b = tape.leaf(Tensor::scalar(5.0).with_grad());
        let y = tape.mul(a, b).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[5.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn sum_has_constant_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -1.2, 4.0]).with_grad());
        let y = tape.sum_all(x).unwrap();
        let report = grad_check(&mut tape, y, &[x], 1e-3, 1e-4).unwrap();
        assert!(report.pass);
        assert!(report.max_rel_err < 1e-9, "{}", report.max_rel_err);
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5, -0.25]).with_grad());
        let mid = tape.debug_identity(x, 1.5);
        let sq = tape.mul(mid, mid).unwrap();
        let y = tape.sum_all(sq).unwrap();
        let report = grad_check(&mut tape, y, &[x], 1e-3, 1e-4).unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut rnd = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(3, 4, rnd(12)).unwrap().with_grad());
        let w1 = tape.leaf(Tensor::matrix(4, 5, rnd(20)).unwrap().with_grad());
        let b1 = tape.leaf(Tensor::vector(rnd(5)).with_grad());
        let w2 = tape.leaf(Tensor::matrix(5, 2, rnd(10)).unwrap().with_grad());
        let h = tape.matmul(x, w1).unwrap();
        let h = tape.add_row(h, b1).unwrap();
        let h = tape.gelu(h).unwrap();
        let out = tape.matmul(h, w2).unwrap();
        let loss = tape.cross_entropy_mean(out, &[0, 1, 0]).unwrap();
        let report = grad_check(&mut tape, loss, &[x, w1, b1, w2], 1e-3, 1e-4).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
