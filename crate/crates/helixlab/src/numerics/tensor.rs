//! Dense row-major f32 tensors and the raw kernels behind them.
//!
//! Public `Tensor` ops validate shapes and reject non-finite outputs; the
//! `kernels` submodule holds the unchecked inner loops so the taped and
//! untaped execution paths share bit-identical arithmetic.

use crate::error::{Error, Result};

/// Dense row-major tensor of 32-bit floats.
///
/// Immutable once produced by an op. `requires_grad` only matters when the
/// tensor is installed as a leaf on a [`Tape`](crate::numerics::Tape).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if !kernels::all_finite(&data) {
            return Err(Error::non_finite("Tensor::new"));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    /// Construct without the finite check. For internal buffers whose
    /// producer already guarantees finiteness.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_raw(shape.to_vec(), vec![0.0; numel])
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::from_raw(vec![], vec![v])
    }

    pub fn vector(data: Vec<f32>) -> Self {
        let n = data.len();
        Tensor::from_raw(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel = shape.iter().product();
        Tensor::from_raw(shape.to_vec(), (0..numel).map(&mut f).collect())
    }

    pub fn eye(n: usize) -> Self {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn is_finite(&self) -> bool {
        kernels::all_finite(&self.data)
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_raw(shape.to_vec(), self.data.clone()))
    }

    fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::invalid(format!("{op} expects a 2-d tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let (_, c) = match self.shape.as_slice() {
            [_, c] => (0, *c),
            _ => panic!("row() on non-2d tensor"),
        };
        &self.data[i * c..(i + 1) * c]
    }

    fn check_finite(self, op: &'static str) -> Result<Tensor> {
        if kernels::all_finite(&self.data) {
            Ok(self)
        } else {
            Err(Error::non_finite(op))
        }
    }

    /// `self (m×k) @ other (k×n) -> (m×n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols("matmul")?;
        let (k2, n) = other.rows_cols("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.data, &other.data, &mut out, m, k, n);
        Tensor::from_raw(vec![m, n], out).check_finite("matmul")
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.rows_cols("transpose")?;
        let mut out = vec![0.0; r * c];
        kernels::transpose(&self.data, &mut out, r, c);
        Ok(Tensor::from_raw(vec![c, r], out))
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| f(*a, *b))
            .collect();
        Tensor::from_raw(self.shape.clone(), data).check_finite(op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f32) -> Result<Tensor> {
        let data = self.data.iter().map(|a| a * c).collect();
        Tensor::from_raw(self.shape.clone(), data).check_finite("scale")
    }

    /// Add a length-`cols` bias vector to every row of a 2-d tensor.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, c) = self.rows_cols("add_row")?;
        if bias.shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        kernels::add_row(&mut out, &bias.data);
        Tensor::from_raw(self.shape.clone(), out).check_finite("add_row")
    }

    /// Subtract a length-`cols` vector from every row of a 2-d tensor.
    pub fn sub_row(&self, row: &Tensor) -> Result<Tensor> {
        let (r, c) = self.rows_cols("sub_row")?;
        if row.shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "sub_row",
                lhs: self.shape.clone(),
                rhs: row.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for i in 0..r {
            for (x, &b) in out[i * c..(i + 1) * c].iter_mut().zip(&row.data) {
                *x -= b;
            }
        }
        Tensor::from_raw(self.shape.clone(), out).check_finite("sub_row")
    }

    /// Column means of a 2-d tensor as a length-`cols` f32 vector tensor,
    /// accumulated in f64.
    pub fn col_mean_tensor(&self) -> Result<Tensor> {
        let means = self.col_means()?;
        Ok(Tensor::vector(means.iter().map(|&x| x as f32).collect()))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|&x| kernels::sigmoid(x)).collect();
        Tensor::from_raw(self.shape.clone(), data).check_finite("sigmoid")
    }

    pub fn gelu(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|&x| kernels::gelu(x)).collect();
        Tensor::from_raw(self.shape.clone(), data).check_finite("gelu")
    }

    /// Row-wise softmax over the last dimension of a 2-d tensor.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (r, c) = self.rows_cols("softmax_rows")?;
        let mut out = self.data.clone();
        for i in 0..r {
            kernels::softmax_inplace(&mut out[i * c..(i + 1) * c]);
        }
        Tensor::from_raw(self.shape.clone(), out).check_finite("softmax_rows")
    }

    /// Row-wise layer normalization with learned scale/shift.
    pub fn layer_norm_rows(&self, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
        let (r, c) = self.rows_cols("layer_norm_rows")?;
        if gamma.shape != [c] || beta.shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm_rows",
                lhs: self.shape.clone(),
                rhs: gamma.shape.clone(),
            });
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            kernels::layer_norm(
                &self.data[i * c..(i + 1) * c],
                &gamma.data,
                &beta.data,
                eps,
                &mut out[i * c..(i + 1) * c],
            );
        }
        Tensor::from_raw(self.shape.clone(), out).check_finite("layer_norm_rows")
    }

    /// Gather rows of a 2-d table by index: `out[i, :] = self[idx[i], :]`.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = self.rows_cols("gather_rows")?;
        for &i in idx {
            if i >= r {
                return Err(Error::invalid(format!("gather_rows index {i} out of range {r}")));
            }
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Ok(Tensor::from_raw(vec![idx.len(), c], out))
    }

    /// Rows `[start, start+len)` of a 2-d tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.rows_cols("slice_rows")?;
        if start + len > r {
            return Err(Error::invalid(format!(
                "slice_rows [{start}, {}) out of range for {r} rows",
                start + len
            )));
        }
        Ok(Tensor::from_raw(vec![len, c], self.data[start * c..(start + len) * c].to_vec()))
    }

    /// Columns `[start, start+len)` of a 2-d tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.rows_cols("slice_cols")?;
        if start + len > c {
            return Err(Error::invalid(format!(
                "slice_cols [{start}, {}) out of range for {c} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + start + len]);
        }
        Ok(Tensor::from_raw(vec![r, len], out))
    }

    /// Concatenate 2-d tensors with equal row counts along columns.
    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols of zero tensors"));
        }
        let (r, _) = parts[0].rows_cols("concat_cols")?;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.rows_cols("concat_cols")?;
            if pr != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let pc = p.shape[1];
                out.extend_from_slice(&p.data[i * pc..(i + 1) * pc]);
            }
        }
        Ok(Tensor::from_raw(vec![r, total], out))
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&self) -> f64 {
        kernels::sum_f64(&self.data)
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.sum() / self.data.len() as f64
    }

    /// Column means of a 2-d tensor, accumulated in f64.
    pub fn col_means(&self) -> Result<Vec<f64>> {
        let (r, c) = self.rows_cols("col_means")?;
        let mut acc = vec![0.0f64; c];
        for i in 0..r {
            for (a, &v) in acc.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *a += v as f64;
            }
        }
        for a in &mut acc {
            *a /= r.max(1) as f64;
        }
        Ok(acc)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        let mut best_v = f32::NEG_INFINITY;
        for (i, &v) in self.data.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        best
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(kernels::dot_f64(&self.data, &other.data))
    }

    pub fn norm(&self) -> f64 {
        kernels::dot_f64(&self.data, &self.data).sqrt()
    }
}

/// Unchecked numeric kernels shared by the plain and taped execution paths.
pub mod kernels {
    pub fn all_finite(xs: &[f32]) -> bool {
        xs.iter().all(|x| x.is_finite())
    }

    /// C += A(m×k) B(k×n), row-major. Overwrites C.
    pub fn matmul(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        if m == 0 || k == 0 || n == 0 {
            c.fill(0.0);
            return;
        }
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    /// C = A(m×k) B(n×k)ᵀ -> (m×n).
    pub fn matmul_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), n * k);
        debug_assert_eq!(c.len(), m * n);
        if m == 0 || k == 0 || n == 0 {
            c.fill(0.0);
            return;
        }
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                1,
                k as isize,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    /// C = A(k×m)ᵀ B(k×n) -> (m×n). `accumulate` adds into C instead of overwriting.
    pub fn matmul_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, accumulate: bool) {
        debug_assert_eq!(a.len(), k * m);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        if m == 0 || n == 0 {
            if !accumulate {
                c.fill(0.0);
            }
            return;
        }
        if k == 0 {
            if !accumulate {
                c.fill(0.0);
            }
            return;
        }
        let beta = if accumulate { 1.0 } else { 0.0 };
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                1,
                m as isize,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    pub fn transpose(a: &[f32], out: &mut [f32], r: usize, c: usize) {
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
    }

    pub fn add_row(rows: &mut [f32], bias: &[f32]) {
        let c = bias.len();
        for row in rows.chunks_exact_mut(c) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
    }

    pub fn sigmoid(x: f32) -> f32 {
        1.0 / (1.0 + (-x).exp())
    }

    pub fn sigmoid_grad(y: f32) -> f32 {
        // derivative expressed through the forward output
        y * (1.0 - y)
    }

    /// GeLU, tanh approximation (the GPT-2/J variant).
    pub fn gelu(x: f32) -> f32 {
        const C: f32 = 0.797_884_6; // sqrt(2/pi)
        0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
    }

    pub fn gelu_grad(x: f32) -> f32 {
        const C: f32 = 0.797_884_6;
        let u = C * (x + 0.044715 * x * x * x);
        let t = u.tanh();
        let du = C * (1.0 + 3.0 * 0.044715 * x * x);
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
    }

    pub fn softmax_inplace(row: &mut [f32]) {
        let mut max = f32::NEG_INFINITY;
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v as f64;
        }
        let inv = (1.0 / sum) as f32;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }

    pub fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) {
        let n = x.len();
        let mean = (sum_f64(x) / n as f64) as f32;
        let mut var = 0.0f64;
        for &v in x {
            let d = (v - mean) as f64;
            var += d * d;
        }
        let inv = 1.0 / (((var / n as f64) as f32) + eps).sqrt();
        for i in 0..n {
            out[i] = (x[i] - mean) * inv * gamma[i] + beta[i];
        }
    }

    pub fn sum_f64(xs: &[f32]) -> f64 {
        xs.iter().map(|&x| x as f64).sum()
    }

    pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    /// Mean of (a-b)^2 in f64.
    pub fn mse(a: &[f32], b: &[f32]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        if a.is_empty() {
            return 0.0;
        }
        let mut s = 0.0f64;
        for (&x, &y) in a.iter().zip(b) {
            let d = x as f64 - y as f64;
            s += d * d;
        }
        s / a.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        let t = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let s = t.softmax_rows().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::matrix(3, 3, vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        let i = Tensor::eye(3);
        let out = i.matmul(&a).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(kernels::sigmoid(0.0), 0.5);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn non_finite_rejected() {
        let err = Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        // overflow through an op is also caught
        let big = Tensor::vector(vec![f32::MAX]);
        assert!(big.scale(2.0).is_err());
    }

    #[test]
    fn matmul_nt_tn_agree_with_explicit_transpose() {
        let a = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::matrix(4, 3, (0..12).map(|i| i as f32 * 0.5).collect()).unwrap();
        // a @ b^T
        let mut out = vec![0.0; 8];
        kernels::matmul_nt(a.data(), b.data(), &mut out, 2, 3, 4);
        let expect = a.matmul(&b.transpose().unwrap()).unwrap();
        assert_eq!(out, expect.data());

        // a^T @ a2 where a is (2x3): a^T is (3x2)
        let a2 = Tensor::matrix(2, 5, (0..10).map(|i| i as f32).collect()).unwrap();
        let mut out2 = vec![0.0; 15];
        kernels::matmul_tn(a.data(), a2.data(), &mut out2, 3, 2, 5, false);
        let expect2 = a.transpose().unwrap().matmul(&a2).unwrap();
        assert_eq!(out2, expect2.data());
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gamma = Tensor::vector(vec![1.0; 4]);
        let beta = Tensor::vector(vec![0.0; 4]);
        let y = x.layer_norm_rows(&gamma, &beta, 1e-5).unwrap();
        assert!(y.mean().abs() < 1e-6);
        let var: f64 = y.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 4.0;
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn gather_and_slice() {
        let t = Tensor::matrix(3, 2, vec![0., 1., 10., 11., 20., 21.]).unwrap();
        let g = t.gather_rows(&[2, 0]).unwrap();
        assert_eq!(g.data(), &[20., 21., 0., 1.]);
        let s = t.slice_cols(1, 1).unwrap();
        assert_eq!(s.data(), &[1., 11., 21.]);
        let c = Tensor::concat_cols(&[&s, &s]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.data(), &[1., 1., 11., 11., 21., 21.]);
    }
}
