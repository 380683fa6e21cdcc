//! Generalized-helix and baseline fits over captured activations.
//!
//! A fit models per-value residual vectors as h(v) ≈ C·B(v) + μ where B is a
//! fixed basis (helix, circle, polynomial) or a learned PCA baseline, all
//! parameter-matched so comparisons are fair. The pipeline mirrors the
//! capture → center → PCA → ridge regression → lift-back recipe and exposes
//! the projection C†(h−μ) used everywhere downstream.

use crate::error::{Error, Result};
use crate::model::container::{read_container, write_container};
use crate::numerics::linalg::ridge_pinv;
use crate::numerics::{dft_spectrum, least_squares, pca_fit, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

/// Periods used for base-10 style representations.
pub const DEFAULT_PERIODS: [f64; 4] = [2.0, 5.0, 10.0, 100.0];

/// Ridge strength for the regression and the pseudo-inverse. Large enough to
/// resolve the intentionally collinear joint-fit linear columns, small
/// enough to leave well-conditioned bases untouched.
pub const RIDGE_EPS: f64 = 1e-6;

/// Dimension the residual stream is reduced to before basis regression.
pub const DEFAULT_PCA_DIM: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Helix,
    Circle,
    Polynomial,
    PcaBaseline,
}

/// Parameter-matched basis family: for k periods, helix spends 2k+1
/// parameters (linear + cos/sin per period), circle 2k, polynomial 2k+1
/// (degrees 1..2k+1), PCA baseline 2k+1 components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub periods: Vec<f64>,
    pub includes_linear: bool,
    pub degree: usize,
    /// Scale for the linear and polynomial columns: v is mapped to
    /// v/max_value so ridge treats all columns comparably. Set from the
    /// fitted domain by `fit_manifold`.
    pub max_value: f64,
}

impl BasisSpec {
    pub fn helix(periods: &[f64]) -> Self {
        BasisSpec {
            kind: BasisKind::Helix,
            periods: periods.to_vec(),
            includes_linear: true,
            degree: 0,
            max_value: 1.0,
        }
    }

    pub fn circle(periods: &[f64]) -> Self {
        BasisSpec {
            kind: BasisKind::Circle,
            periods: periods.to_vec(),
            includes_linear: false,
            degree: 0,
            max_value: 1.0,
        }
    }

    /// Polynomial matched to a k-period helix: degrees 1..=2k+1.
    pub fn polynomial(k: usize) -> Self {
        BasisSpec {
            kind: BasisKind::Polynomial,
            periods: Vec::new(),
            includes_linear: false,
            degree: 2 * k + 1,
            max_value: 1.0,
        }
    }

    /// PCA baseline matched to a k-period helix: 2k+1 components.
    pub fn pca_baseline(k: usize) -> Self {
        BasisSpec {
            kind: BasisKind::PcaBaseline,
            periods: Vec::new(),
            includes_linear: false,
            degree: 2 * k + 1,
            max_value: 1.0,
        }
    }

    pub fn with_max_value(mut self, max_value: f64) -> Self {
        self.max_value = max_value;
        self
    }

    pub fn n_columns(&self) -> usize {
        match self.kind {
            BasisKind::Helix | BasisKind::Circle => {
                2 * self.periods.len() + usize::from(self.includes_linear)
            }
            BasisKind::Polynomial | BasisKind::PcaBaseline => self.degree,
        }
    }

    pub fn column_labels(&self) -> Vec<String> {
        let mut labels = Vec::with_capacity(self.n_columns());
        match self.kind {
            BasisKind::Helix | BasisKind::Circle => {
                if self.includes_linear {
                    labels.push("linear".to_string());
                }
                for t in &self.periods {
                    labels.push(format!("cos(T={t})"));
                    labels.push(format!("sin(T={t})"));
                }
            }
            BasisKind::Polynomial => {
                for j in 1..=self.degree {
                    labels.push(format!("v^{j}"));
                }
            }
            BasisKind::PcaBaseline => {
                for j in 0..self.degree {
                    labels.push(format!("pc{j}"));
                }
            }
        }
        labels
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BasisKind::Helix | BasisKind::Circle => {
                if self.periods.is_empty() {
                    return Err(Error::invalid("basis needs at least one period"));
                }
                for (i, t) in self.periods.iter().enumerate() {
                    if !t.is_finite() || *t <= 0.0 {
                        return Err(Error::invalid(format!("period {t} must be positive")));
                    }
                    if self.periods[..i].iter().any(|u| (u - t).abs() < 1e-9) {
                        return Err(Error::invalid(format!("duplicate period {t} degenerates the basis")));
                    }
                }
            }
            BasisKind::Polynomial | BasisKind::PcaBaseline => {
                if self.degree == 0 {
                    return Err(Error::invalid("basis needs at least one column"));
                }
            }
        }
        Ok(())
    }
}

/// Evaluate the basis at a (possibly non-integer, possibly out-of-domain)
/// value. Columns are ordered [linear?, cos(2πv/T₁), sin(2πv/T₁), …]; the
/// linear and polynomial columns use v/max_value.
pub fn basis_eval(spec: &BasisSpec, v: f64) -> Result<Vec<f32>> {
    spec.validate()?;
    let scaled = v / spec.max_value;
    let mut row = Vec::with_capacity(spec.n_columns());
    match spec.kind {
        BasisKind::Helix | BasisKind::Circle => {
            if spec.includes_linear {
                row.push(scaled as f32);
            }
            for t in &spec.periods {
                let theta = TAU * v / t;
                row.push(theta.cos() as f32);
                row.push(theta.sin() as f32);
            }
        }
        BasisKind::Polynomial => {
            let mut acc = 1.0f64;
            for _ in 0..spec.degree {
                acc *= scaled;
                row.push(acc as f32);
            }
        }
        BasisKind::PcaBaseline => {
            return Err(Error::invalid("pca_baseline has no closed-form basis; use the fitted coordinates"));
        }
    }
    Ok(row)
}

/// Stack basis rows for a list of values into an n×p design matrix.
pub fn basis_matrix(spec: &BasisSpec, values: &[i64]) -> Result<Tensor> {
    let p = spec.n_columns();
    let mut data = Vec::with_capacity(values.len() * p);
    for &v in values {
        data.extend_from_slice(&basis_eval(spec, v as f64)?);
    }
    Tensor::matrix(values.len(), p, data)
}

/// Indices of basis columns that vary over `values`. sin(2πv/T) vanishes on
/// every integer when T divides 2, so that coefficient column carries no
/// signal and cannot be recovered from data; span comparisons against a
/// known C should restrict to these columns.
pub fn identifiable_columns(spec: &BasisSpec, values: &[i64]) -> Result<Vec<usize>> {
    let b = basis_matrix(spec, values)?;
    let b_bar = b.col_mean_tensor()?;
    let bc = b.sub_row(&b_bar)?;
    let p = spec.n_columns();
    let n = values.len();
    let norms: Vec<f64> = (0..p)
        .map(|j| (0..n).map(|i| (bc.data()[i * p + j] as f64).powi(2)).sum::<f64>().sqrt())
        .collect();
    let max = norms.iter().cloned().fold(0.0f64, f64::max);
    Ok((0..p).filter(|&j| norms[j] > 1e-8 * max.max(1.0)).collect())
}

/// Copy the listed columns of a d×p matrix into a new d×k matrix.
pub fn take_columns(c: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (d, p) = match c.shape() {
        [d, p] => (*d, *p),
        s => return Err(Error::ShapeMismatch { op: "take_columns", lhs: vec![2], rhs: s.to_vec() }),
    };
    let mut data = Vec::with_capacity(d * idx.len());
    for r in 0..d {
        for &j in idx {
            if j >= p {
                return Err(Error::invalid("column index out of range"));
            }
            data.push(c.data()[r * p + j]);
        }
    }
    Tensor::matrix(d, idx.len(), data)
}

/// A fitted subspace: h(v) ≈ C·B(v) + μ with the ridge pseudo-inverse C†
/// providing coordinates C†(h−μ).
#[derive(Clone, Debug)]
pub struct ManifoldFit {
    pub basis: BasisSpec,
    /// d×p coefficient matrix.
    pub c: Tensor,
    /// Data mean, length d.
    pub mean: Tensor,
    /// p×d projection.
    pub c_pinv: Tensor,
    /// Values the fit saw, sorted.
    pub values: Vec<i64>,
    pub layer: Option<usize>,
    pub role: Option<String>,
    /// Fraction of centered variance explained by the full fit.
    pub r2: f64,
    /// Marginal R² per basis column: drop in explained variance when that
    /// column's coefficients are zeroed, holding the others fixed.
    pub column_r2: Vec<f64>,
    /// Per-value coordinates; analytic B(v) for parametric bases, learned
    /// scores for the PCA baseline.
    value_coords: BTreeMap<i64, Vec<f32>>,
}

fn stack_vectors(vectors: &BTreeMap<i64, Tensor>) -> Result<(Vec<i64>, Tensor)> {
    let values: Vec<i64> = vectors.keys().copied().collect();
    let d = vectors
        .values()
        .next()
        .ok_or_else(|| Error::Insufficient { what: "vectors".into(), need: 1, have: 0 })?
        .numel();
    let mut data = Vec::with_capacity(values.len() * d);
    for t in vectors.values() {
        if t.numel() != d {
            return Err(Error::ShapeMismatch { op: "stack_vectors", lhs: vec![d], rhs: t.shape().to_vec() });
        }
        data.extend_from_slice(t.data());
    }
    Ok((values, Tensor::matrix(vectors.len(), d, data)?))
}

fn sum_sq(t: &[f32]) -> f64 {
    t.iter().map(|&x| (x as f64) * (x as f64)).sum()
}

/// Fit the basis to one vector per value: center, reduce to `pca_dim`
/// dimensions, ridge-regress the basis onto the scores, and lift the
/// coefficients back to residual space.
pub fn fit_manifold(vectors: &BTreeMap<i64, Tensor>, spec: &BasisSpec, pca_dim: usize) -> Result<ManifoldFit> {
    spec.validate()?;
    let (values, x) = stack_vectors(vectors)?;
    let n = values.len();
    let d = x.shape()[1];
    let p = spec.n_columns();
    if n < p {
        return Err(Error::Insufficient { what: "distinct values".into(), need: p, have: n });
    }
    let max_value = values.iter().copied().max().unwrap_or(1).max(1) as f64;
    let spec = spec.clone().with_max_value(max_value);

    let mu = x.col_mean_tensor()?;
    let xc = x.sub_row(&mu)?;

    if spec.kind == BasisKind::PcaBaseline {
        let pca = pca_fit(&x, p.min(n - 1).min(d))?;
        let scores = pca.transform(&x)?; // n×p
        let c = pca.components.transpose()?; // d×p
        let c_pinv = pca.components.clone(); // rows orthonormal, so C† = Cᵀ
        let recon = scores.matmul(&pca.components)?;
        let sst = sum_sq(xc.data());
        let sse = sum_sq(xc.sub(&recon)?.data());
        let r2 = if sst > 0.0 { 1.0 - sse / sst } else { 0.0 };
        let total: f64 = pca.explained_variance.iter().sum::<f64>().max(f64::MIN_POSITIVE);
        let column_r2: Vec<f64> = pca
            .explained_variance
            .iter()
            .map(|v| r2 * v / total)
            .collect();
        let mut value_coords = BTreeMap::new();
        let k = scores.shape()[1];
        for (i, &v) in values.iter().enumerate() {
            value_coords.insert(v, scores.data()[i * k..(i + 1) * k].to_vec());
        }
        return Ok(ManifoldFit {
            basis: spec,
            c,
            mean: mu,
            c_pinv,
            values,
            layer: None,
            role: None,
            r2,
            column_r2,
            value_coords,
        });
    }

    // The basis has no intercept column, so the regression runs on
    // column-centered B against centered scores. The basis mean is folded
    // into μ afterwards, which keeps reconstruction at C·B(v) + μ and makes
    // projected coordinates land in raw basis units.
    let b = basis_matrix(&spec, &values)?;
    let b_bar = b.col_mean_tensor()?;
    let bc = b.sub_row(&b_bar)?;
    let k = pca_dim.max(1).min(n - 1).min(d);
    let pca = pca_fit(&x, k)?;
    let scores = pca.transform(&x)?; // n×k
    let c_pca = least_squares(&bc, &scores, RIDGE_EPS)?; // k×p
    let c = pca.components.transpose()?.matmul(&c_pca)?; // d×p
    let c_pinv = ridge_pinv(&c, RIDGE_EPS)?;
    let c_b_bar = b_bar.reshape(&[1, p])?.matmul(&c.transpose()?)?.reshape(&[d])?;
    let mean = mu.sub(&c_b_bar)?;

    let recon = bc.matmul(&c.transpose()?)?; // n×d, approximates xc
    let sst = sum_sq(xc.data()).max(f64::MIN_POSITIVE);
    let sse = sum_sq(xc.sub(&recon)?.data());
    let r2 = 1.0 - sse / sst;
    let mut column_r2 = Vec::with_capacity(p);
    for j in 0..p {
        let mut cj = c.clone();
        for r in 0..d {
            cj.data_mut()[r * p + j] = 0.0;
        }
        let recon_j = bc.matmul(&cj.transpose()?)?;
        let sse_j = sum_sq(xc.sub(&recon_j)?.data());
        column_r2.push((sse_j - sse) / sst);
    }

    let mut value_coords = BTreeMap::new();
    for &v in &values {
        value_coords.insert(v, basis_eval(&spec, v as f64)?);
    }
    Ok(ManifoldFit {
        basis: spec,
        c,
        mean,
        c_pinv,
        values,
        layer: None,
        role: None,
        r2,
        column_r2,
        value_coords,
    })
}

impl ManifoldFit {
    pub fn dim(&self) -> usize {
        self.c.shape()[0]
    }

    pub fn n_columns(&self) -> usize {
        self.c.shape()[1]
    }

    /// Coordinates of the fitted (or, for parametric bases, any) value.
    pub fn coords_for(&self, v: i64) -> Result<Vec<f32>> {
        if let Some(c) = self.value_coords.get(&v) {
            return Ok(c.clone());
        }
        basis_eval(&self.basis, v as f64)
    }

    /// Mean coordinate vector over the fitted values.
    pub fn mean_coords(&self) -> Vec<f32> {
        let p = self.n_columns();
        let mut m = vec![0.0f64; p];
        for coords in self.value_coords.values() {
            for (acc, &c) in m.iter_mut().zip(coords) {
                *acc += c as f64;
            }
        }
        let n = self.value_coords.len().max(1) as f64;
        m.iter().map(|&x| (x / n) as f32).collect()
    }
}

/// C†(h−μ) for `h` shaped [d] or [n, d]; returns [p] or [n, p].
pub fn project_subspace(fit: &ManifoldFit, h: &Tensor) -> Result<Tensor> {
    let d = fit.dim();
    match h.shape() {
        [w] if *w == d => {
            let centered = h.sub(&fit.mean)?.reshape(&[1, d])?;
            let coords = centered.matmul(&fit.c_pinv.transpose()?)?;
            coords.reshape(&[fit.n_columns()])
        }
        [_, w] if *w == d => {
            let centered = h.sub_row(&fit.mean)?;
            centered.matmul(&fit.c_pinv.transpose()?)
        }
        s => Err(Error::ShapeMismatch { op: "project_subspace", lhs: vec![d], rhs: s.to_vec() }),
    }
}

/// C·B(v) + μ.
pub fn reconstruct(fit: &ManifoldFit, v: i64) -> Result<Tensor> {
    let coords = fit.coords_for(v)?;
    reconstruct_from_coords(fit, &coords)
}

/// C·coords + μ for explicit coordinates.
pub fn reconstruct_from_coords(fit: &ManifoldFit, coords: &[f32]) -> Result<Tensor> {
    let p = fit.n_columns();
    if coords.len() != p {
        return Err(Error::ShapeMismatch { op: "reconstruct", lhs: vec![p], rhs: vec![coords.len()] });
    }
    let coord_t = Tensor::matrix(1, p, coords.to_vec())?;
    let lifted = coord_t.matmul(&fit.c.transpose()?)?;
    lifted.reshape(&[fit.dim()])?.add(&fit.mean)
}

/// Which operand functions enter a joint basis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JointPart {
    A,
    Sum,
    B,
}

impl JointPart {
    pub fn value(&self, a: i64, b: i64) -> i64 {
        match self {
            JointPart::A => a,
            JointPart::B => b,
            JointPart::Sum => a + b,
        }
    }
}

/// The full a, b, a+b joint basis.
pub const JOINT_ALL: [JointPart; 3] = [JointPart::A, JointPart::B, JointPart::Sum];

/// Joint last-token fit over prompt pairs: columns [B(a) | B(b) | B(a+b)]
/// (or the subset selected by `parts`). With all three parts the linear
/// columns are exactly collinear; the ridge resolves them.
#[derive(Clone, Debug)]
pub struct JointFit {
    pub basis: BasisSpec,
    pub parts: Vec<JointPart>,
    /// d×(parts·p).
    pub c: Tensor,
    pub mean: Tensor,
    /// (parts·p)×d.
    pub c_pinv: Tensor,
    pub pairs: Vec<(i64, i64)>,
    pub r2: f64,
}

pub fn joint_basis_eval(spec: &BasisSpec, parts: &[JointPart], a: i64, b: i64) -> Result<Vec<f32>> {
    let mut row = Vec::with_capacity(parts.len() * spec.n_columns());
    for part in parts {
        row.extend(basis_eval(spec, part.value(a, b) as f64)?);
    }
    Ok(row)
}

pub fn fit_joint(
    vectors: &BTreeMap<(i64, i64), Tensor>,
    spec: &BasisSpec,
    pca_dim: usize,
    parts: &[JointPart],
) -> Result<JointFit> {
    spec.validate()?;
    if spec.kind == BasisKind::PcaBaseline {
        return Err(Error::invalid("joint fit needs a parametric basis"));
    }
    if parts.is_empty() {
        return Err(Error::invalid("joint fit needs at least one basis part"));
    }
    let pairs: Vec<(i64, i64)> = vectors.keys().copied().collect();
    let n = pairs.len();
    let p3 = parts.len() * spec.n_columns();
    if n < p3 {
        return Err(Error::Insufficient { what: "prompt pairs", need: p3, have: n });
    }
    let d = vectors.values().next().unwrap().numel();
    let mut data = Vec::with_capacity(n * d);
    for t in vectors.values() {
        if t.numel() != d {
            return Err(Error::ShapeMismatch { op: "fit_joint", lhs: vec![d], rhs: t.shape().to_vec() });
        }
        data.extend_from_slice(t.data());
    }
    let x = Tensor::matrix(n, d, data)?;
    let max_value = pairs
        .iter()
        .flat_map(|&(a, b)| parts.iter().map(move |part| part.value(a, b)))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let spec = spec.clone().with_max_value(max_value);

    let mut b_data = Vec::with_capacity(n * p3);
    for &(a, b) in &pairs {
        b_data.extend_from_slice(&joint_basis_eval(&spec, parts, a, b)?);
    }
    let b = Tensor::matrix(n, p3, b_data)?;

    // Same centered-basis treatment as fit_manifold; the exactly collinear
    // linear columns survive centering and are resolved by the ridge.
    let b_bar = b.col_mean_tensor()?;
    let bc = b.sub_row(&b_bar)?;
    let mu = x.col_mean_tensor()?;
    let xc = x.sub_row(&mu)?;
    let k = pca_dim.max(1).min(n - 1).min(d);
    let pca = pca_fit(&x, k)?;
    let scores = pca.transform(&x)?;
    let c_pca = least_squares(&bc, &scores, RIDGE_EPS)?;
    let c = pca.components.transpose()?.matmul(&c_pca)?;
    let c_pinv = ridge_pinv(&c, RIDGE_EPS)?;
    let c_b_bar = b_bar.reshape(&[1, p3])?.matmul(&c.transpose()?)?.reshape(&[d])?;
    let mean = mu.sub(&c_b_bar)?;
    let recon = bc.matmul(&c.transpose()?)?;
    let sst = sum_sq(xc.data()).max(f64::MIN_POSITIVE);
    let sse = sum_sq(xc.sub(&recon)?.data());
    Ok(JointFit { basis: spec, parts: parts.to_vec(), c, mean, c_pinv, pairs, r2: 1.0 - sse / sst })
}

pub fn reconstruct_joint(fit: &JointFit, a: i64, b: i64) -> Result<Tensor> {
    let coords = joint_basis_eval(&fit.basis, &fit.parts, a, b)?;
    let p3 = coords.len();
    let coord_t = Tensor::matrix(1, p3, coords)?;
    let lifted = coord_t.matmul(&fit.c.transpose()?)?;
    lifted.reshape(&[fit.c.shape()[0]])?.add(&fit.mean)
}

/// Mean DFT magnitude across dimensions for vectors indexed by a contiguous
/// integer range.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FourierStructure {
    pub n_values: usize,
    /// Cycles over the full range, 1..=n/2.
    pub freq: Vec<usize>,
    pub period: Vec<f64>,
    pub magnitude: Vec<f64>,
}

impl FourierStructure {
    /// Periods of the k largest peaks, sorted by descending magnitude.
    pub fn top_periods(&self, k: usize) -> Vec<f64> {
        let mut order: Vec<usize> = (0..self.magnitude.len()).collect();
        order.sort_by(|&i, &j| self.magnitude[j].partial_cmp(&self.magnitude[i]).unwrap());
        order.into_iter().take(k).map(|i| self.period[i]).collect()
    }

    /// Fraction of total (non-DC) spectral energy in the k largest bins.
    pub fn top_k_energy(&self, k: usize) -> f64 {
        let mut e: Vec<f64> = self.magnitude.iter().map(|m| m * m).collect();
        let total: f64 = e.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        e.sort_by(|x, y| y.partial_cmp(x).unwrap());
        e.iter().take(k).sum::<f64>() / total
    }
}

pub fn fourier_structure(vectors: &BTreeMap<i64, Tensor>) -> Result<FourierStructure> {
    let (values, x) = stack_vectors(vectors)?;
    let n = values.len();
    if n < 4 {
        return Err(Error::Insufficient { what: "values for a spectrum".into(), need: 4, have: n });
    }
    for (i, w) in values.windows(2).enumerate() {
        if w[1] != w[0] + 1 {
            return Err(Error::invalid(format!(
                "fourier_structure needs a contiguous value range; gap after {} (index {i})",
                w[0]
            )));
        }
    }
    let d = x.shape()[1];
    let n_bins = n / 2;
    let mut magnitude = vec![0.0f64; n_bins];
    let mut signal = vec![0.0f32; n];
    for j in 0..d {
        for i in 0..n {
            signal[i] = x.data()[i * d + j];
        }
        let bins = dft_spectrum(&signal)?;
        for (acc, bin) in magnitude.iter_mut().zip(&bins) {
            *acc += bin.magnitude as f64 / d as f64;
        }
    }
    let freq: Vec<usize> = (1..=n_bins).collect();
    let period: Vec<f64> = freq.iter().map(|&f| n as f64 / f as f64).collect();
    Ok(FourierStructure { n_values: n, freq, period, magnitude })
}

/// Pairwise Euclidean distance and cosine similarity matrices over the
/// values in sorted order.
pub fn similarity_matrices(vectors: &BTreeMap<i64, Tensor>) -> Result<(Tensor, Tensor)> {
    let (values, x) = stack_vectors(vectors)?;
    let n = values.len();
    if n < 2 {
        return Err(Error::Insufficient { what: "vectors".into(), need: 2, have: n });
    }
    let d = x.shape()[1];
    let mut euclid = vec![0.0f32; n * n];
    let mut cosine = vec![0.0f32; n * n];
    let row = |i: usize| &x.data()[i * d..(i + 1) * d];
    let norms: Vec<f64> = (0..n).map(|i| sum_sq(row(i)).sqrt()).collect();
    for i in 0..n {
        for j in i..n {
            let (a, b) = (row(i), row(j));
            let mut dist = 0.0f64;
            let mut dot = 0.0f64;
            for (&ai, &bi) in a.iter().zip(b) {
                let diff = (ai - bi) as f64;
                dist += diff * diff;
                dot += ai as f64 * bi as f64;
            }
            let e = dist.sqrt() as f32;
            let c = if i == j {
                1.0
            } else if norms[i] < 1e-12 || norms[j] < 1e-12 {
                0.0
            } else {
                (dot / (norms[i] * norms[j])) as f32
            };
            euclid[i * n + j] = e;
            euclid[j * n + i] = e;
            cosine[i * n + j] = c;
            cosine[j * n + i] = c;
        }
    }
    Ok((Tensor::matrix(n, n, euclid)?, Tensor::matrix(n, n, cosine)?))
}

/// Mean ‖h(a) − h(a+δ)‖ for each offset δ, over all a where both ends exist.
pub fn distance_vs_offset(vectors: &BTreeMap<i64, Tensor>, max_offset: i64) -> Result<Vec<(i64, f64)>> {
    if vectors.len() < 2 {
        return Err(Error::Insufficient { what: "vectors".into(), need: 2, have: vectors.len() });
    }
    let mut curve = Vec::new();
    for delta in 1..=max_offset {
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (&a, h) in vectors {
            if let Some(h2) = vectors.get(&(a + delta)) {
                let mut dist = 0.0f64;
                for (&x, &y) in h.data().iter().zip(h2.data()) {
                    let diff = (x - y) as f64;
                    dist += diff * diff;
                }
                total += dist.sqrt();
                count += 1;
            }
        }
        if count > 0 {
            curve.push((delta, total / count as f64));
        }
    }
    Ok(curve)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeldOutProjection {
    pub value: i64,
    /// Angle in the dominant period's (cos, sin) plane, radians.
    pub angle: f64,
    /// True when the angle falls on the arc between the projected fitted
    /// neighbors v−1 and v+1.
    pub ordered: bool,
}

#[derive(Clone, Debug)]
pub struct ContinuityReport {
    pub fit: ManifoldFit,
    pub dominant_period: f64,
    pub held_out: Vec<HeldOutProjection>,
    pub fraction_ordered: f64,
}

fn wrap_angle(x: f64) -> f64 {
    let mut y = x % TAU;
    if y > std::f64::consts::PI {
        y -= TAU;
    }
    if y <= -std::f64::consts::PI {
        y += TAU;
    }
    y
}

/// Fit on all values except `held_out`, then project the held-out vectors
/// and check each lands between its fitted neighbors in the dominant
/// period's angular coordinate.
pub fn continuity_probe(
    vectors: &BTreeMap<i64, Tensor>,
    held_out: &[i64],
    spec: &BasisSpec,
    pca_dim: usize,
) -> Result<ContinuityReport> {
    if !matches!(spec.kind, BasisKind::Helix | BasisKind::Circle) {
        return Err(Error::invalid("continuity probe needs a trigonometric basis"));
    }
    for v in held_out {
        if !vectors.contains_key(v) {
            return Err(Error::invalid(format!("held-out value {v} not in the data")));
        }
    }
    let train: BTreeMap<i64, Tensor> = vectors
        .iter()
        .filter(|(v, _)| !held_out.contains(v))
        .map(|(v, t)| (*v, t.clone()))
        .collect();
    let fit = fit_manifold(&train, spec, pca_dim)?;

    // dominant period by coefficient-column energy of its (cos, sin) pair
    let p = fit.n_columns();
    let d = fit.dim();
    let offset = usize::from(fit.basis.includes_linear);
    let col_energy = |j: usize| -> f64 {
        (0..d).map(|r| (fit.c.data()[r * p + j] as f64).powi(2)).sum()
    };
    let (dom_idx, _) = fit
        .basis
        .periods
        .iter()
        .enumerate()
        .map(|(i, _)| (i, col_energy(offset + 2 * i) + col_energy(offset + 2 * i + 1)))
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap();
    let dominant_period = fit.basis.periods[dom_idx];
    let (ci, si) = (offset + 2 * dom_idx, offset + 2 * dom_idx + 1);

    let angle_of = |h: &Tensor| -> Result<f64> {
        let coords = project_subspace(&fit, h)?;
        Ok((coords.data()[si] as f64).atan2(coords.data()[ci] as f64))
    };

    let mut report = Vec::with_capacity(held_out.len());
    let mut ordered_count = 0usize;
    for &v in held_out {
        let angle = angle_of(&vectors[&v])?;
        let lo = train.range(..v).next_back().map(|(k, t)| (*k, t));
        let hi = train.range(v + 1..).next().map(|(k, t)| (*k, t));
        let ordered = match (lo, hi) {
            (Some((_, hl)), Some((_, hh))) => {
                let th_lo = angle_of(hl)?;
                let th_hi = angle_of(hh)?;
                let span = wrap_angle(th_hi - th_lo);
                let pos = wrap_angle(angle - th_lo);
                span != 0.0 && pos.signum() == span.signum() && pos.abs() <= span.abs()
            }
            _ => false,
        };
        if ordered {
            ordered_count += 1;
        }
        report.push(HeldOutProjection { value: v, angle, ordered });
    }
    let fraction = if report.is_empty() { 0.0 } else { ordered_count as f64 / report.len() as f64 };
    Ok(ContinuityReport { fit, dominant_period, held_out: report, fraction_ordered: fraction })
}

/// Column norms and pairwise cosine similarity of C's columns.
#[derive(Clone, Debug)]
pub struct FitGeometry {
    pub labels: Vec<String>,
    pub column_norms: Vec<f64>,
    /// p×p cosine similarity.
    pub cosine: Tensor,
}

pub fn analyze_fit_geometry(fit: &ManifoldFit) -> Result<FitGeometry> {
    let p = fit.n_columns();
    let d = fit.dim();
    let col = |j: usize| -> Vec<f64> { (0..d).map(|r| fit.c.data()[r * p + j] as f64).collect() };
    let cols: Vec<Vec<f64>> = (0..p).map(col).collect();
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut cosine = vec![0.0f32; p * p];
    for i in 0..p {
        for j in 0..p {
            let denom = norms[i] * norms[j];
            cosine[i * p + j] = if denom < 1e-18 {
                0.0
            } else {
                (cols[i].iter().zip(&cols[j]).map(|(x, y)| x * y).sum::<f64>() / denom) as f32
            };
        }
    }
    Ok(FitGeometry {
        labels: fit.basis.column_labels(),
        column_norms: norms,
        cosine: Tensor::matrix(p, p, cosine)?,
    })
}

#[derive(Serialize, Deserialize)]
struct FitMeta {
    kind: String,
    basis: BasisSpec,
    values: Vec<i64>,
    layer: Option<usize>,
    role: Option<String>,
    r2: f64,
    column_r2: Vec<f64>,
}

/// Persist a fit in the shared container format.
pub fn save_fit(fit: &ManifoldFit, dir: &Path) -> Result<()> {
    let meta = FitMeta {
        kind: "fit".into(),
        basis: fit.basis.clone(),
        values: fit.values.clone(),
        layer: fit.layer,
        role: fit.role.clone(),
        r2: fit.r2,
        column_r2: fit.column_r2.clone(),
    };
    let p = fit.n_columns();
    let n = fit.values.len();
    let mut coords = Vec::with_capacity(n * p);
    for v in &fit.values {
        coords.extend_from_slice(&fit.value_coords[v]);
    }
    let coords_t = Tensor::matrix(n, p, coords)?;
    write_container(
        dir,
        serde_json::to_value(&meta)?,
        &[
            ("c".into(), &fit.c),
            ("mean".into(), &fit.mean),
            ("c_pinv".into(), &fit.c_pinv),
            ("value_coords".into(), &coords_t),
        ],
    )
}

pub fn load_fit(dir: &Path) -> Result<ManifoldFit> {
    if !dir.join("manifest.json").exists() {
        return Err(Error::MissingArtifact {
            path: dir.display().to_string(),
            producer: "helixlab fit".into(),
        });
    }
    let (meta_value, arrays) = read_container(dir)?;
    let meta: FitMeta = serde_json::from_value(meta_value)
        .map_err(|e| Error::DumpFormat(format!("fit manifest: {e}")))?;
    if meta.kind != "fit" {
        return Err(Error::DumpFormat(format!("expected kind=fit, got {}", meta.kind)));
    }
    let mut map: BTreeMap<String, Tensor> = arrays.into_iter().collect();
    let mut take = |name: &str| -> Result<Tensor> {
        map.remove(name).ok_or_else(|| Error::DumpFormat(format!("fit container missing array {name}")))
    };
    let c = take("c")?;
    let mean = take("mean")?;
    let c_pinv = take("c_pinv")?;
    let coords_t = take("value_coords")?;
    let p = c.shape()[1];
    let mut value_coords = BTreeMap::new();
    for (i, &v) in meta.values.iter().enumerate() {
        value_coords.insert(v, coords_t.data()[i * p..(i + 1) * p].to_vec());
    }
    Ok(ManifoldFit {
        basis: meta.basis,
        c,
        mean,
        c_pinv,
        values: meta.values,
        layer: meta.layer,
        role: meta.role,
        r2: meta.r2,
        column_r2: meta.column_r2,
        value_coords,
    })
}
