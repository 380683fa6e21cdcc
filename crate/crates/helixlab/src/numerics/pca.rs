//! Principal component analysis via symmetric Jacobi eigendecomposition.
//!
//! When d > n the Gram matrix route is used: eigenvectors of XXᵀ (n×n) are
//! lifted to right singular vectors, so dumps with d up to 4096 but only a
//! few hundred prompts stay cheap.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Fitted PCA basis.
#[derive(Clone, Debug)]
pub struct PcaModel {
    /// Column means of the training data (length d).
    pub mean: Vec<f32>,
    /// Principal directions, one per row (k×d), rows orthonormal.
    pub components: Tensor,
    /// Variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
    /// True when the data had rank < requested k and fewer components
    /// were returned.
    pub truncated: bool,
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), sorted descending.
pub fn jacobi_eigh(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0f64; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * frob.max(1e-300);
    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= tol / (n as f64) {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[j * n + j]
            .partial_cmp(&m[i * n + i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let eigvals: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut eigvecs = vec![0.0f64; n * n];
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            eigvecs[row * n + col] = v[row * n + src];
        }
    }
    (eigvals, eigvecs)
}

/// Fit a top-`k` PCA basis to the rows of `x` (n×d).
pub fn pca_fit(x: &Tensor, k: usize) -> Result<PcaModel> {
    let (n, d) = match x.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::invalid(format!("pca_fit expects 2-d data, got {s:?}"))),
    };
    if n < 2 {
        return Err(Error::Insufficient { what: "samples", need: 2, have: n });
    }
    if k == 0 || k > (n - 1).min(d) {
        return Err(Error::invalid(format!(
            "pca_fit: k={k} out of range 1..={}",
            (n - 1).min(d)
        )));
    }
    let mean: Vec<f64> = x.col_means()?;
    // centered data in f64
    let mut xc = vec![0.0f64; n * d];
    for i in 0..n {
        for j in 0..d {
            xc[i * d + j] = x.data()[i * d + j] as f64 - mean[j];
        }
    }

    let (eigvals, comps) = if d > n {
        // Gram route: G = Xc Xcᵀ, right vectors vᵢ = Xcᵀ uᵢ / ‖·‖
        let mut g = vec![0.0f64; n * n];
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for t in 0..d {
                    s += xc[i * d + t] * xc[j * d + t];
                }
                g[i * n + j] = s;
                g[j * n + i] = s;
            }
        }
        let (vals, vecs) = jacobi_eigh(&g, n);
        let mut comps = Vec::new();
        for c in 0..n {
            if vals[c] <= 0.0 {
                break;
            }
            let mut row = vec![0.0f64; d];
            for i in 0..n {
                let u = vecs[i * n + c];
                if u != 0.0 {
                    for t in 0..d {
                        row[t] += u * xc[i * d + t];
                    }
                }
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                break;
            }
            for v in &mut row {
                *v /= norm;
            }
            comps.push(row);
        }
        (vals, comps)
    } else {
        // covariance route: S = Xcᵀ Xc (d×d)
        let mut s = vec![0.0f64; d * d];
        for r in 0..n {
            for i in 0..d {
                let xi = xc[r * d + i];
                for j in i..d {
                    s[i * d + j] += xi * xc[r * d + j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                s[i * d + j] = s[j * d + i];
            }
        }
        let (vals, vecs) = jacobi_eigh(&s, d);
        let comps = (0..d)
            .map(|c| (0..d).map(|row| vecs[row * d + c]).collect::<Vec<f64>>())
            .collect::<Vec<_>>();
        (vals, comps)
    };

    // drop zero-variance directions; eigvals here are unnormalized (sum of squares)
    let scale = 1.0 / (n as f64 - 1.0);
    let lead = eigvals.first().copied().unwrap_or(0.0).max(0.0);
    let cutoff = (lead * 1e-10).max(1e-24);
    let mut kept: Vec<(f64, Vec<f64>)> = Vec::new();
    for (i, comp) in comps.into_iter().enumerate() {
        if kept.len() == k {
            break;
        }
        if eigvals[i] <= cutoff {
            break;
        }
        kept.push((eigvals[i] * scale, comp));
    }
    if kept.is_empty() {
        return Err(Error::RankDeficient { op: "pca_fit" });
    }
    let truncated = kept.len() < k;
    // deterministic sign: largest-|coefficient| element made positive
    let mut flat = Vec::with_capacity(kept.len() * d);
    let mut variances = Vec::with_capacity(kept.len());
    for (var, mut comp) in kept {
        let mut best = 0usize;
        for (j, v) in comp.iter().enumerate() {
            if v.abs() > comp[best].abs() {
                best = j;
            }
        }
        if comp[best] < 0.0 {
            for v in &mut comp {
                *v = -*v;
            }
        }
        flat.extend(comp.iter().map(|&v| v as f32));
        variances.push(var);
    }
    let kk = variances.len();
    Ok(PcaModel {
        mean: mean.iter().map(|&v| v as f32).collect(),
        components: Tensor::matrix(kk, d, flat)?,
        explained_variance: variances,
        truncated,
    })
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.components.shape()[1]
    }

    /// Project rows of `x` (n×d) onto the basis: (X − mean) Cᵀ -> (n×k).
    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.dim();
        let centered = {
            let (n, xd) = match x.shape() {
                [n, xd] => (*n, *xd),
                s => return Err(Error::invalid(format!("transform expects 2-d, got {s:?}"))),
            };
            if xd != d {
                return Err(Error::ShapeMismatch {
                    op: "pca_transform",
                    lhs: x.shape().to_vec(),
                    rhs: vec![n, d],
                });
            }
            let mut buf = x.data().to_vec();
            for row in buf.chunks_exact_mut(d) {
                for (v, m) in row.iter_mut().zip(&self.mean) {
                    *v -= m;
                }
            }
            Tensor::from_raw(vec![n, d], buf)
        };
        centered.matmul(&self.components.transpose()?)
    }

    /// Map scores (n×k) back to data space: S C + mean.
    pub fn inverse_transform(&self, scores: &Tensor) -> Result<Tensor> {
        let recon = scores.matmul(&self.components)?;
        recon.add_row(&Tensor::vector(self.mean.clone()))
    }

    /// Fraction of total variance captured by the kept components.
    /// Meaningful only on the model's own training data.
    pub fn explained_ratio(&self, total_variance: f64) -> f64 {
        if total_variance <= 0.0 {
            return 0.0;
        }
        self.explained_variance.iter().sum::<f64>() / total_variance
    }
}

/// Total per-coordinate variance of rows of `x`, the PCA energy budget.
pub fn total_variance(x: &Tensor) -> Result<f64> {
    let (n, d) = match x.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::invalid(format!("total_variance expects 2-d, got {s:?}"))),
    };
    if n < 2 {
        return Ok(0.0);
    }
    let mean = x.col_means()?;
    let mut acc = 0.0f64;
    for i in 0..n {
        for j in 0..d {
            let dlt = x.data()[i * d + j] as f64 - mean[j];
            acc += dlt * dlt;
        }
    }
    Ok(acc / (n as f64 - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    #[test]
    fn line_in_3d_is_one_dimensional() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let dir = [0.6f32, -0.64, 0.48];
        let mut data = Vec::new();
        for _ in 0..50 {
            let t: f32 = rng.gen_range(-2.0..2.0);
            for d in dir {
                data.push(3.0 + t * d);
            }
        }
        let x = Tensor::matrix(50, 3, data).unwrap();
        let model = pca_fit(&x, 2).unwrap();
        assert!(model.truncated, "rank-1 data must truncate k=2");
        let total = total_variance(&x).unwrap();
        assert!(model.explained_variance[0] / total >= 0.999);
    }

    #[test]
    fn equal_variance_directions() {
        // alternating unit steps along x and y
        let mut data = Vec::new();
        for i in 0..40 {
            let (a, b) = match i % 4 {
                0 => (1.0, 0.0),
                1 => (-1.0, 0.0),
                2 => (0.0, 1.0),
                _ => (0.0, -1.0),
            };
            data.extend_from_slice(&[a, b, 0.0]);
        }
        let x = Tensor::matrix(40, 3, data).unwrap();
        let model = pca_fit(&x, 2).unwrap();
        let ratio = model.explained_variance[0] / model.explained_variance[1];
        assert!((ratio - 1.0).abs() < 1e-6, "ratio {ratio}");
    }

    #[test]
    fn rank_k_data_reconstructs_exactly() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        // 3 orthogonal directions in 8-d
        let k = 3;
        let d = 8;
        let n = 60;
        let mut basis = vec![0.0f32; k * d];
        basis[0] = 1.0;
        basis[d + 2] = 1.0;
        basis[2 * d + 5] = 1.0;
        let b = Tensor::matrix(k, d, basis).unwrap();
        let coeffs = Tensor::matrix(n, k, (0..n * k).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let x = coeffs.matmul(&b).unwrap();
        let model = pca_fit(&x, k).unwrap();
        let recon = model.inverse_transform(&model.transform(&x).unwrap()).unwrap();
        for (a, e) in recon.data().iter().zip(x.data()) {
            assert!((a - e).abs() <= 1e-4, "{a} vs {e}");
        }
    }

    #[test]
    fn gram_route_matches_covariance_route() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let n = 12;
        let d = 30; // d > n forces the Gram route
        let x = Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let model = pca_fit(&x, 4).unwrap();
        // rows orthonormal
        for i in 0..4 {
            for j in 0..4 {
                let ri = Tensor::vector(model.components.row(i).to_vec());
                let rj = Tensor::vector(model.components.row(j).to_vec());
                let ip = ri.dot(&rj).unwrap();
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((ip - target).abs() < 1e-4, "({i},{j}) -> {ip}");
            }
        }
        // projection of training data along PC1 has the max variance among PCs
        assert!(model
            .explained_variance
            .windows(2)
            .all(|w| w[0] >= w[1] - 1e-9));
    }

    #[test]
    fn transform_inverse_is_identity_on_subspace() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::matrix(25, 6, (0..150).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let model = pca_fit(&x, 5).unwrap();
        let scores = model.transform(&x).unwrap();
        let recon = model.inverse_transform(&scores).unwrap();
        let scores2 = model.transform(&recon).unwrap();
        for (a, e) in scores2.data().iter().zip(scores.data()) {
            assert!((a - e).abs() < 1e-4);
        }
    }
}
