//! Small dense solves in f64: Cholesky, ridge least squares, pseudo-inverse.
//!
//! The fit bases here are tiny (p ≤ 27 columns) and well conditioned once
//! ridge-regularized, so normal equations beat a general SVD for clarity
//! and determinism.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix
/// given row-major in f64. Fails on a non-positive pivot.
pub fn cholesky(a: &[f64], n: usize, op: &'static str) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::Singular { op });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solve `A X = B` for SPD `A` (n×n) and `B` (n×m), row-major f64.
pub fn solve_spd(a: &[f64], b: &[f64], n: usize, m: usize, op: &'static str) -> Result<Vec<f64>> {
    let l = cholesky(a, n, op)?;
    let mut x = b.to_vec();
    // forward: L y = b
    for col in 0..m {
        for i in 0..n {
            let mut s = x[i * m + col];
            for k in 0..i {
                s -= l[i * n + k] * x[k * m + col];
            }
            x[i * m + col] = s / l[i * n + i];
        }
        // back: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x[i * m + col];
            for k in i + 1..n {
                s -= l[k * n + i] * x[k * m + col];
            }
            x[i * m + col] = s / l[i * n + i];
        }
    }
    Ok(x)
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| x as f64).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Ridge least squares: find `C` (d×p) minimizing ‖Y − B Cᵀ‖² + ε‖C‖²
/// with `B` (n×p) and `Y` (n×d). Normal equations: Cᵀ = (BᵀB + εI)⁻¹ BᵀY.
pub fn least_squares(b: &Tensor, y: &Tensor, ridge: f64) -> Result<Tensor> {
    let (n, p) = match b.shape() {
        [n, p] => (*n, *p),
        s => return Err(Error::invalid(format!("least_squares: B must be 2-d, got {s:?}"))),
    };
    let (ny, d) = match y.shape() {
        [n, d] => (*n, *d),
        s => return Err(Error::invalid(format!("least_squares: Y must be 2-d, got {s:?}"))),
    };
    if n != ny {
        return Err(Error::ShapeMismatch {
            op: "least_squares",
            lhs: b.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if n < p {
        return Err(Error::Insufficient { what: "rows", need: p, have: n });
    }
    let bv = to_f64(b);
    let yv = to_f64(y);
    // G = BᵀB + εI (p×p), M = BᵀY (p×d)
    let mut g = vec![0.0f64; p * p];
    for r in 0..n {
        for i in 0..p {
            let bi = bv[r * p + i];
            for j in i..p {
                g[i * p + j] += bi * bv[r * p + j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            g[i * p + j] = g[j * p + i];
        }
        g[i * p + i] += ridge;
    }
    let mut m = vec![0.0f64; p * d];
    for r in 0..n {
        for i in 0..p {
            let bi = bv[r * p + i];
            for j in 0..d {
                m[i * d + j] += bi * yv[r * d + j];
            }
        }
    }
    let ct = solve_spd(&g, &m, p, d, "least_squares")?; // p×d
    let mut c = vec![0.0f32; d * p];
    for i in 0..p {
        for j in 0..d {
            c[j * p + i] = ct[i * d + j] as f32;
        }
    }
    Tensor::matrix(d, p, c)
}

/// Ridge pseudo-inverse C† = (CᵀC + εI)⁻¹ Cᵀ for `C` (d×p) with p ≤ d,
/// without the left-inverse verification. Rank-deficient inputs (e.g. the
/// intentionally collinear joint operand basis) are allowed; the ridge picks
/// the minimum-norm solution on the degenerate directions.
pub(crate) fn ridge_pinv(c: &Tensor, ridge: f64) -> Result<Tensor> {
    let (d, p) = match c.shape() {
        [d, p] => (*d, *p),
        s => return Err(Error::invalid(format!("pinv: C must be 2-d, got {s:?}"))),
    };
    if p > d {
        return Err(Error::invalid(format!("pinv expects tall C (p ≤ d), got {d}×{p}")));
    }
    let cv = to_f64(c);
    let mut g = vec![0.0f64; p * p];
    for r in 0..d {
        for i in 0..p {
            let ci = cv[r * p + i];
            for j in i..p {
                g[i * p + j] += ci * cv[r * p + j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            g[i * p + j] = g[j * p + i];
        }
        g[i * p + i] += ridge;
    }
    // (p×p)⁻¹ Cᵀ: solve G X = Cᵀ with Cᵀ (p×d)
    let mut ct = vec![0.0f64; p * d];
    for i in 0..d {
        for j in 0..p {
            ct[j * d + i] = cv[i * p + j];
        }
    }
    let pinv = solve_spd(&g, &ct, p, d, "pinv")?;
    Tensor::matrix(p, d, to_f32(&pinv))
}

/// Moore-Penrose pseudo-inverse via ridge normal equations:
/// C† = (CᵀC + εI)⁻¹ Cᵀ for `C` (d×p) with p ≤ d.
///
/// Errors if the result fails C†C ≈ I beyond what ridge can absorb, which
/// indicates C is rank deficient.
pub fn pinv(c: &Tensor, ridge: f64) -> Result<Tensor> {
    let result = ridge_pinv(c, ridge)?;
    let (d, p) = (c.shape()[0], c.shape()[1]);
    let cv = to_f64(c);
    let pv = to_f64(&result);
    // verify C†C ≈ I_p
    let mut max_dev = 0.0f64;
    for i in 0..p {
        for j in 0..p {
            let mut s = 0.0f64;
            for k in 0..d {
                s += pv[i * d + k] * cv[k * p + j];
            }
            let target = if i == j { 1.0 } else { 0.0 };
            max_dev = max_dev.max((s - target).abs());
        }
    }
    if max_dev > 1e-2 {
        return Err(Error::RankDeficient { op: "pinv" });
    }
    Ok(result)
}

/// Orthonormalize the columns of `a` (d×p) by modified Gram-Schmidt in f64,
/// dropping columns whose residual norm falls below `tol` relative to the
/// largest column. Returns (Q as d×r tensor, rank r).
pub(crate) fn orthonormal_columns(a: &Tensor, tol: f64) -> Result<(Tensor, usize)> {
    let (d, p) = match a.shape() {
        [d, p] => (*d, *p),
        s => return Err(Error::invalid(format!("orthonormal_columns: need 2-d, got {s:?}"))),
    };
    let av = to_f64(a);
    let max_norm = (0..p)
        .map(|j| (0..d).map(|i| av[i * p + j] * av[i * p + j]).sum::<f64>().sqrt())
        .fold(0.0f64, f64::max);
    if max_norm == 0.0 {
        return Err(Error::RankDeficient { op: "orthonormal_columns" });
    }
    let mut q: Vec<Vec<f64>> = Vec::new();
    for j in 0..p {
        let mut v: Vec<f64> = (0..d).map(|i| av[i * p + j]).collect();
        for qcol in &q {
            let ip: f64 = v.iter().zip(qcol).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(qcol) {
                *x -= ip * y;
            }
        }
        // second pass for numerical cleanliness
        for qcol in &q {
            let ip: f64 = v.iter().zip(qcol).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(qcol) {
                *x -= ip * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > tol * max_norm {
            for x in v.iter_mut() {
                *x /= norm;
            }
            q.push(v);
        }
    }
    let r = q.len();
    let mut data = vec![0.0f32; d * r];
    for (j, col) in q.iter().enumerate() {
        for i in 0..d {
            data[i * r + j] = col[i] as f32;
        }
    }
    Ok((Tensor::matrix(d, r, data)?, r))
}

/// Largest principal angle (radians) between the column spans of `a` and `b`
/// (both d×p). Zero means identical subspaces.
pub fn principal_angle(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (qa, ra) = orthonormal_columns(a, 1e-10)?;
    let (qb, rb) = orthonormal_columns(b, 1e-10)?;
    if ra != rb {
        // spans of different dimension are maximally separated somewhere
        return Ok(std::f64::consts::FRAC_PI_2);
    }
    let d = qa.shape()[0];
    let qav = to_f64(&qa);
    let qbv = to_f64(&qb);
    // M = QaᵀQb (ra×rb); singular values are the cosines of the angles
    let mut m = vec![0.0f64; ra * rb];
    for i in 0..ra {
        for j in 0..rb {
            let mut s = 0.0;
            for k in 0..d {
                s += qav[k * ra + i] * qbv[k * rb + j];
            }
            m[i * rb + j] = s;
        }
    }
    // eigenvalues of MᵀM are σ²
    let mut mtm = vec![0.0f64; rb * rb];
    for i in 0..rb {
        for j in 0..rb {
            let mut s = 0.0;
            for k in 0..ra {
                s += m[k * rb + i] * m[k * rb + j];
            }
            mtm[i * rb + j] = s;
        }
    }
    let (eigvals, _) = crate::numerics::pca::jacobi_eigh(&mtm, rb);
    let min_sq = eigvals.last().copied().unwrap_or(0.0).clamp(0.0, 1.0);
    Ok(min_sq.sqrt().clamp(0.0, 1.0).acos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn rand_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn recovers_known_coefficients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let b = rand_matrix(&mut rng, 40, 5);
        let m = rand_matrix(&mut rng, 7, 5);
        let y = b.matmul(&m.transpose().unwrap()).unwrap();
        let c = least_squares(&b, &y, 1e-8).unwrap();
        for (a, e) in c.data().iter().zip(m.data()) {
            assert!((a - e).abs() < 1e-5, "{a} vs {e}");
        }
    }

    #[test]
    fn ones_column_gives_column_means() {
        let b = Tensor::matrix(4, 1, vec![1.0; 4]).unwrap();
        let y = Tensor::matrix(4, 2, vec![1., 10., 2., 20., 3., 30., 4., 40.]).unwrap();
        let c = least_squares(&b, &y, 1e-8).unwrap();
        assert!((c.data()[0] - 2.5).abs() < 1e-5);
        assert!((c.data()[1] - 25.0).abs() < 1e-4);
    }

    #[test]
    fn collinear_columns_need_ridge() {
        let b = Tensor::matrix(3, 2, vec![1., 2., 2., 4., 3., 6.]).unwrap();
        let y = Tensor::matrix(3, 1, vec![1., 2., 3.]).unwrap();
        let err = least_squares(&b, &y, 0.0).unwrap_err();
        assert!(err.to_string().contains("ridge"), "{err}");
        let c = least_squares(&b, &y, 1e-6).unwrap();
        assert!(c.is_finite());
    }

    #[test]
    fn residual_orthogonal_to_columns() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let b = rand_matrix(&mut rng, 30, 4);
        let y = rand_matrix(&mut rng, 30, 3);
        let c = least_squares(&b, &y, 1e-8).unwrap();
        let recon = b.matmul(&c.transpose().unwrap()).unwrap();
        let resid = y.sub(&recon).unwrap();
        for col in 0..4 {
            let bc = b.slice_cols(col, 1).unwrap();
            for rc in 0..3 {
                let r = resid.slice_cols(rc, 1).unwrap();
                let ip = bc.dot(&r).unwrap().abs();
                assert!(ip <= 1e-3 * bc.norm() * r.norm().max(1e-9), "col {col} inner {ip}");
            }
        }
    }

    #[test]
    fn pinv_of_orthonormal_is_transpose() {
        // columns e1, e3 in 4-d
        let c = Tensor::matrix(4, 2, vec![1., 0., 0., 0., 0., 1., 0., 0.]).unwrap();
        let p = pinv(&c, 1e-10).unwrap();
        let ct = c.transpose().unwrap();
        for (a, e) in p.data().iter().zip(ct.data()) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn pinv_single_column() {
        let c = Tensor::matrix(3, 1, vec![1., 2., 2.]).unwrap();
        let p = pinv(&c, 1e-12).unwrap();
        // vᵀ/‖v‖², ‖v‖²=9
        let expect = [1.0 / 9.0, 2.0 / 9.0, 2.0 / 9.0];
        for (a, e) in p.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn pinv_left_inverse_random() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let c = rand_matrix(&mut rng, 10, 4);
        let p = pinv(&c, 1e-10).unwrap();
        let prod = p.matmul(&c).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((prod.data()[i * 4 + j] - target).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn pinv_rejects_rank_deficient() {
        let c = Tensor::matrix(4, 2, vec![1., 2., 1., 2., 1., 2., 1., 2.]).unwrap();
        assert!(matches!(pinv(&c, 1e-8), Err(Error::RankDeficient { .. })));
        // the relaxed form still returns something finite
        assert!(ridge_pinv(&c, 1e-4).unwrap().is_finite());
    }

    #[test]
    fn principal_angle_identical_and_orthogonal() {
        let a = Tensor::matrix(4, 2, vec![1., 0., 0., 1., 0., 0., 0., 0.]).unwrap();
        // same span, different basis (rotated 45 degrees within the plane)
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let b = Tensor::matrix(4, 2, vec![s, s, s, -s, 0., 0., 0., 0.]).unwrap();
        // acos near 1 amplifies f32 rounding to ~1e-4 rad
        assert!(principal_angle(&a, &b).unwrap() < 1e-3);
        // orthogonal plane
        let c = Tensor::matrix(4, 2, vec![0., 0., 0., 0., 1., 0., 0., 1.]).unwrap();
        let angle = principal_angle(&a, &c).unwrap();
        assert!((angle - std::f64::consts::FRAC_PI_2).abs() < 1e-6);
    }

    #[test]
    fn principal_angle_known_tilt() {
        // span{e1} vs span{cos t · e1 + sin t · e2}
        let t = 0.3f64;
        let a = Tensor::matrix(3, 1, vec![1., 0., 0.]).unwrap();
        let b = Tensor::matrix(3, 1, vec![t.cos() as f32, t.sin() as f32, 0.]).unwrap();
        let angle = principal_angle(&a, &b).unwrap();
        assert!((angle - t).abs() < 1e-6, "{angle} vs {t}");
    }
}
