//! Deterministic synthetic data with known ground truth: planted helices
//! for subspace-recovery oracles and an externally-shaped activation dump
//! for exercising the import path without a producing model.

use crate::error::Result;
use crate::manifold::{basis_eval, BasisSpec};
use crate::numerics::Tensor;
use crate::trace::{export_dump, PromptInfo, Site, SiteKey, Trace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::path::Path;

/// Random d×p coefficient matrix with N(0, scale²) entries. Full column
/// rank with overwhelming probability for d ≫ p.
pub fn random_coefficients(d: usize, p: usize, scale: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scale).unwrap();
    let data: Vec<f32> = (0..d * p).map(|_| normal.sample(&mut rng) as f32).collect();
    Tensor::matrix(d, p, data).unwrap()
}

/// h(v) = C*·B(v) + ε with ε ~ N(0, noise_sigma²) i.i.d. per component.
/// `spec.max_value` must already reflect the intended linear scaling.
pub fn helix_vectors(
    c_star: &Tensor,
    spec: &BasisSpec,
    values: &[i64],
    noise_sigma: f64,
    seed: u64,
) -> Result<BTreeMap<i64, Tensor>> {
    let d = c_star.shape()[0];
    let p = c_star.shape()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let mut out = BTreeMap::new();
    for &v in values {
        let b = basis_eval(spec, v as f64)?;
        debug_assert_eq!(b.len(), p);
        let bt = Tensor::matrix(1, p, b)?;
        let mut h = bt.matmul(&c_star.transpose()?)?.reshape(&[d])?;
        if noise_sigma > 0.0 {
            let noise: Vec<f32> = (0..d).map(|_| normal.sample(&mut rng) as f32).collect();
            h = h.add(&Tensor::vector(noise))?;
        }
        out.insert(v, h);
    }
    Ok(out)
}

/// Write an activation dump shaped like a large pretrained model's residual
/// stream: d=4096, 28 layers, one vector per a ∈ [0, 400) at the operand
/// position, generated from a helix with periods [2, 5, 10, 100] whose
/// feature magnitude grows with period, plus isotropic noise. Every period
/// divides the window, so each one sits on an integer DFT bin.
pub fn external_style_dump(dir: &Path, seed: u64) -> Result<()> {
    let d = 4096;
    let n_layers = 28;
    let periods = [2.0, 5.0, 10.0, 100.0];
    let spec = BasisSpec::helix(&periods).with_max_value(399.0);
    let p = spec.n_columns();
    let mut c = random_coefficients(d, p, 1.0, seed);
    // amplitude grows with period; linear column kept moderate
    let col_scale: Vec<f32> = std::iter::once(2.0f32)
        .chain(periods.iter().flat_map(|t| {
            let s = (*t as f32).sqrt();
            [s, s]
        }))
        .collect();
    {
        let data = c.data_mut();
        for r in 0..d {
            for j in 0..p {
                data[r * p + j] *= col_scale[j] / (d as f32).sqrt();
            }
        }
    }
    let values: Vec<i64> = (0..400).collect();
    let signal_rms = {
        let clean = helix_vectors(&c, &spec, &values, 0.0, 0)?;
        let total: f64 = clean.values().map(|t| t.data().iter().map(|&x| (x as f64).powi(2)).sum::<f64>()).sum();
        (total / (values.len() * d) as f64).sqrt()
    };
    let data = helix_vectors(&c, &spec, &values, signal_rms / 100.0, seed ^ 0x9e3779b9)?;
    let key = SiteKey::new(1, Site::ResidPre, 1);
    let traces: Vec<Trace> = data
        .into_iter()
        .map(|(a, h)| {
            let mut t = Trace::new(PromptInfo { a, b: 0, task: "identity".into(), correct: true });
            t.insert(key, h);
            t
        })
        .collect();
    export_dump(
        &traces,
        serde_json::json!({
            "d_model": d,
            "n_layers": n_layers,
            "source": "synthetic",
            "site": key.to_string(),
        }),
        dir,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::fourier_structure;
    use crate::trace::import_dump;

    #[test]
    fn generators_are_deterministic() {
        let c1 = random_coefficients(8, 2, 1.0, 5);
        let c2 = random_coefficients(8, 2, 1.0, 5);
        assert_eq!(c1.data(), c2.data());
        let spec = BasisSpec::circle(&[10.0]);
        let v: Vec<i64> = (0..10).collect();
        let a = helix_vectors(&c1, &spec, &v, 0.01, 3).unwrap();
        let b = helix_vectors(&c1, &spec, &v, 0.01, 3).unwrap();
        for k in &v {
            assert_eq!(a[k].data(), b[k].data());
        }
    }

    #[test]
    fn external_dump_has_expected_shape_and_periods() {
        let dir = tempfile::tempdir().unwrap();
        external_style_dump(dir.path(), 12).unwrap();
        let (desc, traces) = import_dump(dir.path()).unwrap();
        assert_eq!(desc["d_model"], 4096);
        assert_eq!(desc["n_layers"], 28);
        assert_eq!(traces.len(), 400);
        let key = SiteKey::new(1, Site::ResidPre, 1);
        let vectors: BTreeMap<i64, Tensor> =
            traces.iter().map(|t| (t.info.a, t.get(&key).unwrap().clone())).collect();
        assert_eq!(vectors[&0].shape(), &[4096]);
        let fs = fourier_structure(&vectors).unwrap();
        let mut tops = fs.top_periods(4);
        tops.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(tops, vec![2.0, 5.0, 10.0, 100.0]);
    }
}
