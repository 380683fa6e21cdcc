//! Naive discrete Fourier transform for periodicity probes.
//!
//! Signals here are short (n ≤ 4096), so the O(n²) transform is fine and
//! keeps the arithmetic order fixed.

use crate::error::{Error, Result};

/// One frequency bin of a real DFT.
#[derive(Clone, Copy, Debug)]
pub struct SpectrumBin {
    /// Cycles over the full signal length, 1..=n/2.
    pub freq: usize,
    /// Period in samples, n / freq.
    pub period: f64,
    /// Amplitude, scaled so a unit cosine has magnitude 1.
    pub magnitude: f64,
    /// Phase offset in radians: the bin fits magnitude·cos(2πf·t/n − phase).
    pub phase: f64,
}

/// Magnitude spectrum of a real signal, mean-centered internally.
/// Returns bins for frequencies 1..=n/2 in that order.
pub fn dft_spectrum(signal: &[f32]) -> Result<Vec<SpectrumBin>> {
    let n = signal.len();
    if n < 2 {
        return Err(Error::Insufficient { what: "samples", need: 2, have: n });
    }
    if !signal.iter().all(|v| v.is_finite()) {
        return Err(Error::non_finite("dft_spectrum input"));
    }
    let mean = signal.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let x: Vec<f64> = signal.iter().map(|&v| v as f64 - mean).collect();
    let mut bins = Vec::with_capacity(n / 2);
    for f in 1..=n / 2 {
        let w = 2.0 * std::f64::consts::PI * f as f64 / n as f64;
        let mut re = 0.0f64;
        let mut im = 0.0f64;
        for (t, &v) in x.iter().enumerate() {
            let ang = w * t as f64;
            re += v * ang.cos();
            im += v * ang.sin();
        }
        // 2/n so that cos(2πft/n) yields magnitude 1 (Nyquist keeps the
        // same scale; only ratios are read there)
        let scale = 2.0 / n as f64;
        bins.push(SpectrumBin {
            freq: f,
            period: n as f64 / f as f64,
            magnitude: scale * (re * re + im * im).sqrt(),
            phase: im.atan2(re),
        });
    }
    Ok(bins)
}

/// The bin with the largest magnitude. Ties break toward lower frequency.
pub fn dominant_bin(bins: &[SpectrumBin]) -> Option<SpectrumBin> {
    let mut best: Option<SpectrumBin> = None;
    for b in bins {
        match &best {
            Some(cur) if b.magnitude <= cur.magnitude => {}
            _ => best = Some(*b),
        }
    }
    best
}

/// Σ magnitude² over all bins.
pub fn total_energy(bins: &[SpectrumBin]) -> f64 {
    bins.iter().map(|b| b.magnitude * b.magnitude).sum()
}

/// Fraction of spectral energy held by the `k` largest bins.
pub fn top_k_energy_fraction(bins: &[SpectrumBin], k: usize) -> f64 {
    let total = total_energy(bins);
    if total <= 0.0 {
        return 0.0;
    }
    let mut energies: Vec<f64> = bins.iter().map(|b| b.magnitude * b.magnitude).collect();
    energies.sort_by(|a, b| b.partial_cmp(a).unwrap());
    energies.iter().take(k).sum::<f64>() / total
}
