//! Phase-correlation proxy for structure similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::fft2;
use crate::tensor::LatentTensor;

/// Number of radial frequency bands in the report.
pub const BANDS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseCorrelationReport {
    /// Reference-magnitude-weighted mean of `cos(ΔP)`, averaged over channels.
    pub global: f64,
    /// Same statistic per radial band, low to high frequency; `None` for
    /// bands with no weight.
    pub band: Vec<Option<f64>>,
    /// Frequency bins that contributed (non-DC, non-zero weight).
    pub n_bins: usize,
}

/// `Σ w·cos(P_ref − P_out) / Σ w` with `w = |FFT(reference)|`, DC excluded.
pub fn phase_correlation(
    reference: &LatentTensor,
    output: &LatentTensor,
) -> Result<PhaseCorrelationReport> {
    if reference.dim() != output.dim() {
        return Err(Error::param(
            "output",
            format!("shape mismatch {:?} vs {:?}", reference.dim(), output.dim()),
        ));
    }
    let r = fft2(reference)?;
    let o = fft2(output)?;
    let (c, h, w) = r.dim();

    let mut channel_scores = Vec::with_capacity(c);
    let mut band_num = [0.0; BANDS];
    let mut band_den = [0.0; BANDS];
    let mut n_bins = 0;
    for ch in 0..c {
        let (mut num, mut den) = (0.0, 0.0);
        for u in 0..h {
            for v in 0..w {
                if u == 0 && v == 0 {
                    continue;
                }
                let weight = r.magnitude[[ch, u, v]];
                if weight <= 0.0 {
                    continue;
                }
                let score = weight * (r.phase[[ch, u, v]] - o.phase[[ch, u, v]]).cos();
                num += score;
                den += weight;
                n_bins += 1;
                let b = radial_band(u, v, h, w);
                band_num[b] += score;
                band_den[b] += weight;
            }
        }
        if den > 0.0 {
            channel_scores.push(num / den);
        }
    }
    if channel_scores.is_empty() {
        return Err(Error::Data(
            "reference has no non-DC spectral energy".into(),
        ));
    }
    let global = channel_scores.iter().sum::<f64>() / channel_scores.len() as f64;
    let band = band_num
        .iter()
        .zip(&band_den)
        .map(|(n, d)| (*d > 0.0).then(|| (n / d).clamp(-1.0, 1.0)))
        .collect();
    Ok(PhaseCorrelationReport {
        global: global.clamp(-1.0, 1.0),
        band,
        n_bins,
    })
}

/// Band index from the normalized radial frequency, `|f| / |f_nyquist|`.
fn radial_band(u: usize, v: usize, h: usize, w: usize) -> usize {
    let fy = wrapped(u, h);
    let fx = wrapped(v, w);
    let radius = (fy * fy + fx * fx).sqrt() / 0.5f64.hypot(0.5);
    ((radius * BANDS as f64) as usize).min(BANDS - 1)
}

/// Signed frequency of bin `k` in cycles per sample, in `[−0.5, 0.5)`.
fn wrapped(k: usize, n: usize) -> f64 {
    let f = k as f64 / n as f64;
    if f >= 0.5 {
        f - 1.0
    } else {
        f
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::ptm;
    use crate::tensor::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field(seed: u64) -> LatentTensor {
        randn((1, 16, 16), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn self_and_negation() {
        let z = field(1);
        let same = phase_correlation(&z, &z).unwrap();
        assert!((same.global - 1.0).abs() < 1e-9);
        assert!(same.n_bins > 0);
        let neg = phase_correlation(&z, &z.mapv(|v| -v)).unwrap();
        assert!((neg.global + 1.0).abs() < 1e-9);
    }

    #[test]
    fn independent_fields_are_uncorrelated() {
        for seed in 0..20 {
            let r = phase_correlation(&field(seed), &field(seed + 100)).unwrap();
            assert!(r.global.abs() < 0.2, "seed {seed}: {}", r.global);
        }
    }

    #[test]
    fn positive_scaling_is_invisible() {
        let (a, b) = (field(2), field(3));
        let base = phase_correlation(&a, &b).unwrap();
        for c in [0.01, 3.0, 1e4] {
            let scaled = phase_correlation(&a, &b.mapv(|v| c * v)).unwrap();
            assert!((scaled.global - base.global).abs() < 1e-12);
        }
    }

    #[test]
    fn monotone_in_blend_weight() {
        for seed in 0..10 {
            let (g, s) = (field(seed), field(seed + 50));
            let scores: Vec<f64> = [0.0, 0.5, 1.0]
                .iter()
                .map(|&b| {
                    phase_correlation(&g, &ptm(&g, &s, b).unwrap())
                        .unwrap()
                        .global
                })
                .collect();
            assert!(
                scores[0] <= scores[1] && scores[1] <= scores[2],
                "{scores:?}"
            );
        }
    }

    #[test]
    fn errors() {
        assert!(phase_correlation(
            &field(1),
            &randn((1, 8, 8), &mut ChaCha8Rng::seed_from_u64(0))
        )
        .is_err());
        let flat = LatentTensor::from_elem((1, 4, 4), 2.0);
        assert!(matches!(
            phase_correlation(&flat, &field(1).slice_move(ndarray::s![.., ..4, ..4])),
            Err(Error::Data(_))
        ));
    }
}
