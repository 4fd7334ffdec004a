//! DDPM variance schedules and the coarse sampling grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    /// `beta` spaced uniformly between the endpoints.
    Linear,
    /// `sqrt(beta)` spaced uniformly, then squared (Stable Diffusion).
    ScaledLinear,
}

impl std::str::FromStr for BetaSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "scaled_linear" => Ok(Self::ScaledLinear),
            other => Err(Error::param("kind", format!("unknown schedule `{other}`"))),
        }
    }
}

/// The `ᾱ` schedule over the training grid.
///
/// `alpha_bar[0]` is the `t = 0` boundary and is exactly one, so every
/// training timestep `t ∈ [0, train_steps]` indexes directly.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: BetaSchedule,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(
        kind: BetaSchedule,
        train_steps: usize,
        beta_start: f64,
        beta_end: f64,
    ) -> Result<Self> {
        if train_steps == 0 {
            return Err(Error::param("train_steps", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::param(
                "beta_start",
                format!("{beta_start} not in (0, 1)"),
            ));
        }
        if !(beta_end >= beta_start && beta_end < 1.0) {
            return Err(Error::param(
                "beta_end",
                format!("{beta_end} not in [beta_start, 1)"),
            ));
        }
        let betas: Vec<f64> = match kind {
            BetaSchedule::Linear => linspace(beta_start, beta_end, train_steps),
            BetaSchedule::ScaledLinear => linspace(beta_start.sqrt(), beta_end.sqrt(), train_steps)
                .into_iter()
                .map(|b| b * b)
                .collect(),
        };
        let mut alpha_bar = Vec::with_capacity(train_steps + 1);
        alpha_bar.push(1.0);
        for beta in &betas {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - beta));
        }
        Ok(Self {
            kind,
            betas,
            alpha_bar,
        })
    }

    /// Stable Diffusion v1.x: scaled-linear 0.00085..0.012 over 1000 steps.
    pub fn stable_diffusion() -> Self {
        Self::new(BetaSchedule::ScaledLinear, 1000, 0.00085, 0.012).unwrap()
    }

    /// Classic DDPM: linear 1e-4..0.02 over 1000 steps.
    pub fn ddpm_linear() -> Self {
        Self::new(BetaSchedule::Linear, 1000, 1e-4, 0.02).unwrap()
    }

    pub fn kind(&self) -> BetaSchedule {
        self.kind
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    /// `betas[s - 1]` is the variance of forward step `s`.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `ᾱ_t`; `t = 0` gives one.
    ///
    /// Panics if `t` exceeds the training horizon.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub(crate) fn check_timestep(&self, t: usize, field: &'static str) -> Result<()> {
        if t > self.train_steps() {
            Err(Error::param(
                field,
                format!(
                    "timestep {t} beyond training horizon {}",
                    self.train_steps()
                ),
            ))
        } else {
            Ok(())
        }
    }
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    let step = (end - start) / (n - 1) as f64;
    (0..n).map(|i| start + step * i as f64).collect()
}

/// Training-grid timesteps visited by a coarse DDIM walk, descending to 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepMap {
    steps: Vec<usize>,
}

impl TimestepMap {
    /// Uniform stride `train_steps / steps`; `steps` must divide `train_steps`.
    pub fn subsample(train_steps: usize, steps: usize) -> Result<Self> {
        if steps == 0 || steps > train_steps {
            return Err(Error::param(
                "steps",
                format!("{steps} not in [1, {train_steps}]"),
            ));
        }
        if !train_steps.is_multiple_of(steps) {
            return Err(Error::param(
                "steps",
                format!("{steps} does not divide the training horizon {train_steps}"),
            ));
        }
        let stride = train_steps / steps;
        Ok(Self {
            steps: (0..=steps).map(|i| train_steps - i * stride).collect(),
        })
    }

    /// Number of coarse steps (one less than the number of grid points).
    pub fn len(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    /// Training timestep at coarse position `i` (0 is the noisiest end).
    pub fn at(&self, i: usize) -> usize {
        self.steps[i]
    }

    /// Position `offset` coarse steps after `i`, clamped to the grid ends.
    /// The flag reports whether clamping happened.
    pub fn offset(&self, i: usize, offset: i64) -> (usize, bool) {
        let target = i as i64 + offset;
        let last = self.len() as i64;
        let clamped = target.clamp(0, last);
        (clamped as usize, clamped != target)
    }

    /// Ascending walk `0 → train_steps`, as used by inversion.
    pub fn ascending(&self) -> impl Iterator<Item = usize> + '_ {
        self.steps.iter().rev().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_linear_products() {
        let s = NoiseSchedule::new(BetaSchedule::Linear, 1, 0.1, 0.1).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.9]);
        let s = NoiseSchedule::new(BetaSchedule::Linear, 2, 0.1, 0.3).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.63).abs() < 1e-15);
    }

    #[test]
    fn scaled_linear_endpoint_matches_frozen_product() {
        // Frozen from an independent float64 accumulation in numpy:
        // np.cumprod(1 - np.linspace(0.00085**.5, 0.012**.5, 1000)**2)[-1]
        let s = NoiseSchedule::stable_diffusion();
        let expected = 0.004_660_098_513_077_238_f64;
        assert!(((s.alpha_bar(1000) - expected) / expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_ranges() {
        let err = NoiseSchedule::new(BetaSchedule::Linear, 0, 0.1, 0.2).unwrap_err();
        assert!(matches!(
            err,
            Error::Parameter {
                field: "train_steps",
                ..
            }
        ));
        let err = NoiseSchedule::new(BetaSchedule::Linear, 10, 0.0, 0.2).unwrap_err();
        assert!(matches!(
            err,
            Error::Parameter {
                field: "beta_start",
                ..
            }
        ));
        let err = NoiseSchedule::new(BetaSchedule::Linear, 10, 0.3, 0.2).unwrap_err();
        assert!(matches!(
            err,
            Error::Parameter {
                field: "beta_end",
                ..
            }
        ));
        let err = NoiseSchedule::new(BetaSchedule::Linear, 10, 0.1, 1.0).unwrap_err();
        assert!(matches!(
            err,
            Error::Parameter {
                field: "beta_end",
                ..
            }
        ));
    }

    #[test]
    fn subsample_examples() {
        let full = TimestepMap::subsample(1000, 1000).unwrap();
        assert_eq!(
            full.steps(),
            (0..=1000).rev().collect::<Vec<_>>().as_slice()
        );
        let coarse = TimestepMap::subsample(1000, 100).unwrap();
        let enumerated: Vec<usize> = (0..=100).rev().map(|k| k * 10).collect();
        assert_eq!(coarse.steps(), enumerated.as_slice());
        assert_eq!(coarse.len(), 100);
        assert_eq!(TimestepMap::subsample(10, 2).unwrap().steps(), &[10, 5, 0]);
    }

    #[test]
    fn subsample_rejects_non_divisible() {
        assert!(TimestepMap::subsample(1000, 30).is_err());
        assert!(TimestepMap::subsample(10, 0).is_err());
        assert!(TimestepMap::subsample(10, 11).is_err());
    }

    #[test]
    fn offset_clamps() {
        let m = TimestepMap::subsample(100, 10).unwrap();
        assert_eq!(m.offset(3, 2), (5, false));
        assert_eq!(m.offset(9, 3), (10, true));
        assert_eq!(m.offset(1, -4), (0, true));
    }
}
