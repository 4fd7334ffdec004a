//! Fourier-domain machinery: per-channel 2D FFT, magnitude/phase split,
//! phase blending and the decayed blend-coefficient schedule.
//!
//! The forward transform is unnormalized and the inverse carries the
//! `1/(H·W)` factor, so the DC bin of a spectrum equals the spatial sum.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, Array3, Axis, Zip};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, LatentTensor};

/// Magnitude and four-quadrant phase of a per-channel 2D spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub magnitude: Array3<f64>,
    pub phase: Array3<f64>,
}

impl Spectrum {
    pub fn dim(&self) -> (usize, usize, usize) {
        self.magnitude.dim()
    }

    /// `M·(cos P + i sin P)` per bin.
    pub fn to_complex(&self) -> Array3<Complex<f64>> {
        Zip::from(&self.magnitude)
            .and(&self.phase)
            .map_collect(|&m, &p| Complex::from_polar(m, p))
    }

    fn from_complex(bins: &Array3<Complex<f64>>) -> Self {
        Self {
            magnitude: bins.mapv(|c| c.norm()),
            phase: bins.mapv(principal_angle),
        }
    }
}

/// Angle in `(−π, π]`; the zero bin gets phase 0.
fn principal_angle(c: Complex<f64>) -> f64 {
    if c.re == 0.0 && c.im == 0.0 {
        return 0.0;
    }
    let a = c.im.atan2(c.re);
    if a <= -PI {
        PI
    } else {
        a
    }
}

struct Plans {
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
}

impl Plans {
    fn new(h: usize, w: usize, inverse: bool) -> Self {
        let mut planner = FftPlanner::new();
        if inverse {
            Self {
                rows: planner.plan_fft_inverse(w),
                cols: planner.plan_fft_inverse(h),
            }
        } else {
            Self {
                rows: planner.plan_fft_forward(w),
                cols: planner.plan_fft_forward(h),
            }
        }
    }

    /// In-place unnormalized 2D transform of one `H×W` plane.
    fn apply(&self, plane: &mut Array2<Complex<f64>>) {
        for mut row in plane.rows_mut() {
            let mut buf = row.to_vec();
            self.rows.process(&mut buf);
            row.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
        }
        for mut col in plane.columns_mut() {
            let mut buf = col.to_vec();
            self.cols.process(&mut buf);
            col.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
        }
    }
}

/// Complex per-channel forward transform.
pub fn fft2_complex(z: &LatentTensor) -> Result<Array3<Complex<f64>>> {
    ensure_finite(z, "fft2 input")?;
    let (_, h, w) = z.dim();
    if h == 0 || w == 0 {
        return Err(Error::param("shape", "spatial extent must be non-empty"));
    }
    let plans = Plans::new(h, w, false);
    let mut out = z.mapv(|v| Complex::new(v, 0.0));
    for mut channel in out.axis_iter_mut(Axis(0)) {
        let mut plane = channel.to_owned();
        plans.apply(&mut plane);
        channel.assign(&plane);
    }
    Ok(out)
}

/// Complex per-channel inverse transform, including the `1/(H·W)` factor.
pub fn ifft2_complex(bins: &Array3<Complex<f64>>) -> Array3<Complex<f64>> {
    let (_, h, w) = bins.dim();
    let plans = Plans::new(h, w, true);
    let scale = 1.0 / (h * w) as f64;
    let mut out = bins.clone();
    for mut channel in out.axis_iter_mut(Axis(0)) {
        let mut plane = channel.to_owned();
        plans.apply(&mut plane);
        channel.assign(&plane.mapv(|c| c * scale));
    }
    out
}

/// Per-channel 2D spectrum of `z` split into magnitude and phase.
pub fn fft2(z: &LatentTensor) -> Result<Spectrum> {
    Ok(Spectrum::from_complex(&fft2_complex(z)?))
}

/// Spatial field recovered from a spectrum, plus the imaginary part that
/// was discarded when projecting onto the reals.
#[derive(Debug, Clone)]
pub struct InverseField {
    pub real: LatentTensor,
    /// Largest absolute imaginary component of the inverse transform.
    pub imag_residual: f64,
}

/// Inverse transform of a (possibly non-Hermitian) spectrum.
pub fn ifft2_with_residual(s: &Spectrum) -> Result<InverseField> {
    if s.magnitude.dim() != s.phase.dim() {
        return Err(Error::param("spectrum", "magnitude/phase shape mismatch"));
    }
    if !s
        .magnitude
        .iter()
        .chain(s.phase.iter())
        .all(|v| v.is_finite())
    {
        return Err(Error::Data("spectrum contains non-finite values".into()));
    }
    let field = ifft2_complex(&s.to_complex());
    Ok(InverseField {
        real: field.mapv(|c| c.re),
        imag_residual: field.iter().fold(0.0, |m: f64, c| m.max(c.im.abs())),
    })
}

/// Real part of the inverse transform.
pub fn ifft2(s: &Spectrum) -> Result<LatentTensor> {
    Ok(ifft2_with_residual(s)?.real)
}

/// `b·guidance + (1 − b)·sample`, elementwise on principal-value phases.
///
/// The result is not re-wrapped into `(−π, π]`; it only feeds `cos`/`sin`.
pub fn blend_phase(guidance: &Array3<f64>, sample: &Array3<f64>, b: f64) -> Result<Array3<f64>> {
    if guidance.dim() != sample.dim() {
        return Err(Error::param("phase", "guidance/sample shape mismatch"));
    }
    check_unit("b", b)?;
    if b == 0.0 {
        return Ok(sample.clone());
    }
    if b == 1.0 {
        return Ok(guidance.clone());
    }
    Ok(Zip::from(guidance)
        .and(sample)
        .map_collect(|&g, &s| b * g + (1.0 - b) * s))
}

/// Phase transfer: keep the magnitude of `sample`, blend in the phase of
/// `guidance` with weight `b`, and return to the spatial domain.
pub fn ptm(guidance: &LatentTensor, sample: &LatentTensor, b: f64) -> Result<LatentTensor> {
    Ok(ptm_with_residual(guidance, sample, b)?.real)
}

pub fn ptm_with_residual(
    guidance: &LatentTensor,
    sample: &LatentTensor,
    b: f64,
) -> Result<InverseField> {
    if guidance.dim() != sample.dim() {
        return Err(Error::param(
            "sample",
            format!("shape mismatch {:?} vs {:?}", guidance.dim(), sample.dim()),
        ));
    }
    check_unit("b", b)?;
    let g = fft2(guidance)?;
    let s = fft2(sample)?;
    let fused = Spectrum {
        phase: blend_phase(&g.phase, &s.phase, b)?,
        magnitude: s.magnitude,
    };
    ifft2_with_residual(&fused)
}

fn check_unit(field: &'static str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::param(field, format!("{v} not in [0, 1]")))
    }
}

/// Refining-stage proportion `lambda` and decay onset `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendParams {
    pub lambda: f64,
    pub tau: f64,
}

impl Default for BlendParams {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            tau: 0.6,
        }
    }
}

impl BlendParams {
    pub fn new(lambda: f64, tau: f64) -> Result<Self> {
        let p = Self { lambda, tau };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::param(
                "lambda",
                format!("{} not in [0, 1]", self.lambda),
            ));
        }
        if !(self.lambda..=1.0).contains(&self.tau) {
            return Err(Error::param(
                "tau",
                format!("{} not in [lambda={}, 1]", self.tau, self.lambda),
            ));
        }
        Ok(())
    }
}

/// Decayed blend coefficient `b_t` on a horizon of `horizon` timesteps.
///
/// One above `tau·horizon`; square-root decay to zero at `lambda·horizon`.
/// Timesteps below `lambda·horizon` belong to the refining stage and are
/// rejected.
pub fn blend_coefficient(t: f64, horizon: f64, params: &BlendParams) -> Result<f64> {
    params.validate()?;
    let lo = params.lambda * horizon;
    let hi = params.tau * horizon;
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::param("t", format!("{t} not in [0, {horizon}]")));
    }
    if t < lo {
        return Err(Error::param(
            "t",
            format!("{t} lies in the refining stage (below {lo})"),
        ));
    }
    if t >= hi {
        return Ok(1.0);
    }
    Ok(1.0 - ((hi - t) / (hi - lo)).sqrt())
}
