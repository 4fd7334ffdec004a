//! Latent tensors and the small numeric helpers shared across modules.

use ndarray::{Array3, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A real-valued `C×H×W` feature array.
pub type LatentTensor = Array3<f64>;

pub fn ensure_finite(z: &LatentTensor, what: &str) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} contains non-finite values")))
    }
}

pub fn ensure_same_shape(a: &LatentTensor, b: &LatentTensor, field: &'static str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::param(
            field,
            format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()),
        ))
    }
}

pub fn max_abs(z: &LatentTensor) -> f64 {
    z.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn max_abs_diff(a: &LatentTensor, b: &LatentTensor) -> f64 {
    Zip::from(a)
        .and(b)
        .fold(0.0, |m: f64, x, y| m.max((x - y).abs()))
}

/// `‖a − b‖₂ / ‖b‖₂`.
pub fn rel_l2(a: &LatentTensor, b: &LatentTensor) -> f64 {
    let num: f64 = Zip::from(a).and(b).fold(0.0, |s, x, y| s + (x - y).powi(2));
    let den: f64 = b.iter().map(|v| v * v).sum();
    (num / den).sqrt()
}

/// Standard-normal tensor of the given shape.
pub fn randn<R: Rng + ?Sized>(shape: (usize, usize, usize), rng: &mut R) -> LatentTensor {
    Array3::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}
