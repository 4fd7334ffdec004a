//! Built-in desk-scale scene: pattern images that play the role of
//! text-conditioned content, and simple shapes used as hidden references.

use std::f64::consts::PI;

use ndarray::Array2;

use crate::codec::{Codec, IdentityCodec, ImageTensor};
use crate::denoiser::{AnalyticDenoiser, GaussianMixture};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::LatentTensor;

/// Names of the built-in content patterns.
pub const PATTERNS: [&str; 8] = [
    "stripes_h2",
    "stripes_h4",
    "stripes_v2",
    "stripes_v4",
    "checker_2",
    "checker_4",
    "diagonal_4",
    "rings_4",
];

/// Plain shapes that only the unconditional distribution knows about.
pub const SHAPES: [&str; 4] = ["disk", "square", "ring", "cross"];

/// Names of the built-in reference images.
pub const REFERENCES: [&str; 2] = ["face", "house"];

/// Default within-component spread of the analytic scene.
pub const DEFAULT_SIGMA: f64 = 0.35;

/// Pattern or reference image with pixels in `[0, 1]`.
pub fn image(name: &str, h: usize, w: usize) -> Result<ImageTensor> {
    let (hf, wf) = (h as f64, w as f64);
    let square = |phase: f64| {
        if phase.rem_euclid(1.0) < 0.5 {
            1.0
        } else {
            0.0
        }
    };
    let px: Array2<f64> = match name {
        "stripes_h2" => Array2::from_shape_fn((h, w), |(y, _)| square(y as f64 / 2.0)),
        "stripes_h4" => Array2::from_shape_fn((h, w), |(y, _)| square(y as f64 / 4.0)),
        "stripes_v2" => Array2::from_shape_fn((h, w), |(_, x)| square(x as f64 / 2.0)),
        "stripes_v4" => Array2::from_shape_fn((h, w), |(_, x)| square(x as f64 / 4.0)),
        "checker_2" => Array2::from_shape_fn((h, w), |(y, x)| ((y / 2 + x / 2) % 2) as f64),
        "checker_4" => Array2::from_shape_fn((h, w), |(y, x)| ((y / 4 + x / 4) % 2) as f64),
        "diagonal_4" => Array2::from_shape_fn((h, w), |(y, x)| square((x + y) as f64 / 4.0)),
        "rings_4" => Array2::from_shape_fn((h, w), |(y, x)| {
            let r = ((y as f64 - hf / 2.0).powi(2) + (x as f64 - wf / 2.0).powi(2)).sqrt();
            0.5 + 0.5 * (2.0 * PI * r / 4.0).cos()
        }),
        "face" => Array2::from_shape_fn((h, w), |(y, x)| {
            let (u, v) = ((x as f64 + 0.5) / wf - 0.5, (y as f64 + 0.5) / hf - 0.5);
            let head = u * u + v * v < 0.4 * 0.4;
            let eye = |cx: f64| (u - cx).powi(2) + (v + 0.12).powi(2) < 0.07 * 0.07;
            let mouth = v > 0.1 && v < 0.2 && u.abs() < 0.18;
            if head && !(eye(-0.15) || eye(0.15) || mouth) {
                1.0
            } else {
                0.0
            }
        }),
        "disk" => Array2::from_shape_fn((h, w), |(y, x)| {
            let (u, v) = ((x as f64 + 0.5) / wf - 0.5, (y as f64 + 0.5) / hf - 0.5);
            if u * u + v * v < 0.4 * 0.4 {
                1.0
            } else {
                0.0
            }
        }),
        "square" => Array2::from_shape_fn((h, w), |(y, x)| {
            let (u, v) = ((x as f64 + 0.5) / wf - 0.5, (y as f64 + 0.5) / hf - 0.5);
            if u.abs() < 0.35 && v.abs() < 0.35 {
                1.0
            } else {
                0.0
            }
        }),
        "house" => Array2::from_shape_fn((h, w), |(y, x)| {
            let (u, v) = ((x as f64 + 0.5) / wf - 0.5, (y as f64 + 0.5) / hf - 0.5);
            let roof = v < -0.05 && v > -0.4 && u.abs() < (v + 0.4);
            let walls = (-0.05..0.4).contains(&v) && u.abs() < 0.3;
            let door = v > 0.12 && u.abs() < 0.08;
            if (roof || walls) && !door {
                1.0
            } else {
                0.0
            }
        }),
        "ring" => Array2::from_shape_fn((h, w), |(y, x)| {
            let (u, v) = ((x as f64 + 0.5) / wf - 0.5, (y as f64 + 0.5) / hf - 0.5);
            let r = (u * u + v * v).sqrt();
            if (0.2..0.38).contains(&r) {
                1.0
            } else {
                0.0
            }
        }),
        "cross" => Array2::from_shape_fn((h, w), |(y, x)| {
            let (u, v) = ((x as f64 + 0.5) / wf - 0.5, (y as f64 + 0.5) / hf - 0.5);
            if (u.abs() < 0.12 && v.abs() < 0.4) || (v.abs() < 0.12 && u.abs() < 0.4) {
                1.0
            } else {
                0.0
            }
        }),
        other => {
            return Err(Error::param(
                "name",
                format!("unknown scene image `{other}`"),
            ))
        }
    };
    ImageTensor::gray(px)
}

/// Latent of a built-in image through the identity codec.
pub fn latent(name: &str, h: usize, w: usize) -> Result<LatentTensor> {
    IdentityCodec.encode(&image(name, h, w)?)
}

/// Analytic backend over the eight built-in patterns.
pub fn pattern_denoiser(
    h: usize,
    w: usize,
    sigma: f64,
    schedule: NoiseSchedule,
) -> Result<AnalyticDenoiser> {
    named_denoiser(&PATTERNS, h, w, sigma, schedule)
}

/// Analytic backend over the patterns plus the plain shapes, so the
/// unconditional distribution can explain the outline of a reference.
pub fn scene_denoiser(
    h: usize,
    w: usize,
    sigma: f64,
    schedule: NoiseSchedule,
) -> Result<AnalyticDenoiser> {
    let names: Vec<&str> = PATTERNS.iter().chain(SHAPES.iter()).copied().collect();
    named_denoiser(&names, h, w, sigma, schedule)
}

fn named_denoiser(
    names: &[&str],
    h: usize,
    w: usize,
    sigma: f64,
    schedule: NoiseSchedule,
) -> Result<AnalyticDenoiser> {
    let means = names
        .iter()
        .map(|n| latent(n, h, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(AnalyticDenoiser::with_names(
        GaussianMixture::from_images(means, sigma)?,
        schedule,
        names.iter().map(|s| s.to_string()).collect(),
    ))
}
