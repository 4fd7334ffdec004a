//! Image ↔ latent boundary and PGM/PPM image files.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, GrayImage, ImageEncoder, ImageFormat, RgbImage};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::tensor::{ensure_finite, LatentTensor};

/// Pixels in `[0, 1]`, stored as `[1, H, W]` (grayscale) or `[3, H, W]` (RGB).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
}

impl ImageTensor {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let c = pixels.dim().0;
        if c != 1 && c != 3 {
            return Err(Error::param(
                "pixels",
                format!("{c} channels; expected 1 or 3"),
            ));
        }
        ensure_finite(&pixels, "image")?;
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    pub fn gray(pixels: ndarray::Array2<f64>) -> Result<Self> {
        Self::new(pixels.insert_axis(ndarray::Axis(0)))
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    /// Reads a binary PGM (P5) or PPM (P6) file.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Ok(Self::from_dynamic(img))
    }

    pub fn from_pnm_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)
            .map_err(|e| Error::Data(format!("bad PNM data: {e}")))?;
        Ok(Self::from_dynamic(img))
    }

    fn from_dynamic(img: DynamicImage) -> Self {
        let pixels = if img.color().has_color() {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
                rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
            })
        } else {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            Array3::from_shape_fn((1, h as usize, w as usize), |(_, y, x)| {
                g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
            })
        };
        Self { pixels }
    }

    /// Binary PGM (grayscale) or PPM (RGB), maxval 255.
    pub fn to_pnm_bytes(&self) -> Result<Vec<u8>> {
        let (c, h, w) = self.pixels.dim();
        let q = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        let mut out = Vec::new();
        let result = if c == 1 {
            let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([q(self.pixels[[0, y as usize, x as usize]])])
            });
            PnmEncoder::new(&mut out)
                .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
                .write_image(img.as_raw(), w as u32, h as u32, ExtendedColorType::L8)
        } else {
            let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let p = |ch| q(self.pixels[[ch, y as usize, x as usize]]);
                image::Rgb([p(0), p(1), p(2)])
            });
            PnmEncoder::new(&mut out)
                .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
                .write_image(img.as_raw(), w as u32, h as u32, ExtendedColorType::Rgb8)
        };
        result.map_err(|e| Error::Data(format!("cannot encode PNM: {e}")))?;
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_pnm_bytes()?)?;
        Ok(())
    }
}

/// Result of decoding, with the number of pixels that had to be clamped.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub image: ImageTensor,
    pub clamped: usize,
}

impl Decoded {
    pub fn clamp_rate(&self) -> f64 {
        self.clamped as f64 / self.image.pixels().len() as f64
    }
}

/// The `E`/`D` pair between image space and latent space.
pub trait Codec {
    fn encode(&self, x: &ImageTensor) -> Result<LatentTensor>;
    fn decode(&self, z: &LatentTensor) -> Result<Decoded>;
}

/// Affine pixel ↔ latent map `z = 2p − 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn encode(&self, x: &ImageTensor) -> Result<LatentTensor> {
        Ok(x.pixels.mapv(|p| 2.0 * p - 1.0))
    }

    fn decode(&self, z: &LatentTensor) -> Result<Decoded> {
        ensure_finite(z, "latent")?;
        let mut clamped = 0;
        let pixels = z.mapv(|v| {
            let p = (v + 1.0) / 2.0;
            if (0.0..=1.0).contains(&p) {
                p
            } else {
                clamped += 1;
                p.clamp(0.0, 1.0)
            }
        });
        Ok(Decoded {
            image: ImageTensor { pixels },
            clamped,
        })
    }
}
