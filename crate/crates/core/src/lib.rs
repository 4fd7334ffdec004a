//! Training-free optical-illusion sampling for latent diffusion models.
//!
//! A reference latent is DDIM-inverted into a noise code; a reconstruction
//! trajectory replays it while a text-guided sampling trajectory runs in
//! lockstep. Early in sampling the sampling state's Fourier phase is
//! replaced by (then decayingly blended with) the phase of the guidance
//! state, which hides the reference structure inside the generated content.
//!
//! The [`denoiser::AnalyticDenoiser`] backend supplies an exact noise
//! predictor for Gaussian-mixture data so every path runs at desk scale;
//! [`denoiser::RemoteDenoiser`] talks to a real model over [`protocol`].

pub mod codec;
pub mod denoiser;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod protocol;
pub mod ptt;
pub mod rng;
pub mod scene;
pub mod schedule;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::LatentTensor;
