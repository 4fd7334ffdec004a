#![allow(dead_code)]

use std::path::PathBuf;

use ptdiff_core::denoiser::{AnalyticDenoiser, ConditionHandle, Denoiser};
use ptdiff_core::engine::{run_illusion, run_inversion, GuidanceSource, Guide, SamplerConfig};
use ptdiff_core::metrics::phase_correlation;
use ptdiff_core::schedule::NoiseSchedule;
use ptdiff_core::{scene, LatentTensor};
use rayon::prelude::*;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(rel)
}

/// The built-in 16×16 scene with one reference inverted once.
pub struct Scene {
    pub sched: NoiseSchedule,
    pub den: AnalyticDenoiser,
    pub z0: LatentTensor,
    pub code: LatentTensor,
    pub prompt: ConditionHandle,
}

impl Scene {
    pub fn new(reference: &str, prompt: &str) -> Self {
        let sched = NoiseSchedule::stable_diffusion();
        let den = scene::scene_denoiser(16, 16, scene::DEFAULT_SIGMA, sched.clone()).unwrap();
        let z0 = scene::latent(reference, 16, 16).unwrap();
        let inv = run_inversion(
            &z0,
            &den.null_condition(),
            &den,
            &sched,
            &SamplerConfig::default(),
        )
        .unwrap();
        let code = inv.last().unwrap().clone();
        let prompt = den.prompt(prompt).unwrap();
        Self {
            sched,
            den,
            z0,
            code,
            prompt,
        }
    }

    pub fn phase_correlations(&self, config: &SamplerConfig, seeds: u64) -> Vec<f64> {
        (0..seeds)
            .into_par_iter()
            .map(|seed| {
                let cfg = SamplerConfig {
                    seed,
                    ..config.clone()
                };
                let guide = match cfg.guidance_source {
                    GuidanceSource::DdimInversion => Guide::Inverted(&self.code),
                    GuidanceSource::ForwardDiffusion => Guide::ForwardDiffusion(&self.z0),
                };
                let run = run_illusion(guide, &self.prompt, &cfg, &self.den, &self.sched).unwrap();
                phase_correlation(&self.z0, &run.output).unwrap().global
            })
            .collect()
    }

    pub fn mean_phase_correlation(&self, config: &SamplerConfig, seeds: u64) -> f64 {
        let v = self.phase_correlations(config, seeds);
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Number of adjacent decreases in a sequence.
pub fn inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] < w[0]).count()
}
