//! Fully resolved run description, written next to every run's artifacts.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::ValueEnum;
use ptdiff_core::engine::{GuidanceSource, PhaseTransfer, SamplerConfig};
use ptdiff_core::schedule::NoiseSchedule;
use ptdiff_core::spectral::BlendParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::RunArgs;
use crate::Usage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum BackendKind {
    Analytic,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum CodecKind {
    Identity,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ScheduleName {
    /// Scaled-linear 0.00085..0.012 over 1000 steps.
    StableDiffusion,
    /// Linear 1e-4..0.02 over 1000 steps.
    DdpmLinear,
}

impl ScheduleName {
    pub fn build(self) -> NoiseSchedule {
        match self {
            Self::StableDiffusion => NoiseSchedule::stable_diffusion(),
            Self::DdpmLinear => NoiseSchedule::ddpm_linear(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
#[allow(clippy::enum_variant_names)]
pub enum Ablation {
    NoDecay,
    NoRefine,
    NoInversion,
    NoPtm,
}

impl Ablation {
    pub fn apply(self, config: &mut SamplerConfig) {
        match self {
            Self::NoDecay => config.phase_transfer = PhaseTransfer::Constant,
            Self::NoRefine => config.blend.lambda = 0.0,
            Self::NoInversion => config.guidance_source = GuidanceSource::ForwardDiffusion,
            Self::NoPtm => config.phase_transfer = PhaseTransfer::Off,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub sampler: SamplerConfig,
    pub schedule: ScheduleName,
    pub backend: BackendKind,
    pub addr: Option<String>,
    pub codec: CodecKind,
    /// Spread of the analytic mixture components.
    pub sigma: f64,
    /// PGM files forming the analytic mixture; empty means the built-in scene.
    pub mixture: Vec<PathBuf>,
    pub reference: Option<PathBuf>,
    pub prompt: Option<String>,
    pub components: Option<Vec<usize>>,
    pub ablation: Option<Ablation>,
    pub dump_trajectory: bool,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            sampler: SamplerConfig::default(),
            schedule: ScheduleName::StableDiffusion,
            backend: BackendKind::Analytic,
            addr: None,
            codec: CodecKind::Identity,
            sigma: ptdiff_core::scene::DEFAULT_SIGMA,
            mixture: Vec::new(),
            reference: None,
            prompt: None,
            components: None,
            ablation: None,
            dump_trajectory: false,
        }
    }
}

fn absolute(path: &Path) -> anyhow::Result<PathBuf> {
    std::fs::canonicalize(path).map_err(|e| {
        anyhow::Error::new(ptdiff_core::Error::Io(e))
            .context(format!("cannot open {}", path.display()))
    })
}

impl Manifest {
    /// Starts from `--config` (or defaults) and applies every flag given.
    pub fn resolve(args: &RunArgs) -> anyhow::Result<Self> {
        let mut m = match &args.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(ptdiff_core::Error::Io)
                    .with_context(|| format!("cannot read {}", path.display()))?;
                serde_json::from_str(&text)
                    .map_err(|e| Usage(format!("bad config {}: {e}", path.display())))?
            }
            None => Self::default(),
        };
        let s = &mut m.sampler;
        if let Some(v) = args.steps {
            s.steps = v;
        }
        if let Some(v) = args.invert_steps {
            s.invert_steps = v;
        }
        if let Some(v) = args.omega {
            s.omega = v;
        }
        if args.lambda.is_some() || args.tau.is_some() {
            s.blend = BlendParams {
                lambda: args.lambda.unwrap_or(s.blend.lambda),
                tau: args.tau.unwrap_or(s.blend.tau),
            };
        }
        if let Some(d) = &args.d {
            s.async_distance = d.start;
        }
        if let Some(v) = args.seed {
            s.seed = v;
        }
        if let Some(v) = args.guidance_source {
            s.guidance_source = v.into();
        }
        if args.no_ptm {
            s.phase_transfer = PhaseTransfer::Off;
        }
        if let Some(v) = args.schedule {
            m.schedule = v;
        }
        if let Some(v) = args.backend {
            m.backend = v;
            m.codec = match v {
                BackendKind::Analytic => CodecKind::Identity,
                BackendKind::Remote => CodecKind::Remote,
            };
        }
        if let Some(v) = args.codec {
            m.codec = v;
        }
        if let Some(v) = &args.addr {
            m.addr = Some(v.clone());
        }
        if let Some(v) = args.sigma {
            m.sigma = v;
        }
        if let Some(v) = &args.mixture {
            m.mixture = v
                .iter()
                .map(|p| absolute(p))
                .collect::<anyhow::Result<_>>()?;
        }
        if let Some(v) = &args.reference {
            m.reference = Some(absolute(v)?);
        }
        if let Some(v) = &args.prompt {
            m.prompt = Some(v.clone());
            m.components = None;
        }
        if let Some(v) = &args.components {
            m.components = Some(v.clone());
            m.prompt = None;
        }
        if args.dump_trajectory {
            m.dump_trajectory = true;
        }
        Ok(m)
    }

    /// Checks everything that does not need the backend.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.sampler.validate(&self.schedule.build())?;
        if self.backend == BackendKind::Remote && self.addr.is_none() {
            bail!(Usage(
                "the remote backend needs --addr or PTDIFF_ADDR".into()
            ));
        }
        if self.codec == CodecKind::Remote && self.backend != BackendKind::Remote {
            bail!(Usage("the remote codec needs the remote backend".into()));
        }
        if self.backend == BackendKind::Remote && self.components.is_some() {
            bail!(Usage(
                "--components only applies to the analytic backend".into()
            ));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            bail!(ptdiff_core::Error::Parameter {
                field: "sigma",
                reason: format!("{} must be positive", self.sigma),
            });
        }
        Ok(())
    }

    pub fn reference(&self) -> anyhow::Result<&Path> {
        self.reference
            .as_deref()
            .ok_or_else(|| Usage("--ref is required".into()).into())
    }

    pub fn with_ablation(mut self, mode: Ablation) -> Self {
        mode.apply(&mut self.sampler);
        self.ablation = Some(mode);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("manifest serializes"));
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
