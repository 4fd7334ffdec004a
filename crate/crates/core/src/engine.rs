//! Deterministic trajectory mathematics and the full illusion sampler.
//!
//! Three trajectories share one schedule: the inversion walk `z₀ → z_T`
//! on its own grid, and the reconstruction (`ẑ`) and sampling (`z̃`) walks
//! that advance in lockstep on the coarse grid. During the phase transfer
//! stage the sampling state takes on the phase of a (possibly
//! time-shifted) estimate of the reconstruction state.

use std::path::Path;

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionHandle, Denoiser};
use crate::error::{Error, Result};
use crate::ptt::RawTensor;
use crate::rng;
use crate::schedule::{NoiseSchedule, TimestepMap};
use crate::spectral::{blend_coefficient, ptm_with_residual, BlendParams};
use crate::tensor::{ensure_finite, ensure_same_shape, LatentTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceSource {
    /// Guidance trajectory reconstructed from the DDIM-inverted code.
    DdimInversion,
    /// Guidance states drawn independently by forward diffusion of `z₀`.
    ForwardDiffusion,
}

/// How the blend coefficient behaves across the phase transfer stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseTransfer {
    /// Full replacement, then square-root decay below `tau`.
    Decayed,
    /// Full replacement over the whole stage (`b_t = 1`).
    Constant,
    /// No phase transfer at all.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Coarse steps for reconstruction and sampling.
    pub steps: usize,
    /// Steps of the inversion walk.
    pub invert_steps: usize,
    /// Classifier-free guidance scale.
    pub omega: f64,
    pub blend: BlendParams,
    /// Async distance in coarse steps; positive looks ahead.
    pub async_distance: i64,
    pub seed: u64,
    pub guidance_source: GuidanceSource,
    pub phase_transfer: PhaseTransfer,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            invert_steps: 1000,
            omega: 7.5,
            blend: BlendParams::default(),
            async_distance: 0,
            seed: 0,
            guidance_source: GuidanceSource::DdimInversion,
            phase_transfer: PhaseTransfer::Decayed,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let train = sched.train_steps();
        TimestepMap::subsample(train, self.steps)
            .map_err(|e| Error::param("steps", e.to_string()))?;
        TimestepMap::subsample(train, self.invert_steps)
            .map_err(|e| Error::param("invert_steps", e.to_string()))?;
        if !self.omega.is_finite() {
            return Err(Error::param("omega", "must be finite"));
        }
        self.blend.validate()?;
        let reach = self.steps as f64 * (1.0 - self.blend.lambda);
        if self.async_distance.unsigned_abs() as f64 > reach + 1e-9 {
            return Err(Error::param(
                "async_distance",
                format!(
                    "|{}| exceeds the phase transfer stage length {reach}",
                    self.async_distance
                ),
            ));
        }
        Ok(())
    }

    /// Coarse steps that run phase transfer: `T − ⌊λT⌋`.
    pub fn transfer_steps(&self) -> usize {
        self.steps - self.refine_steps()
    }

    /// Refining-only steps: `⌊λT⌋`.
    pub fn refine_steps(&self) -> usize {
        (self.blend.lambda * self.steps as f64 + 1e-9).floor() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Inversion,
    Reconstruction,
    Sampling,
}

impl TrajectoryKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Inversion => "inversion",
            Self::Reconstruction => "reconstruction",
            Self::Sampling => "sampling",
        }
    }
}

/// Latents of one trajectory keyed by training-grid timestep, in visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub kind: TrajectoryKind,
    pub steps: Vec<(usize, LatentTensor)>,
}

impl TrajectoryRecord {
    pub fn new(kind: TrajectoryKind) -> Self {
        Self {
            kind,
            steps: Vec::new(),
        }
    }

    fn push(&mut self, t: usize, z: LatentTensor) {
        self.steps.push((t, z));
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.steps.iter().map(|(t, _)| *t).collect()
    }

    pub fn get(&self, t: usize) -> Option<&LatentTensor> {
        self.steps.iter().find(|(s, _)| *s == t).map(|(_, z)| z)
    }

    pub fn last(&self) -> Option<&LatentTensor> {
        self.steps.last().map(|(_, z)| z)
    }

    /// Writes one `PTT1` file per step, named `{trajectory}_{t:04}.ptt`.
    pub fn dump(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (t, z) in &self.steps {
            RawTensor::from_latent(z)
                .write(dir.join(format!("{}_{t:04}.ptt", self.kind.name())))?;
        }
        Ok(())
    }
}

/// Trajectories completed before a failure.
#[derive(Debug, Clone)]
pub struct PartialRun {
    /// Training timestep whose evaluation failed.
    pub failed_at: usize,
    pub trajectories: Vec<TrajectoryRecord>,
}

fn interrupted(
    completed: usize,
    failed_at: usize,
    trajectories: Vec<TrajectoryRecord>,
    source: Error,
) -> Error {
    Error::Interrupted {
        completed,
        partial: Box::new(PartialRun {
            failed_at,
            trajectories,
        }),
        source: Box::new(source),
    }
}

/// `(z − √(1−ᾱ_t)·ε) / √ᾱ_t`.
pub fn predict_x0(
    z: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    if t == 0 {
        return Err(Error::param("t", "x0 prediction is degenerate at t = 0"));
    }
    sched.check_timestep(t, "t")?;
    ensure_same_shape(z, eps, "eps")?;
    Ok(x0_unchecked(z, t, eps, sched))
}

fn x0_unchecked(
    z: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    sched: &NoiseSchedule,
) -> LatentTensor {
    if t == 0 {
        return z.clone();
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Zip::from(z).and(eps).map_collect(|&z, &e| (z - b * e) / a)
}

/// DDIM move from `t` to `target` given the noise estimate at `t`:
/// `√ᾱ_target·f + √(1−ᾱ_target)·ε`, with `f = z` when `t = 0`.
fn ddim_move(
    z: &LatentTensor,
    t: usize,
    eps: &LatentTensor,
    target: usize,
    sched: &NoiseSchedule,
) -> LatentTensor {
    let x0 = x0_unchecked(z, t, eps, sched);
    let ab = sched.alpha_bar(target);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Zip::from(&x0).and(eps).map_collect(|&x, &e| a * x + b * e)
}

fn checked_eps<D: Denoiser + ?Sized>(
    denoiser: &D,
    z: &LatentTensor,
    t: usize,
    cond: &ConditionHandle,
) -> Result<LatentTensor> {
    let eps = denoiser.eps(z, t, cond)?;
    ensure_same_shape(z, &eps, "eps")?;
    if !eps.iter().all(|v| v.is_finite()) {
        return Err(Error::Backend(format!(
            "non-finite noise estimate at t={t}"
        )));
    }
    Ok(eps)
}

/// One DDIM inversion step `t → t_next` under the null condition.
pub fn invert_step<D: Denoiser + ?Sized>(
    z_t: &LatentTensor,
    t: usize,
    denoiser: &D,
    cond_null: &ConditionHandle,
    sched: &NoiseSchedule,
    t_next: usize,
) -> Result<LatentTensor> {
    if t_next <= t {
        return Err(Error::param(
            "t_next",
            format!("{t_next} must exceed t={t}"),
        ));
    }
    sched.check_timestep(t_next, "t_next")?;
    let eps = checked_eps(denoiser, z_t, t, cond_null)?;
    Ok(ddim_move(z_t, t, &eps, t_next, sched))
}

/// One DDIM reconstruction step `t → t_prev` under the null condition.
pub fn recon_step<D: Denoiser + ?Sized>(
    z_hat_t: &LatentTensor,
    t: usize,
    denoiser: &D,
    cond_null: &ConditionHandle,
    sched: &NoiseSchedule,
    t_prev: usize,
) -> Result<LatentTensor> {
    if t_prev >= t {
        return Err(Error::param(
            "t_prev",
            format!("{t_prev} must be below t={t}"),
        ));
    }
    sched.check_timestep(t, "t")?;
    let eps = checked_eps(denoiser, z_hat_t, t, cond_null)?;
    Ok(ddim_move(z_hat_t, t, &eps, t_prev, sched))
}

/// Classifier-free guided noise `ω·ε(v) + (1 − ω)·ε(v∅)`.
///
/// Always makes exactly two denoiser calls. When `v` is the null handle
/// the combination collapses to `ε(v∅)`.
pub fn cfg_eps<D: Denoiser + ?Sized>(
    z: &LatentTensor,
    t: usize,
    v: &ConditionHandle,
    v_null: &ConditionHandle,
    omega: f64,
    denoiser: &D,
) -> Result<LatentTensor> {
    let cond = checked_eps(denoiser, z, t, v)?;
    let uncond = checked_eps(denoiser, z, t, v_null)?;
    if v == v_null {
        return Ok(uncond);
    }
    Ok(Zip::from(&cond)
        .and(&uncond)
        .map_collect(|&c, &u| omega * c + (1.0 - omega) * u))
}

/// One guided sampling step `t → t_prev`.
#[allow(clippy::too_many_arguments)]
pub fn sample_step<D: Denoiser + ?Sized>(
    z_tilde_t: &LatentTensor,
    t: usize,
    v: &ConditionHandle,
    v_null: &ConditionHandle,
    omega: f64,
    denoiser: &D,
    sched: &NoiseSchedule,
    t_prev: usize,
) -> Result<LatentTensor> {
    if t_prev >= t {
        return Err(Error::param(
            "t_prev",
            format!("{t_prev} must be below t={t}"),
        ));
    }
    sched.check_timestep(t, "t")?;
    let eps = cfg_eps(z_tilde_t, t, v, v_null, omega, denoiser)?;
    Ok(ddim_move(z_tilde_t, t, &eps, t_prev, sched))
}

/// Estimate of the reconstruction state `d` coarse steps away.
#[derive(Debug, Clone)]
pub struct PreEstimate {
    pub latent: LatentTensor,
    /// Training timestep the estimate targets, after clamping.
    pub target: usize,
    /// Whether the requested offset ran off the grid.
    pub clamped: bool,
}

fn position_of(tmap: &TimestepMap, t: usize) -> Result<usize> {
    tmap.steps()
        .iter()
        .position(|&s| s == t)
        .ok_or_else(|| Error::param("t", format!("timestep {t} is not on the coarse grid")))
}

/// Jumps `ẑ_t` to the coarse position `d_steps` ahead (clamped to the grid
/// ends) using the noise estimate at `t`.
#[allow(clippy::too_many_arguments)]
pub fn pre_estimate<D: Denoiser + ?Sized>(
    z_hat_t: &LatentTensor,
    t: usize,
    d_steps: i64,
    denoiser: &D,
    cond_null: &ConditionHandle,
    sched: &NoiseSchedule,
    tmap: &TimestepMap,
) -> Result<PreEstimate> {
    let pos = position_of(tmap, t)?;
    let eps = checked_eps(denoiser, z_hat_t, t, cond_null)?;
    Ok(pre_estimate_with(z_hat_t, pos, d_steps, &eps, sched, tmap))
}

fn pre_estimate_with(
    z_hat_t: &LatentTensor,
    pos: usize,
    d_steps: i64,
    eps: &LatentTensor,
    sched: &NoiseSchedule,
    tmap: &TimestepMap,
) -> PreEstimate {
    let (target_pos, clamped) = tmap.offset(pos, d_steps);
    let target = tmap.at(target_pos);
    PreEstimate {
        latent: ddim_move(z_hat_t, tmap.at(pos), eps, target, sched),
        target,
        clamped,
    }
}

/// Outcome of one asynchronous phase transfer.
#[derive(Debug, Clone)]
pub struct AptmOutcome {
    pub latent: LatentTensor,
    pub clamped: bool,
    /// Imaginary residual dropped by the real projection.
    pub imag_residual: f64,
}

/// Asynchronous phase transfer: phase of the pre-estimated guidance state
/// blended into `z̃_t` with weight `b_t`.
#[allow(clippy::too_many_arguments)]
pub fn aptm<D: Denoiser + ?Sized>(
    z_hat_t: &LatentTensor,
    z_tilde_t: &LatentTensor,
    t: usize,
    b_t: f64,
    d_steps: i64,
    denoiser: &D,
    cond_null: &ConditionHandle,
    sched: &NoiseSchedule,
    tmap: &TimestepMap,
) -> Result<AptmOutcome> {
    ensure_same_shape(z_hat_t, z_tilde_t, "z_tilde_t")?;
    if !(0.0..=1.0).contains(&b_t) {
        return Err(Error::param("b_t", format!("{b_t} not in [0, 1]")));
    }
    if b_t == 0.0 {
        return Ok(AptmOutcome {
            latent: z_tilde_t.clone(),
            clamped: false,
            imag_residual: 0.0,
        });
    }
    let guide = pre_estimate(z_hat_t, t, d_steps, denoiser, cond_null, sched, tmap)?;
    let field = ptm_with_residual(&guide.latent, z_tilde_t, b_t)?;
    Ok(AptmOutcome {
        latent: field.real,
        clamped: guide.clamped,
        imag_residual: field.imag_residual,
    })
}

/// Inversion walk `0 → T_train` on the `invert_steps` grid, or the
/// forward-diffusion states on the same grid for the ablation.
pub fn run_inversion<D: Denoiser + ?Sized>(
    z0: &LatentTensor,
    cond_null: &ConditionHandle,
    denoiser: &D,
    sched: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<TrajectoryRecord> {
    ensure_finite(z0, "z0")?;
    config.validate(sched)?;
    let grid: Vec<usize> = TimestepMap::subsample(sched.train_steps(), config.invert_steps)?
        .ascending()
        .collect();
    let mut record = TrajectoryRecord::new(TrajectoryKind::Inversion);
    record.push(0, z0.clone());
    match config.guidance_source {
        GuidanceSource::DdimInversion => {
            let mut z = z0.clone();
            for (i, pair) in grid.windows(2).enumerate() {
                let (t, t_next) = (pair[0], pair[1]);
                z = match invert_step(&z, t, denoiser, cond_null, sched, t_next) {
                    Ok(z) => z,
                    Err(e) => return Err(interrupted(i, t, vec![record], e)),
                };
                record.push(t_next, z.clone());
            }
        }
        GuidanceSource::ForwardDiffusion => {
            for &t in &grid[1..] {
                record.push(t, forward_diffuse(z0, t, config.seed, sched));
            }
        }
    }
    Ok(record)
}

/// `√ᾱ_t·z₀ + √(1−ᾱ_t)·ε` with the seed's forward-noise stream at `t`.
pub fn forward_diffuse(
    z0: &LatentTensor,
    t: usize,
    seed: u64,
    sched: &NoiseSchedule,
) -> LatentTensor {
    let noise = rng::forward_noise(seed, t, z0.dim());
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Zip::from(z0)
        .and(&noise)
        .map_collect(|&x, &e| a * x + b * e)
}

/// Where the guidance trajectory comes from.
#[derive(Debug, Clone, Copy)]
pub enum Guide<'a> {
    /// Start the reconstruction trajectory from this inversion code.
    Inverted(&'a LatentTensor),
    /// Draw each guidance state by forward diffusion of this clean latent.
    ForwardDiffusion(&'a LatentTensor),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    /// Coarse steps that executed phase transfer.
    pub transfer_steps: usize,
    /// Coarse steps that ran sampling only.
    pub refine_steps: usize,
    /// Pre-estimates whose target was clamped to a grid end.
    pub clamped_pre_estimates: usize,
    /// Largest imaginary residual discarded by a phase transfer.
    pub max_imag_residual: f64,
}

#[derive(Debug, Clone)]
pub struct IllusionRun {
    /// `z̃₀`.
    pub output: LatentTensor,
    pub reconstruction: TrajectoryRecord,
    pub sampling: TrajectoryRecord,
    pub stats: StageStats,
}

/// One coarse step of the sampler as scheduled before any denoising.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlannedStep {
    pub from: usize,
    pub to: usize,
    /// Whether the reconstruction trajectory advances on this step.
    pub in_stage: bool,
    /// Phase blend weight applied to the new sampling state, if any.
    pub blend: Option<f64>,
}

/// Stage layout of a run: the last `⌊λT⌋` steps refine only; the others
/// advance the reconstruction and, unless transfer is off, blend with
/// `b` evaluated at the step's target timestep (never below `λ·T_train`).
pub fn transfer_plan(config: &SamplerConfig, sched: &NoiseSchedule) -> Result<Vec<PlannedStep>> {
    config.validate(sched)?;
    let tmap = TimestepMap::subsample(sched.train_steps(), config.steps)?;
    let horizon = sched.train_steps() as f64;
    let floor = config.blend.lambda * horizon;
    (0..tmap.len())
        .map(|i| {
            let (from, to) = (tmap.at(i), tmap.at(i + 1));
            let in_stage = tmap.len() - (i + 1) >= config.refine_steps();
            let blend = match config.phase_transfer {
                _ if !in_stage => None,
                PhaseTransfer::Off => None,
                PhaseTransfer::Constant => Some(1.0),
                PhaseTransfer::Decayed => Some(blend_coefficient(
                    (to as f64).max(floor),
                    horizon,
                    &config.blend,
                )?),
            };
            Ok(PlannedStep {
                from,
                to,
                in_stage,
                blend,
            })
        })
        .collect()
}

/// The full sampler: reconstruction and guided sampling in lockstep with
/// asynchronous phase transfer down to `⌊λT⌋`, then sampling alone.
pub fn run_illusion<D: Denoiser + ?Sized>(
    guide: Guide<'_>,
    v: &ConditionHandle,
    config: &SamplerConfig,
    denoiser: &D,
    sched: &NoiseSchedule,
) -> Result<IllusionRun> {
    run_illusion_inner(guide, None, v, config, denoiser, sched)
}

/// [`run_illusion`] with an explicit `z̃_T` instead of the seeded draw.
pub fn run_illusion_from<D: Denoiser + ?Sized>(
    guide: Guide<'_>,
    initial: &LatentTensor,
    v: &ConditionHandle,
    config: &SamplerConfig,
    denoiser: &D,
    sched: &NoiseSchedule,
) -> Result<IllusionRun> {
    run_illusion_inner(guide, Some(initial), v, config, denoiser, sched)
}

fn run_illusion_inner<D: Denoiser + ?Sized>(
    guide: Guide<'_>,
    initial: Option<&LatentTensor>,
    v: &ConditionHandle,
    config: &SamplerConfig,
    denoiser: &D,
    sched: &NoiseSchedule,
) -> Result<IllusionRun> {
    config.validate(sched)?;
    let (start, source) = match guide {
        Guide::Inverted(code) => (code.clone(), GuidanceSource::DdimInversion),
        Guide::ForwardDiffusion(z0) => (
            forward_diffuse(z0, sched.train_steps(), config.seed, sched),
            GuidanceSource::ForwardDiffusion,
        ),
    };
    if source != config.guidance_source {
        return Err(Error::param(
            "guidance_source",
            format!(
                "config asks for {:?} but the guide is {source:?}",
                config.guidance_source
            ),
        ));
    }
    ensure_finite(&start, "guidance start")?;

    let tmap = TimestepMap::subsample(sched.train_steps(), config.steps)?;
    let plan = transfer_plan(config, sched)?;
    let null = denoiser.null_condition();

    let mut z_hat = start;
    let mut z_tilde = match initial {
        Some(z) => {
            ensure_same_shape(&z_hat, z, "initial")?;
            ensure_finite(z, "initial")?;
            z.clone()
        }
        None => rng::initial_noise(config.seed, z_hat.dim()),
    };
    let mut recon = TrajectoryRecord::new(TrajectoryKind::Reconstruction);
    let mut sampling = TrajectoryRecord::new(TrajectoryKind::Sampling);
    recon.push(tmap.at(0), z_hat.clone());
    sampling.push(tmap.at(0), z_tilde.clone());
    let mut stats = StageStats::default();
    // Null-condition noise estimate of the current ẑ, shared between the
    // pre-estimate and the next reconstruction step.
    let mut hat_eps: Option<LatentTensor> = None;

    for (i, planned) in plan.iter().enumerate() {
        let (t, t_prev, in_stage) = (planned.from, planned.to, planned.in_stage);
        let step = (|| -> Result<()> {
            if in_stage {
                z_hat = match guide {
                    Guide::Inverted(_) => {
                        let eps = match hat_eps.take() {
                            Some(eps) => eps,
                            None => checked_eps(denoiser, &z_hat, t, &null)?,
                        };
                        ddim_move(&z_hat, t, &eps, t_prev, sched)
                    }
                    Guide::ForwardDiffusion(z0) => forward_diffuse(z0, t_prev, config.seed, sched),
                };
            }
            z_tilde = sample_step(&z_tilde, t, v, &null, config.omega, denoiser, sched, t_prev)?;
            if let Some(b) = planned.blend {
                if b > 0.0 {
                    let eps = checked_eps(denoiser, &z_hat, t_prev, &null)?;
                    let guide_state =
                        pre_estimate_with(&z_hat, i + 1, config.async_distance, &eps, sched, &tmap);
                    hat_eps = Some(eps);
                    let field = ptm_with_residual(&guide_state.latent, &z_tilde, b)?;
                    z_tilde = field.real;
                    stats.clamped_pre_estimates += guide_state.clamped as usize;
                    stats.max_imag_residual = stats.max_imag_residual.max(field.imag_residual);
                }
                stats.transfer_steps += 1;
            } else {
                stats.refine_steps += 1;
            }
            Ok(())
        })();
        if let Err(e) = step {
            return Err(interrupted(i, t, vec![recon, sampling], e));
        }
        if in_stage {
            recon.push(t_prev, z_hat.clone());
        }
        sampling.push(t_prev, z_tilde.clone());
    }

    Ok(IllusionRun {
        output: z_tilde,
        reconstruction: recon,
        sampling,
        stats,
    })
}

/// Inversion (or forward diffusion) of `z0` followed by [`run_illusion`].
pub fn run_pipeline<D: Denoiser + ?Sized>(
    z0: &LatentTensor,
    v: &ConditionHandle,
    config: &SamplerConfig,
    denoiser: &D,
    sched: &NoiseSchedule,
) -> Result<(TrajectoryRecord, IllusionRun)> {
    let null = denoiser.null_condition();
    let inversion = run_inversion(z0, &null, denoiser, sched, config)?;
    let run = match config.guidance_source {
        GuidanceSource::DdimInversion => {
            let code = inversion.last().expect("inversion records its start");
            run_illusion(Guide::Inverted(code), v, config, denoiser, sched)?
        }
        GuidanceSource::ForwardDiffusion => {
            run_illusion(Guide::ForwardDiffusion(z0), v, config, denoiser, sched)?
        }
    };
    Ok((inversion, run))
}
