use std::net::TcpListener;
use std::path::Path;
use std::sync::OnceLock;

use anyhow::{bail, Context};
use ptdiff_core::codec::{Codec, Decoded, IdentityCodec, ImageTensor};
use ptdiff_core::denoiser::{
    AnalyticDenoiser, ConditionHandle, Denoiser, GaussianMixture, RemoteDenoiser,
};
use ptdiff_core::engine::{
    run_illusion, run_inversion, transfer_plan, GuidanceSource, Guide, IllusionRun, SamplerConfig,
    StageStats, TrajectoryRecord,
};
use ptdiff_core::metrics::{mean_std, phase_correlation};
use ptdiff_core::protocol::{serve_echo, Connection, Frame, MessageType};
use ptdiff_core::ptt::RawTensor;
use ptdiff_core::schedule::NoiseSchedule;
use ptdiff_core::{scene, Error, LatentTensor};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{EchoArgs, RunArgs, ScheduleArgs};
use crate::manifest::{Ablation, BackendKind, CodecKind, Manifest};
use crate::staging::Staging;
use crate::Usage;

enum Backend {
    Analytic(AnalyticDenoiser),
    Remote(RemoteDenoiser),
}

/// Everything a run needs once the manifest is resolved.
struct Session {
    manifest: Manifest,
    schedule: NoiseSchedule,
    backend: Backend,
    z0: LatentTensor,
}

fn analytic_backend(
    m: &Manifest,
    schedule: &NoiseSchedule,
    shape: (usize, usize, usize),
) -> anyhow::Result<AnalyticDenoiser> {
    let (c, h, w) = shape;
    if m.mixture.is_empty() {
        if c != 1 {
            bail!(Usage(format!(
                "the built-in scene is grayscale but the reference has {c} channels; pass --mixture"
            )));
        }
        return Ok(scene::scene_denoiser(h, w, m.sigma, schedule.clone())?);
    }
    let mut means = Vec::new();
    let mut names = Vec::new();
    for path in &m.mixture {
        let img =
            ImageTensor::read(path).with_context(|| format!("mixture image {}", path.display()))?;
        means.push(IdentityCodec.encode(&img)?);
        names.push(
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
    }
    if means[0].dim() != shape {
        bail!(Error::Parameter {
            field: "mixture",
            reason: format!(
                "components are {:?} but the reference latent is {shape:?}",
                means[0].dim()
            ),
        });
    }
    Ok(AnalyticDenoiser::with_names(
        GaussianMixture::from_images(means, m.sigma)?,
        schedule.clone(),
        names,
    ))
}

impl Session {
    fn open(manifest: Manifest) -> anyhow::Result<Self> {
        manifest.validate()?;
        let schedule = manifest.schedule.build();
        let path = manifest.reference()?;
        let image =
            ImageTensor::read(path).with_context(|| format!("reference {}", path.display()))?;
        let (backend, z0) = match manifest.backend {
            BackendKind::Analytic => {
                let z0 = IdentityCodec.encode(&image)?;
                (
                    Backend::Analytic(analytic_backend(&manifest, &schedule, z0.dim())?),
                    z0,
                )
            }
            BackendKind::Remote => {
                let remote = RemoteDenoiser::connect(manifest.addr.as_deref().unwrap_or_default())?;
                let z0 = match manifest.codec {
                    CodecKind::Remote => remote.encode(&image)?,
                    CodecKind::Identity => IdentityCodec.encode(&image)?,
                };
                (Backend::Remote(remote), z0)
            }
        };
        Ok(Self {
            manifest,
            schedule,
            backend,
            z0,
        })
    }

    fn denoiser(&self) -> &dyn Denoiser {
        match &self.backend {
            Backend::Analytic(d) => d,
            Backend::Remote(d) => d,
        }
    }

    fn condition(&self) -> anyhow::Result<ConditionHandle> {
        let m = &self.manifest;
        Ok(match (&self.backend, &m.prompt, &m.components) {
            (Backend::Analytic(d), Some(p), _) => d.prompt(p)?,
            (Backend::Analytic(d), None, Some(c)) => d.condition(c)?,
            (Backend::Remote(d), Some(p), _) => d.embed_text(p)?,
            _ => bail!(Usage(
                "a prompt is required (--prompt or --components)".into()
            )),
        })
    }

    fn decode(&self, z: &LatentTensor) -> anyhow::Result<Decoded> {
        Ok(match (&self.backend, self.manifest.codec) {
            (Backend::Remote(d), CodecKind::Remote) => d.decode(z)?,
            _ => IdentityCodec.decode(z)?,
        })
    }

    fn invert(&self, staging: &mut Staging) -> anyhow::Result<TrajectoryRecord> {
        let null = self.denoiser().null_condition();
        run_inversion(
            &self.z0,
            &null,
            self.denoiser(),
            &self.schedule,
            &self.manifest.sampler,
        )
        .map_err(|e| self.keep_partial(e, staging))
    }

    /// Dumps whatever an interrupted run completed, under the partial name.
    fn keep_partial(&self, err: Error, staging: &mut Staging) -> anyhow::Error {
        if let (true, Error::Interrupted { partial, .. }) = (self.manifest.dump_trajectory, &err) {
            let dir = staging.path("trajectories");
            for record in &partial.trajectories {
                if let Err(e) = record.dump(&dir) {
                    eprintln!("warning: could not dump partial trajectory: {e}");
                }
            }
        }
        err.into()
    }

    fn illusion(
        &self,
        code: Option<&LatentTensor>,
        v: &ConditionHandle,
        config: &SamplerConfig,
        denoiser: &dyn Denoiser,
    ) -> ptdiff_core::Result<IllusionRun> {
        let guide = match (config.guidance_source, code) {
            (GuidanceSource::DdimInversion, Some(code)) => Guide::Inverted(code),
            _ => Guide::ForwardDiffusion(&self.z0),
        };
        run_illusion(guide, v, config, denoiser, &self.schedule)
    }
}

fn single_d(args: &RunArgs) -> anyhow::Result<()> {
    match args.d {
        Some(d) if !d.is_single() => bail!(Usage("a --d range is only valid for sweep".into())),
        _ => Ok(()),
    }
}

fn json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("metrics serialize") + "\n"
}

#[derive(Serialize)]
struct CodeMetrics {
    guidance_source: GuidanceSource,
    invert_steps: usize,
    mean: f64,
    std: f64,
    n: usize,
}

pub fn invert(args: &RunArgs) -> anyhow::Result<()> {
    single_d(args)?;
    let session = Session::open(Manifest::resolve(args)?)?;
    let mut staging = Staging::new(&args.out)?;
    let inversion = session.invert(&mut staging)?;
    let code = inversion.last().expect("inversion records its start");
    let values: Vec<f64> = code.iter().copied().collect();
    let (mean, std) = mean_std(&values);
    RawTensor::from_latent(code).write(staging.path("code.ptt"))?;
    staging.write(
        "metrics.json",
        json_line(&CodeMetrics {
            guidance_source: session.manifest.sampler.guidance_source,
            invert_steps: session.manifest.sampler.invert_steps,
            mean,
            std,
            n: values.len(),
        }),
    )?;
    if session.manifest.dump_trajectory {
        inversion.dump(staging.path("trajectories"))?;
    }
    staging.write("config.json", session.manifest.to_json())?;
    staging.commit()?;
    Ok(())
}

#[derive(Serialize)]
struct RunMetrics {
    config_hash: String,
    seed: u64,
    d: i64,
    phase_correlation: f64,
    bands: Vec<Option<f64>>,
    n_bins: usize,
    clamp_rate: f64,
    stats: StageStats,
}

fn run_metrics(
    session: &Session,
    manifest: &Manifest,
    run: &IllusionRun,
    decoded: &Decoded,
) -> anyhow::Result<RunMetrics> {
    let report = phase_correlation(&session.z0, &run.output)?;
    Ok(RunMetrics {
        config_hash: manifest.hash(),
        seed: manifest.sampler.seed,
        d: manifest.sampler.async_distance,
        phase_correlation: report.global,
        bands: report.band,
        n_bins: report.n_bins,
        clamp_rate: decoded.clamp_rate(),
        stats: run.stats.clone(),
    })
}

pub fn generate(args: &RunArgs, ablation: Option<Ablation>) -> anyhow::Result<()> {
    single_d(args)?;
    let mut manifest = Manifest::resolve(args)?;
    if let Some(mode) = ablation {
        manifest = manifest.with_ablation(mode);
    }
    let session = Session::open(manifest)?;
    let v = session.condition()?;
    let mut staging = Staging::new(&args.out)?;
    let config = &session.manifest.sampler;
    let inversion = match config.guidance_source {
        GuidanceSource::DdimInversion => Some(session.invert(&mut staging)?),
        GuidanceSource::ForwardDiffusion => None,
    };
    let run = session
        .illusion(
            inversion.as_ref().and_then(|r| r.last()),
            &v,
            config,
            session.denoiser(),
        )
        .map_err(|e| session.keep_partial(e, &mut staging))?;
    let decoded = session.decode(&run.output)?;
    decoded.image.write(staging.path("output.pgm"))?;
    RawTensor::from_latent(&run.output).write(staging.path("latent.ptt"))?;
    let metrics = run_metrics(&session, &session.manifest, &run, &decoded)?;
    staging.write("metrics.json", json_line(&metrics))?;
    if session.manifest.dump_trajectory {
        let dir = staging.path("trajectories");
        for record in inversion.iter().chain([&run.reconstruction, &run.sampling]) {
            record.dump(&dir)?;
        }
    }
    staging.write("config.json", session.manifest.to_json())?;
    staging.commit()?;
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(())
}

#[derive(Serialize)]
struct SweepRun {
    seed: u64,
    config_hash: String,
    phase_correlation: f64,
}

#[derive(Serialize)]
struct SweepRow {
    d: i64,
    phase_correlation_mean: f64,
    phase_correlation_std: f64,
    runs: Vec<SweepRun>,
}

#[derive(Serialize)]
struct SweepSpec {
    d_start: i64,
    d_end: i64,
    step: i64,
    seeds: u64,
}

pub fn sweep(args: &RunArgs, step: i64, seeds: u64) -> anyhow::Result<()> {
    let range = args.d.ok_or_else(|| Usage("sweep needs --d a..b".into()))?;
    if step < 1 {
        bail!(Usage("--step must be positive".into()));
    }
    if seeds < 1 {
        bail!(Usage("--seeds must be positive".into()));
    }
    let base = Manifest::resolve(args)?;
    let session = Session::open(base.clone())?;
    let v = session.condition()?;
    let distances: Vec<i64> = (range.start..=range.end).step_by(step as usize).collect();
    let jobs: Vec<Manifest> = distances
        .iter()
        .flat_map(|&d| {
            (0..seeds).map({
                let base = base.clone();
                move |i| {
                    let mut m = base.clone();
                    m.sampler.async_distance = d;
                    m.sampler.seed = base.sampler.seed + i;
                    m
                }
            })
        })
        .collect();
    for job in &jobs {
        job.validate()?;
    }

    let mut staging = Staging::new(&args.out)?;
    let code = match base.sampler.guidance_source {
        GuidanceSource::DdimInversion => session.invert(&mut staging)?.last().cloned(),
        GuidanceSource::ForwardDiffusion => None,
    };
    let out_dir = args.out.clone();
    // One connection per rayon worker, opened on first use; condition
    // handles are per connection so each worker embeds the prompt itself.
    let workers: Vec<OnceLock<Result<(RemoteDenoiser, ConditionHandle), String>>> = (0
        ..rayon::current_num_threads())
        .map(|_| OnceLock::new())
        .collect();
    let connect = || -> anyhow::Result<(RemoteDenoiser, ConditionHandle)> {
        let remote = RemoteDenoiser::connect(base.addr.as_deref().unwrap_or_default())?;
        let v = remote.embed_text(base.prompt.as_deref().unwrap_or_default())?;
        Ok((remote, v))
    };
    let results: Vec<anyhow::Result<(String, f64)>> = jobs
        .par_iter()
        .map(|job| {
            let own = match &session.backend {
                Backend::Remote(_) => {
                    let slot = &workers[rayon::current_thread_index().unwrap_or(0)];
                    let worker = slot.get_or_init(|| connect().map_err(|e| format!("{e:#}")));
                    Some(worker.as_ref().map_err(|e| Error::Backend(e.clone()))?)
                }
                Backend::Analytic(_) => None,
            };
            let (denoiser, v): (&dyn Denoiser, &ConditionHandle) = match own {
                Some((remote, v)) => (remote, v),
                None => (session.denoiser(), &v),
            };
            let run = session.illusion(code.as_ref(), v, &job.sampler, denoiser)?;
            let decoded = match own {
                Some((remote, _)) if job.codec == CodecKind::Remote => {
                    remote.decode(&run.output)?
                }
                _ => session.decode(&run.output)?,
            };
            let hash = job.hash();
            let mut files = Staging::new(&out_dir)?;
            decoded.image.write(files.path(&format!("{hash}.pgm")))?;
            RawTensor::from_latent(&run.output).write(files.path(&format!("{hash}.ptt")))?;
            files.commit()?;
            Ok((hash, phase_correlation(&session.z0, &run.output)?.global))
        })
        .collect();

    let mut lines = String::new();
    let mut results = results.into_iter();
    for (k, &d) in distances.iter().enumerate() {
        let mut runs = Vec::new();
        for i in 0..seeds {
            let (hash, pc) = results.next().expect("one result per job")?;
            runs.push(SweepRun {
                seed: jobs[k * seeds as usize + i as usize].sampler.seed,
                config_hash: hash,
                phase_correlation: pc,
            });
        }
        let values: Vec<f64> = runs.iter().map(|r| r.phase_correlation).collect();
        let (mean, std) = mean_std(&values);
        let row = SweepRow {
            d,
            phase_correlation_mean: mean,
            phase_correlation_std: std,
            runs,
        };
        print!("{}", json_line(&row));
        lines.push_str(&json_line(&row));
    }
    staging.write("metrics.jsonl", lines)?;
    staging.write(
        "sweep.json",
        json_line(&SweepSpec {
            d_start: range.start,
            d_end: range.end,
            step,
            seeds,
        }),
    )?;
    staging.write("config.json", base.to_json())?;
    staging.commit()?;
    Ok(())
}

#[derive(Serialize)]
struct ScheduleRow {
    step: usize,
    from: usize,
    to: usize,
    alpha_bar: f64,
    stage: &'static str,
    blend: Option<f64>,
}

pub fn schedule_dump(args: &ScheduleArgs) -> anyhow::Result<()> {
    let schedule = args.schedule.build();
    let config = SamplerConfig {
        steps: args.steps,
        blend: ptdiff_core::spectral::BlendParams::new(args.lambda, args.tau)?,
        ..SamplerConfig::default()
    };
    for (i, p) in transfer_plan(&config, &schedule)?.iter().enumerate() {
        let row = ScheduleRow {
            step: i + 1,
            from: p.from,
            to: p.to,
            alpha_bar: schedule.alpha_bar(p.to),
            stage: if p.in_stage { "transfer" } else { "refine" },
            blend: p.blend,
        };
        print!("{}", json_line(&row));
    }
    if let Some(path) = &args.ptt {
        RawTensor::from_slice(schedule.alpha_bars()).write(path)?;
    }
    Ok(())
}

pub fn protocol_echo(args: &EchoArgs) -> anyhow::Result<()> {
    match &args.check {
        Some(dir) => check_fixtures(dir, args.addr.as_deref()),
        None => {
            let listener = TcpListener::bind(&args.listen).map_err(Error::Io)?;
            println!("listening on {}", listener.local_addr().map_err(Error::Io)?);
            serve_echo(listener, args.max_connections)?;
            Ok(())
        }
    }
}

fn check_fixtures(dir: &Path, addr: Option<&str>) -> anyhow::Result<()> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(Error::Io)
        .with_context(|| format!("fixture directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!(Usage(format!("no .bin fixtures in {}", dir.display())));
    }

    let (addr, server) = match addr {
        Some(a) => (a.to_owned(), None),
        None => {
            let listener = TcpListener::bind("127.0.0.1:0").map_err(Error::Io)?;
            let a = listener.local_addr().map_err(Error::Io)?.to_string();
            (
                a,
                Some(std::thread::spawn(move || serve_echo(listener, Some(1)))),
            )
        }
    };
    let mut conn = Connection::connect(&addr)?;
    let mut failures = 0;
    for path in &paths {
        let name = path.file_name().unwrap_or_default().to_string_lossy();
        let bytes = std::fs::read(path).map_err(Error::Io)?;
        let verdict = match Frame::decode(&bytes) {
            Err(e) => Err(format!("does not decode: {e}")),
            Ok(f) if f.encode() != bytes => Err("re-encodes differently".to_owned()),
            Ok(f) if f.kind == MessageType::Bye => Ok(()),
            Ok(f) => match conn.request(f.kind, f.header.clone(), f.payload.clone()) {
                Err(e) => Err(format!("echo failed: {e}")),
                Ok(r) if r.kind != MessageType::Result => Err(format!("echo replied {:?}", r.kind)),
                Ok(r)
                    if r.payload
                        .iter()
                        .map(|v| v.to_bits())
                        .ne(f.payload.iter().map(|v| v.to_bits())) =>
                {
                    Err("echo altered the payload".to_owned())
                }
                Ok(_) => Ok(()),
            },
        };
        match verdict {
            Ok(()) => println!("ok {name}"),
            Err(why) => {
                failures += 1;
                println!("FAILED {name}: {why}");
            }
        }
    }
    conn.bye()?;
    if let Some(handle) = server {
        handle
            .join()
            .map_err(|_| anyhow::anyhow!("echo server panicked"))??;
    }
    if failures > 0 {
        bail!(Error::Data(format!(
            "{failures} of {} fixtures failed",
            paths.len()
        )));
    }
    Ok(())
}
