use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ptdiff_core::engine::GuidanceSource;

use crate::manifest::{Ablation, BackendKind, CodecKind, ScheduleName};

#[derive(Debug, Parser)]
#[command(name = "ptdiff", version, about = "Phase-transfer illusion sampler")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// DDIM-invert the reference and write the noise code.
    Invert(RunArgs),
    /// Run the full sampler and write the illusion image.
    Generate(RunArgs),
    /// Run the sampler with one component switched off.
    Ablate {
        #[arg(long, value_enum)]
        mode: Ablation,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the sampler over a range of async distances and seeds.
    Sweep {
        /// Stride through the `--d` range.
        #[arg(long, default_value_t = 1)]
        step: i64,
        /// Seeds per distance, counting up from `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Print the coarse grid with `ᾱ` and blend coefficients.
    ScheduleDump(ScheduleArgs),
    /// Loopback echo server and golden-fixture conformance check.
    ProtocolEcho(EchoArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum GuidanceArg {
    DdimInversion,
    ForwardDiffusion,
}

impl From<GuidanceArg> for GuidanceSource {
    fn from(g: GuidanceArg) -> Self {
        match g {
            GuidanceArg::DdimInversion => GuidanceSource::DdimInversion,
            GuidanceArg::ForwardDiffusion => GuidanceSource::ForwardDiffusion,
        }
    }
}

/// `--d 3` or `--d -9..9` (inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DRange {
    pub start: i64,
    pub end: i64,
}

impl DRange {
    pub fn is_single(&self) -> bool {
        self.start == self.end
    }
}

impl FromStr for DRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parse = |v: &str| v.trim().parse::<i64>().map_err(|e| format!("`{v}`: {e}"));
        // Skip a leading sign so "-9..9" splits on the right "..".
        match s.get(1..).and_then(|rest| rest.find("..")).map(|i| i + 1) {
            Some(i) => {
                let (start, end) = (parse(&s[..i])?, parse(&s[i + 2..])?);
                if start > end {
                    return Err(format!("empty range {s}"));
                }
                Ok(Self { start, end })
            }
            None => {
                let v = parse(s)?;
                Ok(Self { start: v, end: v })
            }
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Resolved config from an earlier run; other flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    #[arg(long, value_enum)]
    pub codec: Option<CodecKind>,
    /// Model server, `host:port`.
    #[arg(long, env = "PTDIFF_ADDR")]
    pub addr: Option<String>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleName>,
    /// Reference image (PGM/PPM).
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Prompt text; on the analytic backend, comma-separated component name prefixes.
    #[arg(long, conflicts_with = "components")]
    pub prompt: Option<String>,
    /// Analytic mixture component indices.
    #[arg(long, value_delimiter = ',')]
    pub components: Option<Vec<usize>>,
    /// PGM files forming the analytic mixture instead of the built-in scene.
    #[arg(long, value_delimiter = ',')]
    pub mixture: Option<Vec<PathBuf>>,
    /// Spread of each analytic mixture component.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub invert_steps: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Async distance in coarse steps; `a..b` for sweeps.
    #[arg(long, allow_hyphen_values = true)]
    pub d: Option<DRange>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub guidance_source: Option<GuidanceArg>,
    /// Disable phase transfer entirely.
    #[arg(long)]
    pub no_ptm: bool,
    /// Write every trajectory step as a PTT1 file.
    #[arg(long)]
    pub dump_trajectory: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ScheduleArgs {
    #[arg(long, value_enum, default_value = "stable_diffusion")]
    pub schedule: ScheduleName,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.4)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.6)]
    pub tau: f64,
    /// Also write the full `ᾱ` table as a PTT1 tensor.
    #[arg(long)]
    pub ptt: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EchoArgs {
    /// Address to serve on.
    #[arg(long, default_value = "127.0.0.1:0", conflicts_with = "check")]
    pub listen: String,
    /// Stop after this many connections.
    #[arg(long)]
    pub max_connections: Option<usize>,
    /// Check the golden frames in this directory instead of serving.
    #[arg(long)]
    pub check: Option<PathBuf>,
    /// Echo server to check against; an in-process one when absent.
    #[arg(long, requires = "check")]
    pub addr: Option<String>,
}
