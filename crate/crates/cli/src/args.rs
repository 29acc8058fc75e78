//! Command-line surface and `--config` file expansion.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use crate::error::{io_at, CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "mba", version, about = "Multi-branch navigation agents on synthetic graph worlds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a suite of worlds with episodes.
    #[command(args_override_self = true)]
    GenWorld(GenWorldArgs),
    /// Train an agent on a generated suite.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Roll out a checkpoint (or the expert) on a suite and score it.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Train and evaluate a grid of branch configurations.
    #[command(args_override_self = true)]
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key = value` file of option values; command-line options win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct WorldArgs {
    #[arg(long, default_value_t = 30)]
    pub nodes: usize,
    /// Views per panorama.
    #[arg(long, default_value_t = 12)]
    pub k_views: usize,
    #[arg(long, default_value_t = 4)]
    pub max_objects: usize,
    #[arg(long, default_value_t = 64)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub object_dim: usize,
    /// Connection radius in meters.
    #[arg(long, default_value_t = 3.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 20.0)]
    pub box_size: f64,
    #[arg(long, default_value_t = 0.5)]
    pub z_jitter: f64,
    #[arg(long, default_value_t = 64)]
    pub instruction_dim: usize,
    /// Standard deviation of instruction noise.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 3)]
    pub min_hops: usize,
    /// Minimum start-goal geodesic distance in meters.
    #[arg(long, default_value_t = 6.0)]
    pub min_distance: f64,
    #[arg(long, default_value_t = 15)]
    pub max_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Seen,
    Unseen,
}

#[derive(Debug, Clone, Args)]
pub struct GenWorldArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long, default_value_t = 1)]
    pub worlds: usize,
    /// Episodes per world.
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    /// Seed of the first episode in every world.
    #[arg(long, default_value_t = 0)]
    pub first_episode: u64,
    /// Seen and unseen suites come from disjoint world seed ranges.
    #[arg(long, value_enum, default_value_t = Split::Seen)]
    pub split: Split,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 128)]
    pub ffn_hidden: usize,
    #[arg(long, default_value_t = 16)]
    pub depth_dim: usize,
    /// Ancillary branches reuse the weights of their base branch.
    #[arg(long)]
    pub share_params: bool,
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    /// Weight of the teacher-forced loss term.
    #[arg(long, default_value_t = 0.2)]
    pub mu: f64,
    /// Probability that a training rollout is teacher-forced.
    #[arg(long, default_value_t = 0.5)]
    pub mix: f64,
    /// Gradient-norm clipping threshold; 0 disables it.
    #[arg(long, default_value_t = 5.0)]
    pub max_grad_norm: f64,
    /// Draw fresh perturbations every epoch.
    #[arg(long)]
    pub resample: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Suite directory written by `gen-world`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "g:og,l:og")]
    pub branches: String,
    /// γ for perturbed branches that do not name one.
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    /// Highest fused probability.
    Greedy,
    /// Draw from the fused distribution, seeded by `--seed`.
    Sample,
    /// The expert action; needs no checkpoint.
    Oracle,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PolicyArg::Greedy)]
    pub policy: PolicyArg,
    /// Also write every decision to `trajectories.jsonl`.
    #[arg(long)]
    pub dump_traj: bool,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated seeds; defaults to `--seed`.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Semicolon-separated branch configurations, run before the grid.
    #[arg(long)]
    pub configs: Option<String>,
    /// Comma-separated global ancillary specs (`-` for none) added to `g:og,l:og`.
    #[arg(long, allow_hyphen_values = true)]
    pub globals: Option<String>,
    /// Comma-separated local ancillary specs (`-` for none) added to `g:og,l:og`.
    #[arg(long, allow_hyphen_values = true)]
    pub locals: Option<String>,
    #[arg(long, default_value = "0.5")]
    pub gammas: String,
    #[command(flatten)]
    pub world: WorldArgs,
    /// Training worlds per seed.
    #[arg(long, default_value_t = 20)]
    pub worlds: usize,
    /// Training episodes per world.
    #[arg(long, default_value_t = 5)]
    pub episodes: usize,
    /// Evaluation episodes per world on both splits.
    #[arg(long, default_value_t = 5)]
    pub eval_episodes: usize,
    #[arg(long, default_value_t = 20)]
    pub unseen_worlds: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            return Err(CliError::Usage(format!("config line {}: empty key", i + 1)));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

/// Splices the entries of a `--config` file in right after the subcommand,
/// so any option repeated on the command line overrides them.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(sub_name) = args.get(1).and_then(|s| s.to_str()).map(str::to_string) else {
        return Ok(args);
    };
    let cmd = Cli::command();
    let Some(sub) = cmd.find_subcommand(&sub_name) else {
        return Ok(args);
    };
    let mut path = None;
    let mut iter = args.iter().skip(2);
    while let Some(a) = iter.next() {
        match a.to_str() {
            Some("--config") => path = iter.next().cloned(),
            Some(s) if s.starts_with("--config=") => path = Some(OsString::from(&s["--config=".len()..])),
            _ => {}
        }
    }
    let Some(path) = path else {
        return Ok(args);
    };
    let path = PathBuf::from(path);
    let text = std::fs::read_to_string(&path).map_err(io_at(&path))?;
    let mut injected = Vec::new();
    for (key, value) in parse_config(&text)? {
        if key == "config" {
            return Err(CliError::Usage("config files cannot include other config files".into()));
        }
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| CliError::Usage(format!("unknown key `{key}` for `{sub_name}` in {}", path.display())))?;
        if arg.get_action().takes_values() {
            injected.push(OsString::from(format!("--{key}={value}")));
        } else {
            match value.as_str() {
                "true" => injected.push(OsString::from(format!("--{key}"))),
                "false" => {}
                other => return Err(CliError::Usage(format!("`{key}` takes true or false, got `{other}`"))),
            }
        }
    }
    let mut out = args[..2].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[2..]);
    Ok(out)
}
