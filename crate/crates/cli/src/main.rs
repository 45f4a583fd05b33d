//! `flowlab`: trajectory generation, bound checks, embedding fits, training and the
//! verification suite.
//!
//! Exit status: 0 on success, 1 when an invariant fails or a run diverges, 2 on a bad
//! configuration or input.

mod commands;
mod config;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowlab::dynamics::Method;
use flowlab::verify::CHECK_COUNT;
use flowlab::{exec, RngSpec};

use config::{Config, SuiteScale, TrainMode};
use output::Output;

/// Marks errors caused by the user's configuration or inputs (exit status 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Parser)]
#[command(name = "flowlab", version, about = "Flow matching toward discrete targets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; the FLOWLAB_OUT environment variable takes precedence.
    #[arg(long, global = true, default_value = "flowlab-out")]
    out: PathBuf,
    /// Also write SVG figures.
    #[arg(long, global = true)]
    svg: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the data-parallel loops.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the optimal field from Gaussian starts and snap the endpoints.
    GenPaths {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        #[arg(long)]
        trajectories: Option<usize>,
    },
    /// Compare the concentration bound with a Monte-Carlo estimate.
    BoundCheck {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Fit the sinusoidal embedding to 1/(1-t) at each scale and dimension.
    EmbApprox,
    /// Train the off-subspace coefficients or the subspace network.
    Train {
        #[arg(value_parser = parse_mode)]
        mode: Option<TrainMode>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the numbered acceptance checks.
    Verify {
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
        /// Run the full-size suite instead of the quick one.
        #[arg(long)]
        full: bool,
        /// Check ids to run (default all).
        #[arg(long, value_delimiter = ',')]
        checks: Vec<u32>,
        /// Offset added to the optimal subspace drift in the identity check.
        #[arg(long)]
        perturb_optimal: Option<f64>,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "euler" => Ok(Method::Euler),
        "rk4" => Ok(Method::Rk4),
        _ => Err(format!("unknown method {s:?} (euler, rk4)")),
    }
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "offsubspace" => Ok(TrainMode::Offsubspace),
        "subspace" => Ok(TrainMode::Subspace),
        _ => Err(format!("unknown training mode {s:?} (offsubspace, subspace)")),
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenPaths { .. } => "gen-paths",
            Command::BoundCheck { .. } => "bound-check",
            Command::EmbApprox => "emb-approx",
            Command::Train { .. } => "train",
            Command::Verify { .. } => "verify",
        }
    }

    fn apply(&self, cfg: &mut Config) {
        match self {
            Command::GenPaths { steps, method, trajectories } => {
                if let Some(v) = steps {
                    cfg.gen_paths.steps = *v;
                }
                if method.is_some() {
                    cfg.gen_paths.method = *method;
                }
                if let Some(v) = trajectories {
                    cfg.gen_paths.trajectories = *v;
                }
            }
            Command::BoundCheck { samples } => {
                if let Some(v) = samples {
                    cfg.bound_check.samples = *v;
                }
            }
            Command::EmbApprox => {}
            Command::Train { mode, epochs, resume } => {
                if let Some(m) = mode {
                    cfg.train.mode = *m;
                }
                if epochs.is_some() {
                    cfg.train.epochs = *epochs;
                }
                if resume.is_some() {
                    cfg.train.resume = resume.clone();
                }
            }
            Command::Verify { full, checks, perturb_optimal, .. } => {
                if *full {
                    cfg.verify.scale = SuiteScale::Full;
                }
                if !checks.is_empty() {
                    cfg.verify.checks = checks.clone();
                }
                if let Some(p) = perturb_optimal {
                    cfg.verify.perturb_optimal = *p;
                }
            }
        }
    }
}

fn resolve_config(cli: &Cli) -> anyhow::Result<Config> {
    let mut cfg = match &cli.common.config {
        Some(p) => Config::load(p).map_err(|e| ConfigError(format!("{e:#}")))?,
        None => Config::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.run.seed = s;
    }
    if let Some(t) = cli.common.threads {
        cfg.run.threads = t;
    }
    if cfg.run.threads == 0 {
        return Err(ConfigError("run.threads must be at least 1".into()).into());
    }
    cli.command.apply(&mut cfg);
    if let Some(id) = cfg.verify.checks.iter().find(|id| !(1..=CHECK_COUNT).contains(*id)) {
        return Err(ConfigError(format!("unknown check id {id} (valid: 1-{CHECK_COUNT})")).into());
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> PathBuf {
    match std::env::var_os("FLOWLAB_OUT") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cli.common.out.clone(),
    }
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let cfg = resolve_config(cli)?;
    let config_toml = cfg.to_toml()?;
    let mut out = Output::create(&out_dir(cli))?;
    let svg = cli.common.svg;
    let name = cli.command.name();
    let result = exec::with_threads(cfg.run.threads, || match &cli.command {
        Command::GenPaths { .. } => commands::gen_paths(&cfg, &mut out, svg),
        Command::BoundCheck { .. } => commands::bound_check(&cfg, &mut out, svg),
        Command::EmbApprox => commands::emb_approx(&cfg, &mut out, svg),
        Command::Train { .. } => commands::train(&cfg, &mut out, svg),
        Command::Verify { json, .. } => commands::verify(&cfg, &mut out, *json),
    })?;
    // the manifest is written even when a run diverges, so partial outputs stay traceable
    output::finish(&mut out, name, &config_toml, RngSpec::new(cfg.run.seed, 0))?;
    result
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<ConfigError>()
            || c.is::<toml::de::Error>()
            || matches!(
                c.downcast_ref::<flowlab::Error>(),
                Some(
                    flowlab::Error::InvalidParameter(_)
                        | flowlab::Error::Shape(_)
                        | flowlab::Error::Parse { .. }
                        | flowlab::Error::EmptyDataset(_)
                        | flowlab::Error::ZeroData
                        | flowlab::Error::CheckpointVersion { .. }
                        | flowlab::Error::Json { .. }
                )
            )
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("flowlab: one or more invariants failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("flowlab: {e:#}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_apply() {
        let cli = Cli::parse_from(["flowlab", "train", "subspace", "--epochs", "3", "--seed", "7"]);
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.train.mode, TrainMode::Subspace);
        assert_eq!(cfg.train.epochs, Some(3));
        assert_eq!(cfg.run.seed, 7);
    }

    #[test]
    fn config_errors_classified() {
        let e: anyhow::Error = ConfigError("x".into()).into();
        assert!(is_config_error(&e));
        let e: anyhow::Error = flowlab::Error::Diverged { epoch: 1, loss: 1.0, initial: 0.1 }.into();
        assert!(!is_config_error(&e));
    }
}
