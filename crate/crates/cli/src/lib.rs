//! `susmap` command-line front end.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use susmap_core::mcmc::ModelKind;

use crate::commands::Stage1Source;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal error
  2  usage error
  3  file could not be read or written
  4  invalid input or configuration
  5  problem too large for the requested model
  6  numerical failure
  7  estimation failed
  8  an input no longer matches the digest in its upstream manifest

On failure a one-line JSON record {error, exit_code, message, path?, stage?}
is written to stderr.";

#[derive(Debug, Parser)]
#[command(name = "susmap", version, about = "Spatial susceptibility mapping from outbreak panels", after_help = EXIT_CODES)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML config file
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set mcmc.n_iter=2000` (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Master seed for every random stream
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses all available cores
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, value_name = "CSV")]
    pub units: PathBuf,
    #[arg(long, value_name = "CSV")]
    pub panel: PathBuf,
}

#[derive(Debug, Args)]
pub struct Stage1Args {
    /// step1.json written by estimate-background
    #[arg(long, value_name = "JSON")]
    pub step1: Option<PathBuf>,
    /// Kernel range in km, instead of --step1 (needs --gamma)
    #[arg(long, requires = "gamma", conflicts_with = "step1")]
    pub phi: Option<f64>,
    /// Background rate, instead of --step1 (needs --phi)
    #[arg(long, requires = "phi", conflicts_with = "step1")]
    pub gamma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct McmcArgs {
    #[arg(long)]
    pub n_iter: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate units, a susceptibility field and an outbreak panel
    Simulate {
        /// Use these locations instead of generating a layout
        #[arg(long, value_name = "CSV")]
        units: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        n_times: Option<usize>,
        /// independent, gp or constant
        #[arg(long)]
        field: Option<String>,
    },
    /// Estimate the background rate and kernel range
    EstimateBackground {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, requires = "window_end")]
        window_start: Option<usize>,
        #[arg(long, requires = "window_start")]
        window_end: Option<usize>,
        #[arg(long)]
        window_width: Option<usize>,
        #[arg(long, requires = "grid_max")]
        grid_min: Option<f64>,
        #[arg(long, requires = "grid_min")]
        grid_max: Option<f64>,
        #[arg(long)]
        grid_size: Option<usize>,
        #[arg(long)]
        b0: Option<f64>,
    },
    /// Decide between the independent and the spatial prior
    ChooseModel {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        stage1: Stage1Args,
        #[command(flatten)]
        mcmc: McmcArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Sample the posterior of one model
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        stage1: Stage1Args,
        #[command(flatten)]
        mcmc: McmcArgs,
        /// ism, sdsm or sdsm-picar
        #[arg(long)]
        model: Option<ModelKind>,
        /// Also write every recorded draw
        #[arg(long)]
        chain: bool,
        /// Gzip the chain file
        #[arg(long, requires = "chain")]
        gzip: bool,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Score models on held-out units against a known field
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "CSV")]
        beta_true: PathBuf,
        #[command(flatten)]
        stage1: Stage1Args,
        #[command(flatten)]
        mcmc: McmcArgs,
        /// Comma-separated models
        #[arg(long, value_delimiter = ',')]
        models: Vec<ModelKind>,
        /// Fill the `seconds` column
        #[arg(long)]
        timing: bool,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run the simulation benchmark and print the summary table
    #[command(name = "bench-table1")]
    BenchTable1 {
        #[arg(long)]
        replicates: Option<usize>,
        /// Comma-separated, e.g. independent,rho400
        #[arg(long, value_delimiter = ',')]
        scenarios: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        models: Vec<ModelKind>,
        #[arg(long)]
        timing: bool,
        /// Skip replicates not started within this many seconds
        #[arg(long)]
        time_budget: Option<f64>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// estimate-background, choose-model, fit and optionally evaluate
    Pipeline {
        #[command(flatten)]
        data: DataArgs,
        /// Score the chosen model on held-out units
        #[arg(long, value_name = "CSV")]
        beta_true: Option<PathBuf>,
        #[command(flatten)]
        mcmc: McmcArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Recheck the digests recorded in a run directory's manifest
    Verify {
        #[arg(value_name = "DIR")]
        dir: PathBuf,
    },
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn push<T: ToString>(out: &mut Vec<String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push(format!("{key}={}", v.to_string()));
    }
}

fn mcmc_overrides(out: &mut Vec<String>, m: &McmcArgs) {
    push(out, "mcmc.n_iter", m.n_iter);
    push(out, "mcmc.burn_in", m.burn_in);
    push(out, "mcmc.thin", m.thin);
}

fn models_value(models: &[ModelKind]) -> String {
    let items: Vec<String> = models.iter().map(|m| toml_str(m.as_str())).collect();
    format!("[{}]", items.join(", "))
}

/// Subcommand flags expressed as config overrides, applied after `--set`.
fn flag_overrides(cmd: &Command) -> Vec<String> {
    let mut o = Vec::new();
    match cmd {
        Command::Simulate { n_times, field, .. } => {
            push(&mut o, "simulate.n_times", *n_times);
            push(&mut o, "simulate.field", field.as_deref().map(toml_str));
        }
        Command::EstimateBackground {
            window_start,
            window_end,
            window_width,
            grid_min,
            grid_max,
            grid_size,
            b0,
            ..
        } => {
            push(&mut o, "step1.window_start", *window_start);
            push(&mut o, "step1.window_end", *window_end);
            push(&mut o, "step1.window_width", *window_width);
            push(&mut o, "step1.grid_min", grid_min.map(io::num));
            push(&mut o, "step1.grid_max", grid_max.map(io::num));
            push(&mut o, "step1.grid_size", *grid_size);
            push(&mut o, "step1.b0", b0.map(io::num));
        }
        Command::ChooseModel { stage1, mcmc, .. } => {
            stage1_overrides(&mut o, stage1);
            mcmc_overrides(&mut o, mcmc);
        }
        Command::Fit { stage1, mcmc, model, chain, gzip, rank, .. } => {
            stage1_overrides(&mut o, stage1);
            mcmc_overrides(&mut o, mcmc);
            push(&mut o, "fit.model", model.map(|m| toml_str(m.as_str())));
            if *chain {
                o.push("fit.write_chain=true".into());
            }
            if *gzip {
                o.push("fit.gzip_chain=true".into());
            }
            push(&mut o, "picar.rank", *rank);
        }
        Command::Evaluate { stage1, mcmc, models, timing, .. } => {
            stage1_overrides(&mut o, stage1);
            mcmc_overrides(&mut o, mcmc);
            if !models.is_empty() {
                o.push(format!("evaluate.models={}", models_value(models)));
            }
            if *timing {
                o.push("evaluate.timing=true".into());
            }
        }
        Command::BenchTable1 { replicates, scenarios, models, timing, time_budget, .. } => {
            push(&mut o, "bench.replicates", *replicates);
            if !scenarios.is_empty() {
                let items: Vec<String> = scenarios.iter().map(|s| toml_str(s)).collect();
                o.push(format!("bench.scenarios=[{}]", items.join(", ")));
            }
            if !models.is_empty() {
                o.push(format!("bench.models={}", models_value(models)));
            }
            if *timing {
                o.push("bench.timing=true".into());
            }
            push(&mut o, "bench.time_budget_secs", time_budget.map(io::num));
        }
        Command::Pipeline { mcmc, .. } => mcmc_overrides(&mut o, mcmc),
        Command::Verify { .. } => {}
    }
    o
}

fn stage1_overrides(o: &mut Vec<String>, s: &Stage1Args) {
    push(o, "fit.phi", s.phi.map(io::num));
    push(o, "fit.gamma", s.gamma.map(io::num));
}

fn stage1_source(s: &Stage1Args, cfg: &RunConfig) -> CliResult<Stage1Source> {
    Stage1Source::from_args(s.step1.clone(), cfg)
        .ok_or_else(|| CliError::Config("pass --step1 <step1.json>, or --phi and --gamma".into()))
}

/// Loads the configuration for `cli`: file, then `--set`, then `--seed`
/// and subcommand flags.
pub fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut overrides = cli.global.set.clone();
    push(&mut overrides, "seed", cli.global.seed);
    overrides.extend(flag_overrides(&cli.command));
    RunConfig::load(cli.global.config.as_deref(), &overrides)
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> CliResult<()> {
    match &cli.command {
        Command::Simulate { units, out, .. } => commands::simulate_cmd(cfg, units.as_deref(), out).map(|_| ()),
        Command::EstimateBackground { data, out, .. } => {
            commands::estimate_background_cmd(cfg, &data.units, &data.panel, out).map(|_| ())
        }
        Command::ChooseModel { data, stage1, out, .. } => {
            let src = stage1_source(stage1, cfg)?;
            commands::choose_model_cmd(cfg, &data.units, &data.panel, &src, out).map(|_| ())
        }
        Command::Fit { data, stage1, out, .. } => {
            let src = stage1_source(stage1, cfg)?;
            let model = cfg
                .fit
                .model
                .ok_or_else(|| CliError::Config("no model: pass --model or set fit.model".into()))?;
            commands::fit_cmd(cfg, &data.units, &data.panel, &src, model, out).map(|_| ())
        }
        Command::Evaluate { data, beta_true, stage1, out, .. } => {
            let src = Stage1Source::from_args(stage1.step1.clone(), cfg);
            commands::evaluate_cmd(cfg, &data.units, &data.panel, beta_true, src.as_ref(), &cfg.evaluate.models, out)
                .map(|_| ())
        }
        Command::BenchTable1 { out, .. } => commands::bench_cmd(cfg, out),
        Command::Pipeline { data, beta_true, out, .. } => {
            let r = commands::pipeline_cmd(cfg, &data.units, &data.panel, beta_true.as_deref(), out)?;
            println!("pipeline: {} -> {} ({})", r.verdict.as_str(), r.model, out.display());
            Ok(())
        }
        Command::Verify { dir } => {
            let n = manifest::verify_dir(dir)?;
            println!("{n} output(s) match {}", dir.join(manifest::MANIFEST_FILE).display());
            Ok(())
        }
    }
}

/// Runs a parsed command line on a pool of `--threads` workers.
pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    pool.install(|| dispatch(cli, &cfg))
}
