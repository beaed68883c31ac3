use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use vesselda_core::synthgen::Polarity;

use crate::commands::{self, Layout};
use crate::config::{self, ConfigError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "vesselda", version, about = "Semi-supervised cross-domain vessel segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set phase1.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory holding manifests and the lock file. Defaults to the
    /// command's output directory.
    #[arg(long, global = true)]
    pub root: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the phantom corpus.
    Synth(OutArg),
    /// Preprocess raw phantoms into network-ready slices.
    Preprocess(OutArg),
    /// Adversarial generator training.
    TrainPhase1(OutArg),
    /// Encoder and label-branch training from a Phase 1 checkpoint.
    TrainPhase2 {
        #[arg(long)]
        phase1_ckpt: Option<PathBuf>,
        #[command(flatten)]
        out: OutArg,
    },
    /// Segment every image of a directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sato vesselness baseline.
    BaselineSato {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Filter scales in pixels, comma separated.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value_t = PolarityArg::Auto)]
        polarity: PolarityArg,
    },
    /// Score predicted label maps against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// JSON report path; a text table is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Projection and overlay panels of a completed run.
    Figures(OutArg),
    /// Everything from synthesis to evaluation and figures.
    Pipeline(OutArg),
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Run directory; defaults to `output_root` from the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PolarityArg {
    /// Bright vessels for source slices, dark for target slices.
    Auto,
    Bright,
    Dark,
}

impl PolarityArg {
    fn resolve(self) -> Option<Polarity> {
        match self {
            PolarityArg::Auto => None,
            PolarityArg::Bright => Some(Polarity::Bright),
            PolarityArg::Dark => Some(Polarity::Dark),
        }
    }
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Preprocess(_) => "preprocess",
            Command::TrainPhase1(_) => "train-phase1",
            Command::TrainPhase2 { .. } => "train-phase2",
            Command::Infer { .. } => "infer",
            Command::BaselineSato { .. } => "baseline-sato",
            Command::Evaluate { .. } => "evaluate",
            Command::Figures(_) => "figures",
            Command::Pipeline(_) => "pipeline",
        }
    }
}

/// Failure of a CLI invocation, mapped to an exit code.
#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

/// Effective configuration: file, then `--set` overrides, then `--seed`.
pub fn load_config(common: &Common, scales: Option<&[f64]>) -> Result<RunConfig, ConfigError> {
    let text = match &common.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| ConfigError::new(format!("cannot read {}: {e}", p.display()), None))?),
        None => None,
    };
    let mut overrides = common.set.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(s) = scales {
        overrides.push(format!("sato.scales_px={}", serde_json::to_string(s).expect("floats serialize")));
    }
    config::load(text.as_deref(), &overrides)
}

fn parent_or_cwd(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Parses `cli.command`'s arguments against an already-loaded configuration
/// and runs it, writing the manifest under the resolved root.
pub fn dispatch(cli: &Cli, cfg: &RunConfig) -> anyhow::Result<crate::manifest::RunManifest> {
    let run_dir = |o: &OutArg| o.out.clone().unwrap_or_else(|| cfg.output_root.clone());
    let root = |default: PathBuf| cli.common.root.clone().unwrap_or(default);
    let name = cli.command.name();
    match &cli.command {
        Command::Synth(o) => commands::execute(name, cfg, &root(run_dir(o)), commands::synth),
        Command::Preprocess(o) => commands::execute(name, cfg, &root(run_dir(o)), commands::preprocess),
        Command::TrainPhase1(o) => commands::execute(name, cfg, &root(run_dir(o)), commands::train_phase1),
        Command::TrainPhase2 { phase1_ckpt, out } => {
            let dir = run_dir(out);
            let ckpt = phase1_ckpt.clone().unwrap_or_else(|| Layout::new(&dir).phase1_ckpt());
            commands::execute(name, cfg, &root(dir), |r| commands::train_phase2(r, &ckpt))
        }
        Command::Infer { ckpt, input, out } => commands::execute(name, cfg, &root(out.clone()), |r| {
            let rep = commands::infer_batch(r, ckpt, input, out)?;
            record_batch(r, &rep);
            Ok(())
        }),
        Command::BaselineSato { input, out, polarity, .. } => commands::execute(name, cfg, &root(out.clone()), |r| {
            let rep = commands::baseline_sato(r, input, out, polarity.resolve())?;
            record_batch(r, &rep);
            Ok(())
        }),
        Command::Evaluate { pred, gt, out } => commands::execute(name, cfg, &root(parent_or_cwd(out)), |r| {
            let rep = commands::evaluate(r, pred, gt, out)?;
            r.summary.insert("vessel_dice".into(), rep.vessels.dice.mean);
            r.summary.insert("vessel_cldice".into(), rep.vessels.cldice.mean);
            r.summary.insert("brain_dice".into(), rep.brain.dice.mean);
            Ok(())
        }),
        Command::Figures(o) => commands::execute(name, cfg, &root(run_dir(o)), commands::figures),
        Command::Pipeline(o) => commands::execute(name, cfg, &root(run_dir(o)), commands::pipeline),
    }
}

fn record_batch(run: &mut commands::Run, rep: &commands::BatchReport) {
    let failed = rep.slices.iter().filter(|s| !s.ok).count();
    run.summary.insert("slices".into(), rep.slices.len() as f64);
    run.summary.insert("failed_slices".into(), failed as f64);
    if let Some(d) = rep.mean_vessel_dice {
        run.summary.insert("mean_vessel_dice".into(), d);
    }
}

/// Parses and runs one command line, returning the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run_parsed(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn run_parsed(cli: &Cli) -> Result<(), CliError> {
    let scales = match &cli.command {
        Command::BaselineSato { scales, .. } => scales.as_deref(),
        _ => None,
    };
    let cfg = load_config(&cli.common, scales).map_err(CliError::Config)?;
    let m = dispatch(cli, &cfg).map_err(CliError::Runtime)?;
    for (k, v) in &m.summary {
        log::info!("{k} = {v:.6}");
    }
    Ok(())
}
