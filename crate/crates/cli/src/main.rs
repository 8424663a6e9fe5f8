//! `enzymeflow` command-line driver.

mod commands;
mod manifest;
mod sample_file;

use clap::{Args, Parser, Subcommand};
use commands::Failure;
use enzymeflow::config::{RunConfig, Stage};
use enzymeflow::io_util::{file_digest, read_to_string};
use enzymeflow::Error;
use manifest::{write_manifest, Run, RunManifest};
use std::path::PathBuf;
use std::process::ExitCode;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;
pub const EXIT_MISMATCH: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "enzymeflow", version, about = "Catalytic pocket generation with joint SE(3) and discrete flows")]
struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Prints the resolved configuration and exits.
    #[arg(long, global = true)]
    print_config: bool,
    /// Manifest path; defaults to a location beside the command's output.
    #[arg(long, global = true, value_name = "FILE")]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Residues with a CA near the ligand, as a pocket file.
    ExtractPocket(ExtractArgs),
    /// Extract, filter, cluster and debias a raw list into a dataset.
    Curate(CurateArgs),
    /// Write a procedural dataset in the raw input formats.
    SynthData(SynthArgs),
    /// Train one stage of the curriculum.
    Train(TrainArgs),
    /// Generate pockets from a checkpoint.
    Sample(SampleArgs),
    /// Score sample files against a curated dataset.
    Evaluate(EvaluateArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Re-run a command from its manifest and compare output digests.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub structure: PathBuf,
    /// Molecule file whose atoms define the pocket center.
    #[arg(long)]
    pub ligand: PathBuf,
    /// Å.
    #[arg(long, default_value_t = enzymeflow::data::POCKET_RADIUS_ANGSTROM)]
    pub radius: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CurateArgs {
    #[arg(long)]
    pub list: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Sequences at or above this identity share a cluster.
    #[arg(long, default_value_t = 0.6)]
    pub homology: f64,
    #[arg(long, default_value_t = enzymeflow::data::MIN_POCKET_RESIDUES)]
    pub min_residues: usize,
    #[arg(long, default_value_t = enzymeflow::data::POCKET_RADIUS_ANGSTROM)]
    pub radius: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub records: usize,
    #[arg(long, default_value_t = 32)]
    pub pocket_residues: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Overrides `train.stage`.
    #[arg(long)]
    pub stage: Option<Stage>,
    /// Curated dataset manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to start from (an earlier stage).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss table; defaults to `<out>.log.tsv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Condition on every record of a curated dataset.
    #[arg(long, conflicts_with_all = ["substrate", "product", "n_res"])]
    pub data: Option<PathBuf>,
    /// Restrict `--data` to one record id.
    #[arg(long, requires = "data")]
    pub record: Option<String>,
    #[arg(long, requires_all = ["product", "n_res"])]
    pub substrate: Option<PathBuf>,
    #[arg(long, requires = "substrate")]
    pub product: Option<PathBuf>,
    #[arg(long, requires = "substrate")]
    pub n_res: Option<usize>,
    /// Integration steps; overrides `sample.steps`.
    #[arg(long = "T", value_name = "STEPS")]
    pub steps: Option<usize>,
    /// Overrides `sample.n_samples`.
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// Overrides `sample.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by `sample --data`.
    #[arg(long)]
    pub samples: PathBuf,
    /// Group size for the top-k aggregate.
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CheckStage {
    Backbone,
    Ligand,
    Enzyme,
    All,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = CheckStage::All)]
    pub stage: CheckStage,
    /// Check a trained network instead of a fresh one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

fn resolve_config(cli: &Cli) -> enzymeflow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::parse(&read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, found {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one subcommand; `fixed_config` replaces file and `--set` resolution
/// during replay.
fn execute(cli: &Cli, argv: &[String], fixed_config: Option<RunConfig>, write_manifest_file: bool) -> Result<Run, Failure> {
    let cfg = match fixed_config {
        Some(c) => c,
        None => resolve_config(cli)?,
    };
    let command = cli
        .command
        .as_ref()
        .ok_or_else(|| Failure::Core(Error::Config("no subcommand given (see --help)".into())))?;
    let mut run = Run::new(cfg);
    let default_manifest = match command {
        Command::ExtractPocket(a) => commands::extract_pocket(&mut run, a)?,
        Command::Curate(a) => commands::curate(&mut run, a)?,
        Command::SynthData(a) => commands::synth_data(&mut run, a)?,
        Command::Train(a) => commands::train(&mut run, a)?,
        Command::Sample(a) => commands::sample(&mut run, a)?,
        Command::Evaluate(a) => commands::evaluate(&mut run, a)?,
        Command::Gradcheck(a) => commands::gradcheck(&mut run, a)?,
        Command::Replay(_) => unreachable!("replay is dispatched separately"),
    };
    if write_manifest_file {
        let path = cli.manifest.clone().unwrap_or(default_manifest);
        write_manifest(&path, &run.finish(argv))?;
        log::info!("manifest written to {}", path.display());
    }
    Ok(run)
}

fn replay(args: &ReplayArgs) -> Result<(), Failure> {
    let recorded = RunManifest::read(&args.manifest)?;
    std::env::set_current_dir(&recorded.cwd).map_err(|e| Error::Io {
        path: PathBuf::from(&recorded.cwd),
        source: e,
    })?;
    let mut changed = Vec::new();
    for input in &recorded.inputs {
        if file_digest(std::path::Path::new(&input.path))? != input.sha256 {
            changed.push(input.path.clone());
        }
    }
    if !changed.is_empty() {
        return Err(Failure::Mismatch(format!("inputs changed since the run: {}", changed.join(", "))));
    }
    let argv: Vec<String> = std::iter::once("enzymeflow".to_string())
        .chain(recorded.command.iter().cloned())
        .collect();
    let cli = Cli::try_parse_from(&argv).map_err(|e| Error::Config(format!("manifest command does not parse: {e}")))?;
    if matches!(cli.command, Some(Command::Replay(_))) {
        return Err(Failure::Core(Error::Config("a replay manifest cannot be replayed".into())));
    }
    let cfg = RunConfig::parse(&recorded.config)?;
    if cfg.hash() != recorded.config_hash {
        return Err(Failure::Mismatch("recorded configuration does not match its hash".into()));
    }
    let run = execute(&cli, &recorded.command, Some(cfg), false)?;
    let fresh = run.outputs();
    if fresh != recorded.outputs {
        let differing: Vec<String> = recorded
            .outputs
            .iter()
            .filter(|o| !fresh.contains(o))
            .map(|o| o.path.clone())
            .chain(fresh.iter().filter(|o| !recorded.outputs.contains(o)).map(|o| o.path.clone()))
            .collect();
        return Err(Failure::Mismatch(format!("outputs differ: {}", differing.join(", "))));
    }
    println!("replay: {} outputs identical", fresh.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let outcome = if cli.print_config {
        resolve_config(&cli).map(|cfg| print!("{}", cfg.to_text())).map_err(Failure::from)
    } else if let Some(Command::Replay(args)) = &cli.command {
        replay(args)
    } else {
        execute(&cli, &argv[1..], None, true).map(|_| ())
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
