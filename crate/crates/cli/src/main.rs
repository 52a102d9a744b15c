use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rethead_cli::{
    compare, resolve_run_dir, CliResult, Objective, Options, Pipeline, RunConfig, Sampler,
};

#[derive(Parser)]
#[command(
    name = "rethead",
    version,
    about = "Retrieval-head detection, ablation and preference training"
)]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory. Defaults to the config's output_dir under $RETHEAD_OUTPUT_ROOT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    rejected_sampler: Option<Sampler>,
    #[arg(long, global = true, value_enum)]
    objective: Option<Objective>,
    /// Overwrite stage outputs produced from different inputs.
    #[arg(long, global = true)]
    force: bool,
    /// Record wall-clock time (artifacts are then no longer byte-reproducible).
    #[arg(long, global = true)]
    record_timing: bool,
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    Pretrain,
    Detect,
    Ablate,
    Synth,
    Dpo,
    Sft,
    Eval,
    Report,
    /// Every stage from pretraining to the report.
    RunAll,
    /// Compare finished runs; prints CSV.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.rejected_sampler {
        cfg.synth.rejected_sampler = s;
    }
    match cli.command {
        Command::Sft => cfg.objective = Objective::Sft,
        Command::Dpo => cfg.objective = Objective::Dpo,
        _ => {}
    }
    if let Some(o) = cli.objective {
        cfg.objective = o;
    }
    let opts = Options {
        force: cli.force,
        record_timing: cli.record_timing,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::DefaultConfig => {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
        Command::Compare { runs, output } => {
            let table = compare(&runs)?;
            match output {
                Some(p) => std::fs::write(p, table)?,
                None => print!("{table}"),
            }
            return Ok(());
        }
        _ => {}
    }
    let root = resolve_run_dir(cli.out.clone(), &cfg);
    let p = Pipeline::new(cfg, root, opts);
    match cli.command {
        Command::Pretrain => p.pretrain(),
        Command::Detect => p.detect(),
        Command::Ablate => p.ablate(),
        Command::Synth => p.synth(),
        Command::Dpo => p.dpo(),
        Command::Sft => p.sft(),
        Command::Eval => p.eval(),
        Command::Report => p.report(),
        Command::RunAll => p.run_all(),
        Command::Compare { .. } | Command::DefaultConfig => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
