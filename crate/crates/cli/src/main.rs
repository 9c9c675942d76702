use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rkf_cli::commands::{cmd_ablation, cmd_bench, cmd_distill, cmd_eval, cmd_gen_data, cmd_reparam, cmd_train_base, EvalMode};
use rkf_cli::{CliError, RunConfig};

/// Rotation-robust local features: RKF convolutions, MOFA teacher, distillation.
#[derive(Debug, Parser)]
#[command(name = "rkf", version)]
struct Cli {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override one config value, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Run seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Test mode: single-threaded, seeded runs (already the only mode of this build).
    #[arg(long, global = true)]
    deterministic: bool,

    /// Do not echo the effective configuration.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic training images and both evaluation sets under `data.dir`.
    GenData,
    /// Train a model of `model.variant` with the ranking loss.
    TrainBase {
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration loss CSV.
        #[arg(long)]
        report: Option<PathBuf>,
        /// base or rkf; overrides `model.variant`.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Distil a student under the MOFA teacher built from a trained checkpoint.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        /// Start the student from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// base (DBase) or rkf (DRKF); overrides `distill.student`.
        #[arg(long)]
        student: Option<String>,
    },
    /// Collapse the rotated branches of an RKF checkpoint into plain kernels.
    Reparam {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean matching accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// upright, rotated or sweep.
        #[arg(long)]
        mode: EvalMode,
        /// Evaluate the MOFA ensemble over the checkpoint instead.
        #[arg(long)]
        mofa: bool,
        /// Run RKF layers branch by branch (the un-fused model).
        #[arg(long)]
        branched: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate base, RKF, MOFA, DBase and DRKF; writes everything to a directory.
    Ablation {
        #[arg(long)]
        out: PathBuf,
    },
    /// Median inference time of base, branched RKF, fused RKF and MOFA.
    Bench {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        rkf: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    match &cli.command {
        Command::TrainBase { variant: Some(v), .. } => overrides.push(format!("model.variant=\"{v}\"")),
        Command::Distill { student: Some(s), .. } => overrides.push(format!("distill.student=\"{s}\"")),
        _ => {}
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if !cli.quiet {
        println!("# effective config (deterministic = {})\n{}", cli.deterministic, cfg.echo());
    }
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg),
        Command::TrainBase { out, report, .. } => cmd_train_base(&cfg, &out, report.as_deref()).map(|_| ()),
        Command::Distill {
            teacher,
            init,
            out,
            report,
            ..
        } => cmd_distill(&cfg, &teacher, init.as_deref(), &out, report.as_deref()).map(|_| ()),
        Command::Reparam { input, out } => cmd_reparam(&input, &out).map(|_| ()),
        Command::Eval {
            checkpoint,
            mode,
            mofa,
            branched,
            out,
        } => cmd_eval(&cfg, &checkpoint, mode, mofa, branched, &out).map(|_| ()),
        Command::Ablation { out } => cmd_ablation(&cfg, &out).map(|_| ()),
        Command::Bench { base, rkf, out } => cmd_bench(&cfg, &base, &rkf, &out).map(|_| ()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rkf: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
