use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rdiff_cli::config::RunConfig;
use rdiff_cli::error::CliResult;
use rdiff_cli::manifest::RunLog;
use rdiff_cli::stages::{self, CellInputs, SeedPaths};
use rdiff_cli::{figures, validate, PipelineOptions, PipelineOutcome};

#[derive(Parser)]
#[command(name = "rdiff", version, about = "Reward-conditioned diffusion on linear-subspace data")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; falls back to $RDIFF_OUT, then the config's out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run seed for single-stage commands and validation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Every stage for every (a, seed) cell, then the sweep table.
    Pipeline {
        /// Validate the config and write the manifest only.
        #[arg(long)]
        dry_run: bool,
        /// Recompute even if a complete run with this config exists.
        #[arg(long)]
        force: bool,
    },
    /// Curves and histograms from a completed pipeline run.
    Figures,
    /// Oracle and property checks.
    Validate {
        /// Run a single check by name.
        #[arg(long)]
        check: Option<String>,
    },
    /// Generate and evaluate one batch from a trained score.
    Sample {
        /// Target reward value.
        #[arg(long)]
        a: f64,
    },
    /// Pseudo-label the unlabeled set and train the score model.
    TrainScore,
    /// Fit the ridge reward model.
    TrainReward,
    /// Draw the ground truth and both datasets.
    GenData,
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn print_log(log: &RunLog) {
    for a in &log.artifacts {
        println!("wrote {} ({} bytes, sha256 {})", a.path, a.bytes, &a.sha256[..16]);
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let out = cfg.resolve_out(cli.out.as_deref());
    let seed = cli.seed.unwrap_or(cfg.sweep.seeds[0]);
    let paths = SeedPaths::new(&out, seed);
    let mut log = RunLog::default();
    match cli.command {
        Command::Pipeline { dry_run, force } => {
            let outcome = rdiff_cli::cmd_pipeline(&cfg, &out, PipelineOptions { dry_run, force })?;
            let m = outcome.manifest();
            match outcome {
                PipelineOutcome::UpToDate(_) => println!("{} is up to date; pass --force to recompute", out.display()),
                PipelineOutcome::DryRun(_) => println!("config valid; manifest written to {}", out.display()),
                PipelineOutcome::Completed(_) => {
                    println!("{} artifacts written to {}", m.artifacts.len(), out.display())
                }
            }
        }
        Command::Figures => {
            let f = figures::cmd_figures(&out)?;
            for p in &f.files {
                println!("wrote {}", p.display());
            }
        }
        Command::Validate { check } => {
            let outcomes = validate::cmd_validate(Some(&out), check.as_deref(), seed)?;
            print!("{}", validate::render_table(&outcomes));
            validate::summarize(&outcomes)?;
        }
        Command::GenData => {
            stages::gen_data(&cfg, seed, &paths, &mut log)?;
        }
        Command::TrainReward => {
            let data = stages::load_data(&cfg, seed, &paths)?;
            stages::train_reward(&cfg, seed, &data.labeled, &paths, &mut log)?;
        }
        Command::TrainScore => {
            let data = stages::load_data(&cfg, seed, &paths)?;
            let est = stages::load_ridge(seed, &paths)?;
            let (_, report, _) = stages::train_score(&cfg, seed, &data.unlabeled, &est, &paths, &mut log)?;
            println!(
                "validation loss {:.4} -> {:.4} over {} steps",
                report.initial_validation_loss, report.final_validation_loss, report.steps
            );
        }
        Command::Sample { a } => {
            let data = stages::load_data(&cfg, seed, &paths)?;
            let est = stages::load_ridge(seed, &paths)?;
            let (model, curated) = stages::load_score(&cfg, seed, &paths)?;
            let inputs = CellInputs { world: &data.world, est: &est, model: &model, curated: &curated };
            let r = stages::sample_cell(&cfg, seed, a, &inputs, &paths, &mut log)?;
            println!(
                "a={} avg_reward={:.4} subopt={:.4} angle={:.4} offsupport={:.4} shift={:.4}",
                r.a, r.avg_reward, r.subopt, r.subspace_angle, r.off_support_mean, r.distro_shift
            );
        }
    }
    print_log(&log);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

