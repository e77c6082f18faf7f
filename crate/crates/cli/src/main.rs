use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use mghrl_core::harness::{self, apply_seed_override, RunOutcome, TrainOptions};
use mghrl_core::report::Report;
use mghrl_core::RunConfig;

#[derive(Parser)]
#[command(name = "mghrl", version, about = "Hierarchical meta-RL on planar reach, push and slide tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a variant described by a JSON config. `MGHRL_SEED` overrides the seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint.bin` if it exists.
        #[arg(long)]
        resume: bool,
        /// Checkpoint and exit once this many iterations are done.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Meta-test a checkpoint on a task set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Where to write the JSON result; defaults to `eval.json` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate finished run directories into tables and learning curves.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn train(config: PathBuf, out: PathBuf, opts: TrainOptions) -> Result<()> {
    let mut cfg = RunConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
    apply_seed_override(&mut cfg, std::env::var("MGHRL_SEED").ok().as_deref())?;
    cfg.validate()?;
    let s = match harness::train_run(cfg, &out, opts)? {
        RunOutcome::Finished(s) => s,
        RunOutcome::Stopped(it) => {
            println!("stopped after iteration {it}; continue with --resume");
            return Ok(());
        }
    };
    println!(
        "{} on {} seed {}: {} iterations, {} env steps, final meta-test success {:.3}",
        s.variant, s.scenario, s.seed, s.iterations, s.env_steps, s.final_test_success
    );
    Ok(())
}

fn eval(ckpt: PathBuf, tasks: PathBuf, episodes: usize, out: Option<PathBuf>) -> Result<()> {
    let report = harness::eval_checkpoint(&ckpt, &tasks, episodes)?;
    for t in &report.tasks {
        println!("task {:>4}  success {:.3}", t.task_id, t.success);
    }
    println!("mean success {:.3}", report.mean_success);
    let out = out.unwrap_or_else(|| ckpt.with_file_name("eval.json"));
    fs::write(&out, serde_json::to_string_pretty(&report)? + "\n").with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn report(dirs: Vec<PathBuf>, out: PathBuf) -> Result<()> {
    let report = Report::build(&dirs)?;
    print!("{}", report.render());
    for p in report.write(&out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            out,
            resume,
            stop_after,
        } => train(config, out, TrainOptions { resume, stop_after }),
        Command::Eval {
            ckpt,
            tasks,
            episodes,
            out,
        } => eval(ckpt, tasks, episodes, out),
        Command::Report { dirs, out } => report(dirs, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
