//! Run directories: training with periodic checkpoints and resumable
//! metrics, checkpoint evaluation, and the run summary.
//!
//! A run directory holds `config.json`, `train_tasks.json`, `test_tasks.json`,
//! `metrics.csv`, `checkpoint.bin` and, once training finishes,
//! `summary.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{RunConfig, Variant, SCHEMA_VERSION};
use crate::env::TaskSet;
use crate::error::{Error, Result};
use crate::meta_train::{evaluate_tasks, mean, IterationRecord, Trainer, METRICS_HEADER};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_TASKS_FILE: &str = "train_tasks.json";
pub const TEST_TASKS_FILE: &str = "test_tasks.json";

/// Final record of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub schema_version: u32,
    pub variant: Variant,
    pub scenario: String,
    pub seed: u64,
    pub config_hash: String,
    pub group_hash: String,
    pub iterations: u64,
    pub env_steps: u64,
    pub final_train_success: f64,
    pub final_test_success: f64,
    pub per_task_test_success: Vec<f64>,
}

impl RunSummary {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_FILE))?)?)
    }
}

/// Applies the `MGHRL_SEED` override when the variable is set.
pub fn apply_seed_override(cfg: &mut RunConfig, value: Option<&str>) -> Result<()> {
    if let Some(v) = value {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::config("seed", format!("MGHRL_SEED={v:?} is not an unsigned integer")))?;
    }
    Ok(())
}

fn metrics_line(rec: &IterationRecord, hash: &str) -> String {
    format!("{},{hash}\n", rec.csv_row())
}

fn metrics_header() -> String {
    format!("{METRICS_HEADER},config_hash\n")
}

/// Keeps the header and the rows up to and including `iteration`.
fn truncate_metrics(path: &Path, iteration: u64) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = metrics_header();
    for line in text.lines().skip(1) {
        let it: u64 = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::invalid(format!("malformed metrics row: {line}")))?;
        if it <= iteration {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// `train_success` of the last logged row, 0 when there is none.
fn last_train_success(path: &Path) -> f64 {
    fs::read_to_string(path)
        .ok()
        .and_then(|t| t.lines().skip(1).last().and_then(|l| l.split(',').nth(2)?.parse().ok()))
        .unwrap_or(0.0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Continue from `out/checkpoint.bin` when it exists; the stored config
    /// must hash the same.
    pub resume: bool,
    /// Save a checkpoint and stop once this many iterations are done.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Finished(RunSummary),
    /// Stopped early at the given iteration; `checkpoint.bin` holds the state.
    Stopped(u64),
}

/// Trains under `cfg` into `out`.
pub fn train_run(cfg: RunConfig, out: &Path, opts: TrainOptions) -> Result<RunOutcome> {
    let resume = opts.resume;
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let hash = cfg.hash();
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);

    let mut trainer = if resume && ckpt_path.exists() {
        let t = checkpoint::load(&ckpt_path)?;
        if t.cfg.hash() != hash {
            return Err(Error::Checkpoint(format!(
                "{} was written under a different config (hash {}, expected {hash})",
                ckpt_path.display(),
                t.cfg.hash()
            )));
        }
        truncate_metrics(&metrics_path, t.iteration)?;
        info!("resuming at iteration {}", t.iteration);
        t
    } else {
        let t = Trainer::new(cfg.clone())?;
        fs::write(&metrics_path, metrics_header())?;
        t
    };
    fs::write(out.join(CONFIG_FILE), cfg.to_json() + "\n")?;
    write_json(&out.join(TRAIN_TASKS_FILE), &TaskSet { tasks: trainer.train_tasks.clone() })?;
    write_json(&out.join(TEST_TASKS_FILE), &TaskSet { tasks: trainer.test_tasks.clone() })?;

    let mut metrics = fs::OpenOptions::new().append(true).open(&metrics_path)?;
    let every = cfg.train.checkpoint_every;
    let total = trainer.total_iterations();
    let mut last_train = last_train_success(&metrics_path);
    while !trainer.finished() {
        if opts.stop_after.is_some_and(|n| trainer.iteration >= n) {
            checkpoint::save(&trainer, &ckpt_path)?;
            return Ok(RunOutcome::Stopped(trainer.iteration));
        }
        let rec = trainer.step_iteration()?;
        metrics.write_all(metrics_line(&rec, &hash).as_bytes())?;
        metrics.flush()?;
        last_train = rec.train_success;
        info!(
            "iteration {}/{} env_steps {} train {:.3}{}",
            rec.iteration,
            total,
            rec.env_steps,
            rec.train_success,
            rec.test_success.map(|s| format!(" test {s:.3}")).unwrap_or_default()
        );
        if every > 0 && rec.iteration % every == 0 {
            checkpoint::save(&trainer, &ckpt_path)?;
        }
    }
    checkpoint::save(&trainer, &ckpt_path)?;

    let per_task = trainer.last_test_success.clone().unwrap_or_default();
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        variant: cfg.variant,
        scenario: cfg.scenario(),
        seed: cfg.seed,
        config_hash: hash,
        group_hash: cfg.group_hash(),
        iterations: trainer.iteration,
        env_steps: trainer.env_steps,
        final_train_success: last_train,
        final_test_success: mean(&per_task),
        per_task_test_success: per_task,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(RunOutcome::Finished(summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task_id: u32,
    pub success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub config_hash: String,
    pub episodes: usize,
    pub tasks: Vec<TaskResult>,
    pub mean_success: f64,
}

/// Meta-test adaptation of a checkpoint on every task of a task-set file.
pub fn eval_checkpoint(ckpt: &Path, tasks_path: &Path, episodes: usize) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::invalid("episodes must be >= 1"));
    }
    let trainer = checkpoint::load(ckpt)?;
    let set = TaskSet::load(tasks_path)?;
    if set.tasks.is_empty() {
        return Err(Error::invalid(format!("{} holds no tasks", tasks_path.display())));
    }
    let per_task = evaluate_tasks(&trainer.env, &set.tasks, &trainer.learner, &trainer.cfg, episodes)?;
    Ok(EvalReport {
        checkpoint: ckpt.to_path_buf(),
        config_hash: trainer.cfg.hash(),
        episodes,
        mean_success: mean(&per_task),
        tasks: set
            .tasks
            .iter()
            .zip(per_task)
            .map(|(t, success)| TaskResult {
                task_id: t.task_id,
                success,
            })
            .collect(),
    })
}
