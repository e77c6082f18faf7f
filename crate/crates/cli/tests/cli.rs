//! Drives the `mghrl` binary end to end on tiny configurations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "variant": "mghrl",
  "seed": 3,
  "family_mix": {"reach": 1.0},
  "num_train_tasks": 2,
  "num_test_tasks": 2,
  "agent": {"hidden": [16], "batch_size": 16},
  "latent": {"encoder_hidden": [16], "context_size": 8},
  "train": {"steps_per_round": 2, "total_env_steps": 1000, "eval_every": 2, "eval_episodes": 2, "checkpoint_every": 1}
}"#;

fn mghrl(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mghrl"));
    cmd.args(args).env_remove("MGHRL_SEED").env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn train(config: &Path, out: &Path) -> Output {
    mghrl(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()], &[])
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_a_monotone_metrics_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", TINY);
    let out = tmp.path().join("run");
    let o = train(&cfg, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.json", "metrics.csv", "summary.json", "checkpoint.bin", "train_tasks.json", "test_tasks.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let steps: Vec<u64> = metrics.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(steps.len(), 10);
    assert!(steps.windows(2).all(|w| w[0] < w[1]), "{steps:?}");
    assert_eq!(*steps.last().unwrap(), 1000);
}

#[test]
fn same_seed_gives_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", TINY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(train(&cfg, &a).status.success());
    assert!(train(&cfg, &b).status.success());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn zero_subgoal_horizon_is_rejected_before_any_output() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = TINY.replacen("\"seed\": 3,", "\"seed\": 3, \"hierarchy\": {\"k\": 0},", 1);
    let cfg = write_config(tmp.path(), "bad.json", &bad);
    let out = tmp.path().join("run");
    let o = train(&cfg, &out);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("hierarchy.k"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn seed_comes_from_the_environment_when_set() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", TINY);
    let out = tmp.path().join("run");
    let o = mghrl(
        &["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[("MGHRL_SEED", "99")],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 99);

    let o = mghrl(
        &["train", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap()],
        &[("MGHRL_SEED", "not-a-number")],
    );
    assert!(!o.status.success());
}

#[test]
fn stop_and_resume_reproduce_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", TINY);
    let (full, split) = (tmp.path().join("full"), tmp.path().join("split"));
    assert!(train(&cfg, &full).status.success());
    let args = ["train", "--config", cfg.to_str().unwrap(), "--out", split.to_str().unwrap()];
    let o = mghrl(&[&args[..], &["--stop-after", "4"]].concat(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!split.join("summary.json").exists());
    let o = mghrl(&[&args[..], &["--resume"]].concat(), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.csv", "summary.json", "checkpoint.bin"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(split.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_is_repeatable_and_validates_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", TINY);
    let run = tmp.path().join("run");
    assert!(train(&cfg, &run).status.success());
    let ckpt = run.join("checkpoint.bin");
    let tasks = run.join("test_tasks.json");
    let eval = |tasks: &Path, out: &Path| {
        mghrl(
            &[
                "eval",
                "--ckpt",
                ckpt.to_str().unwrap(),
                "--tasks",
                tasks.to_str().unwrap(),
                "--episodes",
                "3",
                "--out",
                out.to_str().unwrap(),
            ],
            &[],
        )
    };
    let (e1, e2) = (tmp.path().join("e1.json"), tmp.path().join("e2.json"));
    let o = eval(&tasks, &e1);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mean success"));
    assert!(eval(&tasks, &e2).status.success());
    assert_eq!(fs::read(&e1).unwrap(), fs::read(&e2).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&e1).unwrap()).unwrap();
    assert_eq!(report["tasks"].as_array().unwrap().len(), 2);

    let empty = write_config(tmp.path(), "empty.json", r#"{"tasks": []}"#);
    let o = eval(&empty, &tmp.path().join("e3.json"));
    assert!(!o.status.success());
    assert!(stderr(&o).contains("empty"), "{}", stderr(&o));

    // bump the schema word that follows the 8-byte magic
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[8] = bytes[8].wrapping_add(1);
    let bad = tmp.path().join("bad.bin");
    fs::write(&bad, bytes).unwrap();
    let o = mghrl(
        &["eval", "--ckpt", bad.to_str().unwrap(), "--tasks", tasks.to_str().unwrap(), "--out", tmp.path().join("e4.json").to_str().unwrap()],
        &[],
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("schema"), "{}", stderr(&o));
}

#[test]
fn report_aggregates_seeds_and_refuses_mixed_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.json", TINY);
    let mut dirs = Vec::new();
    for seed in ["1", "2", "3"] {
        let out = tmp.path().join(format!("seed{seed}"));
        let o = mghrl(
            &["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()],
            &[("MGHRL_SEED", seed)],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        dirs.push(out);
    }
    let report_dir = tmp.path().join("report");
    let mut args: Vec<String> = vec!["report".into()];
    args.extend(dirs.iter().map(|d| d.to_str().unwrap().to_string()));
    args.extend(["--out".into(), report_dir.to_str().unwrap().to_string()]);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = mghrl(&argv, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(report_dir.join("success_table.csv")).unwrap();
    assert!(table.starts_with("scenario,mghrl\nreach,"), "{table}");
    let curve = fs::read_to_string(report_dir.join("curves").join("reach__mghrl.csv")).unwrap();
    assert!(curve.starts_with("env_steps,mean,std\n"));
    assert!(String::from_utf8_lossy(&o.stdout).contains("(3)"));

    // same variant and scenario, different batch size
    let other = write_config(tmp.path(), "other.json", &TINY.replace("\"batch_size\": 16", "\"batch_size\": 8"));
    let odd = tmp.path().join("odd");
    assert!(train(&other, &odd).status.success());
    let mut argv = vec!["report", dirs[0].to_str().unwrap(), odd.to_str().unwrap()];
    let out = tmp.path().join("report2");
    argv.extend(["--out", out.to_str().unwrap()]);
    let o = mghrl(&argv, &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("differ beyond the seed"), "{}", stderr(&o));
}
