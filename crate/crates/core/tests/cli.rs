//! Integration tests that exercise the compiled `diffbridge` binary end to
//! end: training runs that write checkpoints, sampling runs that write CSV
//! output, and the error paths surfaced through exit codes and stderr.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffbridge"))
        .args(args)
        .output()
        .expect("binary launches")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes a small 2-D training config into `dir` and returns its path.
fn write_config(dir: &Path, out_dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        format!(
            r#"
            [task]
            kind = "gauss_shift"

            [schedule]
            n_steps = 16

            [network]
            hidden = [24]
            time_embed_dim = 8

            [train]
            steps = 40
            batch_size = 16

            [output]
            dir = "{}"
            {extra}
            "#,
            out_dir.display()
        ),
    )
    .unwrap();
    path
}

#[test]
fn train_writes_identical_checkpoints_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &dir.path().join("a"), "");

    let out = run(&["train", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "train failed: {}", stderr_of(&out));
    let first = std::fs::read(dir.path().join("a/checkpoint.bin")).unwrap();
    assert!(dir.path().join("a/metrics.csv").exists());
    assert!(dir.path().join("a/config_resolved.toml").exists());

    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("b").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "retrain failed: {}", stderr_of(&out));
    let second = std::fs::read(dir.path().join("b/checkpoint.bin")).unwrap();
    assert_eq!(first, second, "same config and seed must give the same checkpoint");
}

#[test]
fn sample_writes_requested_count_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &dir.path().join("run"), "");
    let out = run(&["train", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "train failed: {}", stderr_of(&out));
    let ckpt = dir.path().join("run/checkpoint.bin");

    let gen_a = dir.path().join("gen_a");
    let args = [
        "sample",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--nfe",
        "4",
        "--count",
        "6",
        "--seed",
        "7",
        "--out",
        gen_a.to_str().unwrap(),
    ];
    let out = run(&args);
    assert!(out.status.success(), "sample failed: {}", stderr_of(&out));
    let csv = std::fs::read_to_string(gen_a.join("samples.csv")).unwrap();
    assert!(csv.starts_with("sample_index,c0,c1\n"));
    assert_eq!(csv.lines().count(), 7, "header plus one row per sample");
    let meta = std::fs::read_to_string(gen_a.join("meta.json")).unwrap();
    assert!(meta.contains("\"nfe\": 4"));
    assert!(meta.contains("\"seed\": 7"));

    let gen_b = dir.path().join("gen_b");
    let mut args_b = args;
    args_b[args.len() - 1] = gen_b.to_str().unwrap();
    let out = run(&args_b);
    assert!(out.status.success(), "resample failed: {}", stderr_of(&out));
    assert_eq!(
        csv,
        std::fs::read_to_string(gen_b.join("samples.csv")).unwrap(),
        "same checkpoint and seed must reproduce the samples"
    );
}

#[test]
fn sample_count_zero_writes_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &dir.path().join("run"), "");
    let out = run(&["train", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "train failed: {}", stderr_of(&out));

    let gen = dir.path().join("gen");
    let out = run(&[
        "sample",
        "--checkpoint",
        dir.path().join("run/checkpoint.bin").to_str().unwrap(),
        "--nfe",
        "2",
        "--count",
        "0",
        "--out",
        gen.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "sample failed: {}", stderr_of(&out));
    assert_eq!(
        std::fs::read_to_string(gen.join("samples.csv")).unwrap(),
        "sample_index,c0,c1\n"
    );
}

#[test]
fn incomplete_config_exits_two_and_names_the_missing_section() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(
        &path,
        "[task]\nkind = \"gauss_shift\"\n\n[schedule]\nn_steps = 16\n\n[output]\ndir = \"x\"\n",
    )
    .unwrap();
    let out = run(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("network"),
        "stderr should name the missing section: {}",
        stderr_of(&out)
    );
}

#[test]
fn unknown_mutation_name_exits_two_and_lists_the_choices() {
    let out = run(&["verify", "--mutate", "bogus-knob"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.contains("bogus-knob"), "stderr: {err}");
    assert!(err.contains("posterior-weight"), "stderr should list valid names: {err}");
}

#[test]
fn baseline_checkpoint_cannot_drive_the_bridge_sampler() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &dir.path().join("run"), "");
    let out = run(&["train", "--config", config.to_str().unwrap(), "--mode", "csgm"]);
    assert!(out.status.success(), "train failed: {}", stderr_of(&out));

    let out = run(&[
        "sample",
        "--checkpoint",
        dir.path().join("run/checkpoint.bin").to_str().unwrap(),
        "--mode",
        "i2sb",
        "--nfe",
        "2",
        "--count",
        "4",
        "--out",
        dir.path().join("gen").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr_of(&out).contains("cannot drive the i2sb sampler"),
        "stderr: {}",
        stderr_of(&out)
    );
}

#[test]
fn sweep_writes_reproducible_csv_reports() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "\n[sweep]\nnfe_list = [4, 16]\neval_count = 32\n";
    let config = write_config(dir.path(), &dir.path().join("s1"), extra);

    let out = run(&["sweep", "--config", config.to_str().unwrap(), "--seed", "1"]);
    assert!(out.status.success(), "sweep failed: {}", stderr_of(&out));
    let csv = std::fs::read_to_string(dir.path().join("s1/sweep.csv")).unwrap();
    assert!(csv.starts_with("task,mode,nfe,seed,metric\n"));
    // 2 modes x 2 budgets x 1 seed.
    assert_eq!(csv.lines().count(), 5);
    let timing = std::fs::read_to_string(dir.path().join("s1/sweep_timing.csv")).unwrap();
    assert!(timing.starts_with("task,mode,nfe,seed,wallclock_ms\n"));
    assert!(dir.path().join("s1/checkpoint_i2sb_seed1.bin").exists());
    assert!(dir.path().join("s1/checkpoint_csgm_seed1.bin").exists());

    let out = run(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "1",
        "--out",
        dir.path().join("s2").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "rerun failed: {}", stderr_of(&out));
    assert_eq!(
        csv,
        std::fs::read_to_string(dir.path().join("s2/sweep.csv")).unwrap(),
        "sweep metrics must be reproducible"
    );
}
