//! Command-line interface: `train`, `sample`, `verify`, and `sweep`.
//!
//! Every command is deterministic given its config file and seeds. All
//! artifacts land under the configured output directory. Exit codes: 0 on
//! success, 2 for configuration/usage problems, 1 for everything else
//! (including a failing verification suite).

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::batch::Batch;
use crate::checkpoint::{
    load_checkpoint, save_checkpoint, ArchMeta, CheckpointMeta, ScheduleMeta, TaskMeta,
};
use crate::config::RunConfig;
use crate::bridge::BridgeNudge;
use crate::eval::{
    held_out_pairs, run_nfe_sweep, run_verification_suite, BridgeMutation, SweepModels,
};
use crate::net::Network;
use crate::sample::{
    generate_csgm_captured, generate_i2sb_captured, integrate_ot_ode_model, Capture, NetEps,
    OdeMethod, Trajectory,
};
use crate::schedule::{subset_for_nfe, Schedule};
use crate::tasks::PairedDataset;
use crate::train::{train, TrainMode};
use crate::util::stream_rng;
use crate::{Error, Result};

/// Noise stream tag for conditioning draws and sampler noise in `sample`.
const SAMPLE_STREAM: u64 = 0x5A4D_0001;

#[derive(Parser)]
#[command(
    name = "diffbridge",
    version,
    about = "Paired-translation diffusion bridge: train, sample, verify, sweep"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train a model from a TOML config; writes checkpoint, metrics CSV,
    /// and the resolved config into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override train.mode: i2sb, i2sb_ot_ode, or csgm.
        #[arg(long)]
        mode: Option<String>,
        /// Override output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate samples from a checkpoint; writes samples CSV and run
    /// metadata (optionally trajectory snapshots).
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sampler family: i2sb, ot_ode, or csgm. Defaults to the family
        /// the checkpoint was trained for.
        #[arg(long)]
        mode: Option<String>,
        /// Step budget; defaults to the full training grid.
        #[arg(long)]
        nfe: Option<usize>,
        /// Number of samples to generate.
        #[arg(long, default_value_t = 512)]
        count: usize,
        /// Seed for conditioning draws and sampler noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Turn off posterior noise in the recursive sampler.
        #[arg(long)]
        deterministic: bool,
        /// Stepper for mode=ot_ode: euler or rk4.
        #[arg(long, default_value = "rk4")]
        method: String,
        /// Also dump recorded trajectory snapshots as CSV.
        #[arg(long)]
        trajectory: bool,
        /// Output directory.
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Re-derive every closed-form identity the samplers rely on; exit 0
    /// only if all checks pass.
    Verify {
        /// Inject a deliberate single-coefficient perturbation that the
        /// suite must catch: posterior-weight, posterior-var, ddpm-weight,
        /// ddpm-var, product-precision, or ode-rate.
        #[arg(long)]
        mutate: Option<String>,
    },
    /// Train one model pair per seed, then measure generation quality
    /// across step budgets; writes metric and timing CSVs.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Replace sweep.seeds with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override output.dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Entry point for `main`; returns the process exit code.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

/// Testable entry point taking explicit arguments.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::Train { config, seed, mode, out } => cmd_train(&config, seed, mode.as_deref(), out),
        Command::Sample {
            checkpoint,
            mode,
            nfe,
            count,
            seed,
            deterministic,
            method,
            trajectory,
            out,
        } => cmd_sample(
            &checkpoint,
            mode.as_deref(),
            nfe,
            count,
            seed,
            !deterministic,
            &method,
            trajectory,
            &out,
        ),
        Command::Verify { mutate } => cmd_verify(mutate.as_deref()),
        Command::Sweep { config, seed, out } => cmd_sweep(&config, seed, out),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

fn parse_train_mode(s: &str) -> Result<TrainMode> {
    match s {
        "i2sb" => Ok(TrainMode::I2sb),
        "i2sb_ot_ode" => Ok(TrainMode::I2sbOtOde),
        "csgm" => Ok(TrainMode::Csgm),
        other => Err(Error::Config(format!(
            "unknown training mode {other:?}; expected i2sb, i2sb_ot_ode, or csgm"
        ))),
    }
}

fn parse_ode_method(s: &str) -> Result<OdeMethod> {
    match s {
        "euler" => Ok(OdeMethod::Euler),
        "rk4" => Ok(OdeMethod::Rk4),
        other => Err(Error::Config(format!(
            "unknown ODE method {other:?}; expected euler or rk4"
        ))),
    }
}

/// Sampler family requested on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SampleMode {
    I2sb,
    OtOde,
    Csgm,
}

impl SampleMode {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "i2sb" => Ok(SampleMode::I2sb),
            "ot_ode" => Ok(SampleMode::OtOde),
            "csgm" => Ok(SampleMode::Csgm),
            other => Err(Error::Config(format!(
                "unknown sampling mode {other:?}; expected i2sb, ot_ode, or csgm"
            ))),
        }
    }

    fn label(self) -> &'static str {
        match self {
            SampleMode::I2sb => "i2sb",
            SampleMode::OtOde => "ot_ode",
            SampleMode::Csgm => "csgm",
        }
    }

    fn default_for(mode: TrainMode) -> Self {
        match mode {
            TrainMode::I2sb => SampleMode::I2sb,
            TrainMode::I2sbOtOde => SampleMode::OtOde,
            TrainMode::Csgm => SampleMode::Csgm,
        }
    }
}

fn mode_label(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::I2sb => "i2sb",
        TrainMode::I2sbOtOde => "i2sb_ot_ode",
        TrainMode::Csgm => "csgm",
    }
}

fn meta_for(config: &RunConfig, net: &Network, mode: TrainMode, seed: u64) -> CheckpointMeta {
    CheckpointMeta {
        arch: ArchMeta {
            layer_dims: net.layer_dims.clone(),
            time_embed_dim: net.time_embed_dim,
            activation: net.activation,
        },
        schedule: ScheduleMeta {
            n_steps: config.schedule.n_steps,
            beta_profile: config.schedule.beta_profile,
            sigma2_total: config.schedule.sigma2_total,
            spacing: config.schedule.spacing,
        },
        task: TaskMeta {
            kind: config.task.kind,
            params: config.task.params.clone(),
            seed: config.task.seed,
        },
        mode,
        train_steps: config.train.steps,
        seed,
    }
}

fn cmd_train(
    config_path: &Path,
    seed: Option<u64>,
    mode: Option<&str>,
    out: Option<PathBuf>,
) -> Result<i32> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.train.seed = seed;
    }
    if let Some(mode) = mode {
        config.train.mode = parse_train_mode(mode)?;
    }
    if let Some(out) = out {
        config.output.dir = out;
    }
    let out_dir = config.output.dir.clone();
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config_resolved.toml"), config.to_toml_string())?;

    let task = config.build_task()?;
    let schedule = config.build_schedule()?;
    let mode = config.train.mode;
    let seed = config.train.seed;
    let net = config.init_network(mode, task.dim(), seed)?;
    let started = Instant::now();
    let (net, log) = train(&task, &schedule, net, &config.train)?;
    let wall = started.elapsed();
    std::fs::write(out_dir.join("metrics.csv"), log.to_csv())?;
    save_checkpoint(&out_dir.join("checkpoint.bin"), &net, &meta_for(&config, &net, mode, seed))?;

    let final_loss = log.rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} on {} for {} steps in {:.1} s (final loss {final_loss:.6})",
        mode_label(mode),
        task.name(),
        config.train.steps,
        wall.as_secs_f64()
    );
    println!("wrote {}", out_dir.join("checkpoint.bin").display());
    println!("wrote {}", out_dir.join("metrics.csv").display());
    println!("wrote {}", out_dir.join("config_resolved.toml").display());
    Ok(0)
}

/// Everything recorded about one `sample` invocation.
#[derive(Serialize)]
struct SampleRunMeta<'a> {
    mode: &'a str,
    nfe: usize,
    count: usize,
    seed: u64,
    stochastic: bool,
    method: Option<&'a str>,
    wallclock_ms: u128,
    /// First retained grid time. The deterministic flow integrates down to
    /// this time rather than 0, where its velocity is undefined; the final
    /// state is reported there.
    ode_start_time: Option<f64>,
    task: &'a str,
    checkpoint: String,
}

fn samples_csv(batch: &Batch) -> String {
    let mut out = String::from("sample_index");
    for j in 0..batch.dim() {
        out.push_str(&format!(",c{j}"));
    }
    out.push('\n');
    for (i, row) in batch.rows().enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push_str(&format!(",{v:.17e}"));
        }
        out.push('\n');
    }
    out
}

fn trajectory_csv(traj: &Trajectory, dim: usize) -> String {
    let mut out = String::from("time,sample_index");
    for j in 0..dim {
        out.push_str(&format!(",c{j}"));
    }
    out.push('\n');
    for (t, state) in traj.times.iter().zip(&traj.states) {
        for (i, row) in state.rows().enumerate() {
            out.push_str(&format!("{t:.17e},{i}"));
            for v in row {
                out.push_str(&format!(",{v:.17e}"));
            }
            out.push('\n');
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    checkpoint: &Path,
    mode: Option<&str>,
    nfe: Option<usize>,
    count: usize,
    seed: u64,
    stochastic: bool,
    method: &str,
    trajectory: bool,
    out: &Path,
) -> Result<i32> {
    let (net, meta) = load_checkpoint(checkpoint)?;
    let task = meta.build_task()?;
    let base = meta.build_schedule()?;
    let nfe = nfe.unwrap_or(base.n_steps);
    let sub = subset_for_nfe(&base, nfe)?;
    let requested = match mode {
        Some(s) => SampleMode::parse(s)?,
        None => SampleMode::default_for(meta.mode),
    };
    match requested {
        SampleMode::I2sb | SampleMode::OtOde => {
            if meta.mode == TrainMode::Csgm {
                return Err(Error::Format(format!(
                    "checkpoint holds a conditional-baseline network ({} -> {}); it cannot drive the {} sampler",
                    net.data_dim(),
                    net.out_dim(),
                    requested.label()
                )));
            }
        }
        SampleMode::Csgm => {
            if meta.mode != TrainMode::Csgm {
                return Err(Error::Format(format!(
                    "checkpoint was trained as {}; csgm sampling needs a csgm checkpoint",
                    mode_label(meta.mode)
                )));
            }
        }
    }
    let ode_method = parse_ode_method(method)?;

    // Conditioning comes from held-out corrupted draws of the training task.
    let (_, cond) = held_out_pairs(&task, seed, count);
    let mut rng = stream_rng(seed, SAMPLE_STREAM);
    let capture = Capture::default();
    let started = Instant::now();
    let (generated, traj) = match requested {
        SampleMode::I2sb => generate_i2sb_captured(&net, &cond, &sub, stochastic, &mut rng, capture)?,
        SampleMode::OtOde => {
            integrate_ot_ode_model(&NetEps { net: &net }, &cond, &sub, ode_method, capture)?
        }
        SampleMode::Csgm => generate_csgm_captured(&net, &cond, &sub, &mut rng, capture)?,
    };
    let wallclock_ms = started.elapsed().as_millis();

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("samples.csv"), samples_csv(&generated))?;
    if trajectory {
        std::fs::write(out.join("trajectory.csv"), trajectory_csv(&traj, generated.dim()))?;
    }
    let run_meta = SampleRunMeta {
        mode: requested.label(),
        nfe,
        count,
        seed,
        stochastic: match requested {
            SampleMode::I2sb => stochastic,
            SampleMode::OtOde => false,
            SampleMode::Csgm => true,
        },
        method: (requested == SampleMode::OtOde).then_some(method),
        wallclock_ms,
        ode_start_time: (requested == SampleMode::OtOde).then(|| sub.times[1.min(sub.n_steps)]),
        task: task.name(),
        checkpoint: checkpoint.display().to_string(),
    };
    std::fs::write(
        out.join("meta.json"),
        serde_json::to_string_pretty(&run_meta).map_err(|e| Error::Format(e.to_string()))?,
    )?;
    println!(
        "generated {count} samples as {} at {nfe} steps in {wallclock_ms} ms",
        requested.label()
    );
    println!("wrote {}", out.join("samples.csv").display());
    if trajectory {
        println!("wrote {}", out.join("trajectory.csv").display());
    }
    println!("wrote {}", out.join("meta.json").display());
    Ok(0)
}

fn cmd_verify(mutate: Option<&str>) -> Result<i32> {
    let nudge = match mutate {
        None => BridgeNudge::identity(),
        Some(s) => BridgeMutation::parse(s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mutation {s:?}; expected one of {}",
                    BridgeMutation::ALL.map(|m| m.name()).join(", ")
                ))
            })?
            .nudge(),
    };
    if let Some(s) = mutate {
        println!("injected mutation: {s}");
    }
    let report = run_verification_suite(&nudge);
    print!("{}", report.render());
    Ok(if report.all_passed() { 0 } else { 1 })
}

/// Trains the per-seed model pairs for a sweep, at most
/// `sweep.parallelism` seeds at a time. Results are ordered by seed
/// position regardless of scheduling.
fn train_sweep_models(
    config: &RunConfig,
    task: &PairedDataset,
    schedule: &Schedule,
) -> Result<Vec<SweepModels>> {
    let train_pair = |seed: u64| -> Result<SweepModels> {
        let mut cfg = config.train.clone();
        cfg.seed = seed;
        cfg.mode = TrainMode::I2sb;
        let (i2sb, _) =
            train(task, schedule, config.init_network(TrainMode::I2sb, task.dim(), seed)?, &cfg)?;
        cfg.mode = TrainMode::Csgm;
        let (csgm, _) =
            train(task, schedule, config.init_network(TrainMode::Csgm, task.dim(), seed)?, &cfg)?;
        Ok(SweepModels { seed, i2sb, csgm })
    };
    let mut models = Vec::with_capacity(config.sweep.seeds.len());
    for group in config.sweep.seeds.chunks(config.sweep.parallelism.max(1)) {
        let results: Vec<Result<SweepModels>> = std::thread::scope(|scope| {
            let handles: Vec<_> =
                group.iter().map(|&seed| scope.spawn(move || train_pair(seed))).collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        });
        for r in results {
            models.push(r?);
        }
    }
    Ok(models)
}

fn cmd_sweep(config_path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<i32> {
    let mut config = RunConfig::load(config_path)?;
    if let Some(seed) = seed {
        config.sweep.seeds = vec![seed];
    }
    if let Some(out) = out {
        config.output.dir = out;
    }
    config.validate_budgets(&config.sweep.nfe_list)?;
    let out_dir = config.output.dir.clone();
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config_resolved.toml"), config.to_toml_string())?;

    let task = config.build_task()?;
    let schedule = config.build_schedule()?;
    let started = Instant::now();
    let models = train_sweep_models(&config, &task, &schedule)?;
    for m in &models {
        let path = out_dir.join(format!("checkpoint_i2sb_seed{}.bin", m.seed));
        save_checkpoint(&path, &m.i2sb, &meta_for(&config, &m.i2sb, TrainMode::I2sb, m.seed))?;
        let path = out_dir.join(format!("checkpoint_csgm_seed{}.bin", m.seed));
        save_checkpoint(&path, &m.csgm, &meta_for(&config, &m.csgm, TrainMode::Csgm, m.seed))?;
    }
    println!(
        "trained {} model pairs in {:.1} s",
        models.len(),
        started.elapsed().as_secs_f64()
    );

    let report =
        run_nfe_sweep(&task, &schedule, &models, &config.sweep.nfe_list, config.sweep.eval_count)?;
    std::fs::write(out_dir.join("sweep.csv"), report.to_csv())?;
    std::fs::write(out_dir.join("sweep_timing.csv"), report.timing_csv())?;

    println!("task {} | seeds {:?} | mean metric by budget:", report.task, report.seeds);
    print!("{}", report.summary_table());
    let lo = *config.sweep.nfe_list.iter().min().unwrap();
    let hi = *config.sweep.nfe_list.iter().max().unwrap();
    if lo != hi {
        for mode in [TrainMode::I2sb, TrainMode::Csgm] {
            if let Some(r) = report.degradation_ratio(mode, lo, hi) {
                println!("{}: metric({lo}) / metric({hi}) = {r:.3}", mode_label(mode));
            }
        }
    }
    println!("wrote {}", out_dir.join("sweep.csv").display());
    println!("wrote {}", out_dir.join("sweep_timing.csv").display());
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_strings_round_trip() {
        for mode in [TrainMode::I2sb, TrainMode::I2sbOtOde, TrainMode::Csgm] {
            assert_eq!(parse_train_mode(mode_label(mode)).unwrap(), mode);
        }
        assert!(matches!(parse_train_mode("ddim"), Err(Error::Config(_))));
        for s in ["i2sb", "ot_ode", "csgm"] {
            assert_eq!(SampleMode::parse(s).unwrap().label(), s);
        }
        assert!(SampleMode::parse("flow").is_err());
        assert!(matches!(parse_ode_method("rk4"), Ok(OdeMethod::Rk4)));
        assert!(parse_ode_method("rk5").is_err());
    }

    #[test]
    fn csv_renderers_emit_headers_even_when_empty() {
        let empty = Batch::new(3);
        assert_eq!(samples_csv(&empty), "sample_index,c0,c1,c2\n");
        let traj = Trajectory { times: vec![], states: vec![] };
        assert_eq!(trajectory_csv(&traj, 2), "time,sample_index,c0,c1\n");
    }

    #[test]
    fn end_to_end_train_then_sample_in_a_tempdir() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let config_path = dir.path().join("run.toml");
        std::fs::write(
            &config_path,
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
                "#,
                out.display()
            ),
        )
        .unwrap();
        let code = run_from([
            "diffbridge",
            "train",
            "--config",
            config_path.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        assert!(out.join("checkpoint.bin").exists());
        assert!(out.join("metrics.csv").exists());
        assert!(out.join("config_resolved.toml").exists());

        let sample_out = dir.path().join("gen");
        let code = run_from([
            "diffbridge",
            "sample",
            "--checkpoint",
            out.join("checkpoint.bin").to_str().unwrap(),
            "--nfe",
            "4",
            "--count",
            "8",
            "--trajectory",
            "--out",
            sample_out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let samples = std::fs::read_to_string(sample_out.join("samples.csv")).unwrap();
        assert!(samples.starts_with("sample_index,c0,c1\n"));
        assert_eq!(samples.lines().count(), 9);
        assert!(sample_out.join("trajectory.csv").exists());
        let meta = std::fs::read_to_string(sample_out.join("meta.json")).unwrap();
        assert!(meta.contains("\"mode\": \"i2sb\""));
        assert!(meta.contains("\"nfe\": 4"));
    }

    #[test]
    fn usage_and_config_problems_exit_with_code_two() {
        assert_eq!(run_from(["diffbridge", "train"]), 2);
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "[task]\nkind = \"gauss_shift\"\n").unwrap();
        assert_eq!(
            run_from(["diffbridge", "train", "--config", bad.to_str().unwrap()]),
            2
        );
    }
}
