//! Simulation-free training: tuples `(x0, x1, t, x_t, target)` are drawn
//! analytically from the closed-form bridge posterior (or the forward
//! marginal), so no trajectory is ever integrated during training.
//!
//! Three modes share one loop. `i2sb` draws `x_t` from the Gaussian
//! posterior given both endpoints and regresses the scaled displacement
//! `(x_t - x0) / sigma_t`. `i2sb_ot_ode` places `x_t` exactly on the
//! posterior mean, the zero-noise limit used for deterministic transport.
//! `csgm` is the conditional baseline: `x_t` diffuses from `x0` alone and
//! the network sees the degraded endpoint only as conditioning input.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::bridge::posterior_params;
use crate::net::{loss_and_grad, Network};
use crate::schedule::{variances_at, Schedule};
use crate::tasks::PairedDataset;
use crate::util::stream_rng;
use crate::{Error, Result};

/// Grid times below this cutoff are never used as training times.
pub const T_CUTOFF: f64 = 1e-4;
/// Floor applied to `sigma_t` in the regression-target denominator.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Which training target and corruption process to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Bridge posterior sampling between both endpoints.
    I2sb,
    /// Bridge posterior mean only (zero-noise limit for the flow ODE).
    I2sbOtOde,
    /// Conditional score model: diffuse from x0, condition on x1.
    Csgm,
}

impl TrainMode {
    /// Width of the vector the network consumes, excluding the embedding.
    pub fn net_input_dim(self, data_dim: usize) -> usize {
        match self {
            TrainMode::I2sb | TrainMode::I2sbOtOde => data_dim,
            TrainMode::Csgm => 2 * data_dim,
        }
    }
}

/// Optimizer and loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Probability of replacing the posterior draw with a forward-marginal
    /// draw (ignoring x1) for a given tuple.
    pub proposal_mix: f64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 128,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            proposal_mix: 0.0,
            mode: TrainMode::I2sb,
        }
    }
}

/// One analytically drawn training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainTuple {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    /// Grid index of the training time; the time itself is
    /// `schedule.times[t_index]`.
    pub t_index: usize,
    pub x_t: Vec<f64>,
    /// Regression target `(x_t - x0) / max(sigma_t, floor)`.
    pub target: Vec<f64>,
}

/// One logged optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wallclock_ms: f64,
}

/// Loss/gradient trace of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    /// Renders the log as CSV with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,grad_norm,wallclock_ms\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.step, r.loss, r.grad_norm, r.wallclock_ms
            ));
        }
        out
    }
}

/// First/second-moment accumulators for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState { m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam buffers disagree: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Grid indices whose times are usable for training (above the cutoff).
fn eligible_indices(schedule: &Schedule) -> Result<Vec<usize>> {
    let idx: Vec<usize> =
        (1..=schedule.n_steps).filter(|&n| schedule.times[n] >= T_CUTOFF).collect();
    if idx.is_empty() {
        return Err(Error::Config(format!(
            "no grid time reaches the training cutoff {T_CUTOFF}"
        )));
    }
    Ok(idx)
}

/// Draws one training tuple at a uniformly chosen eligible grid time.
pub fn sample_training_tuple(
    task: &PairedDataset,
    schedule: &Schedule,
    mode: TrainMode,
    proposal_mix: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TrainTuple> {
    let eligible = eligible_indices(schedule)?;
    sample_tuple_at(task, schedule, mode, proposal_mix, &eligible, rng)
}

fn sample_tuple_at(
    task: &PairedDataset,
    schedule: &Schedule,
    mode: TrainMode,
    proposal_mix: f64,
    eligible: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<TrainTuple> {
    if !(0.0..=1.0).contains(&proposal_mix) {
        return Err(Error::Config(format!(
            "proposal_mix must be in [0, 1], got {proposal_mix}"
        )));
    }
    let (x0b, x1b) = task.sample_pairs_rng(rng, 1);
    let x0 = x0b.row(0).to_vec();
    let x1 = x1b.row(0).to_vec();
    let n = eligible[rng.random_range(0..eligible.len())];
    let (s2f, s2b, _) = variances_at(schedule, n)?;
    let d = task.dim();
    let mut x_t = vec![0.0; d];
    match mode {
        TrainMode::I2sb => {
            let use_forward = proposal_mix > 0.0 && rng.random_range(0.0..1.0) < proposal_mix;
            if use_forward {
                let sd = s2f.sqrt();
                for j in 0..d {
                    x_t[j] = x0[j] + sd * rng.sample::<f64, _>(StandardNormal);
                }
            } else {
                let post = posterior_params(s2f, s2b, &x0, &x1)?;
                let sd = post.var.sqrt();
                for j in 0..d {
                    x_t[j] = post.mean[j] + sd * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        TrainMode::I2sbOtOde => {
            let post = posterior_params(s2f, s2b, &x0, &x1)?;
            x_t.copy_from_slice(&post.mean);
        }
        TrainMode::Csgm => {
            let sd = s2f.sqrt();
            for j in 0..d {
                x_t[j] = x0[j] + sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let denom = s2f.sqrt().max(SIGMA_FLOOR);
    let target: Vec<f64> = (0..d).map(|j| (x_t[j] - x0[j]) / denom).collect();
    Ok(TrainTuple { x0, x1, t_index: n, x_t, target })
}

/// Runs the simulation-free training loop and returns the updated network
/// with a per-step metrics trace.
///
/// Fails with [`Error::NonFiniteLoss`] the moment the loss or gradient
/// norm stops being finite.
pub fn train(
    task: &PairedDataset,
    schedule: &Schedule,
    net: Network,
    config: &TrainConfig,
) -> Result<(Network, MetricsLog)> {
    let mut net = net;
    let d = task.dim();
    let expect_in = config.mode.net_input_dim(d);
    if net.data_dim() != expect_in {
        return Err(Error::Config(format!(
            "network consumes {}-vectors but mode needs {} (task dimension {})",
            net.data_dim(),
            expect_in,
            d
        )));
    }
    if net.out_dim() != d {
        return Err(Error::Config(format!(
            "network produces {}-vectors but the task dimension is {}",
            net.out_dim(),
            d
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::Config(format!(
            "learning_rate must be positive and finite, got {}",
            config.learning_rate
        )));
    }
    if !(0.0..=1.0).contains(&config.proposal_mix) {
        return Err(Error::Config(format!(
            "proposal_mix must be in [0, 1], got {}",
            config.proposal_mix
        )));
    }
    let eligible = eligible_indices(schedule)?;
    let mut rng = stream_rng(config.seed, 0x7141_0001);
    let mut params = net.flat_params();
    let mut adam = AdamState::new(params.len());
    let mut log = MetricsLog::default();
    let start = Instant::now();
    for step in 0..config.steps {
        let mut xs = Batch::new(expect_in);
        let mut ts = Vec::with_capacity(config.batch_size);
        let mut targets = Batch::new(d);
        for _ in 0..config.batch_size {
            let tuple =
                sample_tuple_at(task, schedule, config.mode, config.proposal_mix, &eligible, &mut rng)?;
            match config.mode {
                TrainMode::Csgm => {
                    let mut row = tuple.x_t.clone();
                    row.extend_from_slice(&tuple.x1);
                    xs.push_row(&row);
                }
                _ => xs.push_row(&tuple.x_t),
            }
            ts.push(schedule.times[tuple.t_index]);
            targets.push_row(&tuple.target);
        }
        let (loss, grads) = loss_and_grad(&net, &xs, &ts, &targets)?;
        let grad_norm = grads.norm();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss, grad_norm });
        }
        adam_step(
            &mut params,
            &grads.flat(),
            &mut adam,
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        )?;
        net.set_flat_params(&params)?;
        log.rows.push(MetricsRow {
            step,
            loss,
            grad_norm,
            wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_network;
    use crate::schedule::{build_schedule, BetaProfile, Spacing};
    use crate::tasks::{make_task, TaskKind, TaskParams};
    use crate::util::{mean, sample_variance};

    fn gauss_task() -> PairedDataset {
        make_task(TaskKind::GaussShift, TaskParams::default(), 3).unwrap()
    }

    fn quick_schedule(n: usize) -> Schedule {
        build_schedule(n, BetaProfile::Constant, 1.0, Spacing::Uniform).unwrap()
    }

    #[test]
    fn adam_matches_two_step_reference_trace() {
        let mut p = [1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.5, -1.0], &mut st, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert!((p[0] - 0.900000002).abs() < 1e-12);
        assert!((p[1] - -1.900000001).abs() < 1e-12);
        adam_step(&mut p, &[0.25, 0.5], &mut st, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert!((p[0] - 0.8067820404774624).abs() < 1e-12);
        assert!((p[1] - -1.873366297370903).abs() < 1e-12);
        // Zero gradients leave parameters untouched even with momentum
        // history present only through the decayed moments.
        let before = p;
        let mut st0 = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st0, 0.1, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p, before);
        assert!(adam_step(&mut p, &[0.0], &mut st0, 0.1, 0.9, 0.999, 1e-8).is_err());
    }

    #[test]
    fn adam_moves_against_the_gradient_sign() {
        let mut p = [0.0, 0.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[1.0, -1.0], &mut st, 0.05, 0.9, 0.999, 1e-8).unwrap();
        assert!(p[0] < 0.0381 && p[0] > -0.05 && p[0] < 0.0);
        assert!(p[1] > 0.0);
    }

    #[test]
    fn zero_steps_returns_the_initial_network() {
        let task = gauss_task();
        let schedule = quick_schedule(10);
        let net = init_network(&[4, 8, 2], 2, 0).unwrap();
        let config = TrainConfig { steps: 0, ..TrainConfig::default() };
        let (out, log) = train(&task, &schedule, net.clone(), &config).unwrap();
        assert_eq!(out, net);
        assert!(log.rows.is_empty());
        assert_eq!(log.to_csv(), "step,loss,grad_norm,wallclock_ms\n");
    }

    #[test]
    fn training_is_bit_for_bit_reproducible() {
        let task = gauss_task();
        let schedule = quick_schedule(16);
        let config = TrainConfig { steps: 8, batch_size: 8, seed: 5, ..TrainConfig::default() };
        let run = |s: u64| {
            let net = init_network(&[4, 16, 2], 2, s).unwrap();
            train(&task, &schedule, net, &config).unwrap()
        };
        let (a, la) = run(1);
        let (b, lb) = run(1);
        assert_eq!(a, b);
        for (ra, rb) in la.rows.iter().zip(&lb.rows) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
            assert_eq!(ra.grad_norm.to_bits(), rb.grad_norm.to_bits());
        }
        let (c, _) = run(2);
        assert_ne!(a, c);
    }

    #[test]
    fn loss_trends_down_on_the_shift_task() {
        let task = gauss_task();
        let schedule = quick_schedule(32);
        let net = init_network(&[34, 48, 2], 32, 7).unwrap();
        let config = TrainConfig {
            steps: 200,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 7,
            ..TrainConfig::default()
        };
        let (_, log) = train(&task, &schedule, net, &config).unwrap();
        let losses: Vec<f64> = log.rows.iter().map(|r| r.loss).collect();
        let head = mean(&losses[..20]);
        let tail = mean(&losses[180..]);
        assert!(
            tail < 0.6 * head,
            "loss should fall: first-20 mean {head}, last-20 mean {tail}"
        );
        // Wallclock is monotone nondecreasing.
        for w in log.rows.windows(2) {
            assert!(w[1].wallclock_ms >= w[0].wallclock_ms);
        }
    }

    #[test]
    fn posterior_tuples_match_analytic_moments() {
        let task = gauss_task();
        let schedule = quick_schedule(2);
        let mut rng = stream_rng(11, 0);
        let mut residuals = Vec::new();
        for _ in 0..60_000 {
            let t = sample_training_tuple(&task, &schedule, TrainMode::I2sb, 0.0, &mut rng)
                .unwrap();
            if t.t_index != 1 {
                continue;
            }
            let post = posterior_params(0.5, 0.5, &t.x0, &t.x1).unwrap();
            for j in 0..2 {
                residuals.push(t.x_t[j] - post.mean[j]);
            }
        }
        assert!(residuals.len() > 50_000);
        let m = mean(&residuals);
        let v = sample_variance(&residuals);
        // Residual law is N(0, 0.25): var = 0.5*0.5/(0.5+0.5).
        let se_mean = (0.25f64 / residuals.len() as f64).sqrt();
        assert!(m.abs() < 4.0 * se_mean, "residual mean {m}");
        assert!((v - 0.25).abs() < 0.02, "residual variance {v}");
    }

    #[test]
    fn full_proposal_mix_uses_the_forward_marginal() {
        let task = gauss_task();
        let schedule = quick_schedule(2);
        let mut rng = stream_rng(13, 0);
        let mut deltas = Vec::new();
        for _ in 0..60_000 {
            let t = sample_training_tuple(&task, &schedule, TrainMode::I2sb, 1.0, &mut rng)
                .unwrap();
            if t.t_index != 1 {
                continue;
            }
            for j in 0..2 {
                deltas.push(t.x_t[j] - t.x0[j]);
            }
        }
        let m = mean(&deltas);
        let v = sample_variance(&deltas);
        // Forward marginal at t = 0.5: mean x0, variance 0.5. The posterior
        // would pull the mean toward x1 by 0.5*offset = (0.5, 0.3).
        let se_mean = (0.5f64 / deltas.len() as f64).sqrt();
        assert!(m.abs() < 4.0 * se_mean, "forward-marginal mean offset {m}");
        assert!((v - 0.5).abs() < 0.03, "forward-marginal variance {v}");
    }

    #[test]
    fn ode_mode_places_states_exactly_on_the_posterior_mean() {
        let task = gauss_task();
        let schedule = quick_schedule(8);
        let mut rng = stream_rng(17, 0);
        for _ in 0..200 {
            let t = sample_training_tuple(&task, &schedule, TrainMode::I2sbOtOde, 0.0, &mut rng)
                .unwrap();
            let (s2f, s2b, _) = variances_at(&schedule, t.t_index).unwrap();
            let post = posterior_params(s2f, s2b, &t.x0, &t.x1).unwrap();
            for j in 0..2 {
                assert!((t.x_t[j] - post.mean[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn csgm_tuples_tie_state_and_target_through_sigma() {
        let task = gauss_task();
        let schedule = quick_schedule(8);
        let mut rng = stream_rng(19, 0);
        for _ in 0..200 {
            let t = sample_training_tuple(&task, &schedule, TrainMode::Csgm, 0.0, &mut rng)
                .unwrap();
            let (s2f, _, _) = variances_at(&schedule, t.t_index).unwrap();
            let sigma = s2f.sqrt().max(SIGMA_FLOOR);
            for j in 0..2 {
                assert!((t.x_t[j] - t.x0[j] - sigma * t.target[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quadratic_spacing_skips_times_below_the_cutoff() {
        let s = build_schedule(1000, BetaProfile::Constant, 1.0, Spacing::Quadratic).unwrap();
        // times[1] = 1e-6 and times[10] = 1e-4: only indices >= 10 qualify.
        let idx = eligible_indices(&s).unwrap();
        assert_eq!(idx[0], 10);
        assert_eq!(*idx.last().unwrap(), 1000);
        let task = gauss_task();
        let mut rng = stream_rng(23, 0);
        for _ in 0..100 {
            let t = sample_training_tuple(&task, &s, TrainMode::I2sb, 0.0, &mut rng).unwrap();
            assert!(s.times[t.t_index] >= T_CUTOFF);
        }
    }

    #[test]
    fn mismatched_networks_are_rejected() {
        let task = gauss_task();
        let schedule = quick_schedule(4);
        let config = TrainConfig { steps: 1, batch_size: 2, ..TrainConfig::default() };
        // Wrong input width for i2sb.
        let net = init_network(&[6, 8, 2], 2, 0).unwrap();
        assert!(train(&task, &schedule, net, &config).is_err());
        // csgm needs twice the input width.
        let config = TrainConfig { mode: TrainMode::Csgm, ..config };
        let net = init_network(&[4, 8, 2], 2, 0).unwrap();
        assert!(train(&task, &schedule, net, &config).is_err());
        let net = init_network(&[6, 8, 2], 2, 0).unwrap();
        assert!(train(&task, &schedule, net, &config).is_ok());
        // Invalid scalar settings.
        let net = init_network(&[4, 8, 2], 2, 0).unwrap();
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(train(&task, &schedule, net.clone(), &bad).is_err());
        let bad = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(train(&task, &schedule, net.clone(), &bad).is_err());
        let bad = TrainConfig { proposal_mix: 1.5, ..TrainConfig::default() };
        assert!(train(&task, &schedule, net, &bad).is_err());
    }

    #[test]
    fn divergence_aborts_with_the_failing_step() {
        let task = gauss_task();
        let schedule = quick_schedule(4);
        let mut net = init_network(&[4, 8, 8, 2], 2, 0).unwrap();
        // Inflate the parameters so the squared loss overflows immediately.
        for w in &mut net.weights {
            for v in w.iter_mut() {
                *v *= 1e200;
            }
        }
        let config = TrainConfig { steps: 3, batch_size: 4, ..TrainConfig::default() };
        match train(&task, &schedule, net, &config) {
            Err(Error::NonFiniteLoss { step, loss, .. }) => {
                assert_eq!(step, 0);
                assert!(!loss.is_finite());
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn metrics_csv_has_header_and_rows() {
        let log = MetricsLog {
            rows: vec![MetricsRow { step: 0, loss: 0.5, grad_norm: 1.25, wallclock_ms: 3.0 }],
        };
        let csv = log.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("step,loss,grad_norm,wallclock_ms"));
        assert_eq!(lines.next(), Some("0,0.5,1.25,3"));
        assert_eq!(lines.next(), None);
    }
}
