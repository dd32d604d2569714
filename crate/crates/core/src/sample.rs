//! Generation: the stochastic per-step posterior recursion, its
//! deterministic posterior-mean variant, the conditional-baseline chain
//! started from pure noise, and the probability-flow ODE integrator.
//!
//! All samplers walk the schedule grid from t = 1 toward t = 0. Each step
//! first converts the model's scaled-displacement prediction into a
//! clean-state estimate `x0_pred = x - sigma_t * eps`, then either draws
//! from (or takes the mean of) the one-step Gaussian posterior, or follows
//! the transport velocity field. The ODE stops at the first positive grid
//! time, where the velocity is still well defined.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::bridge::{ddpm_posterior_params, ot_ode_velocity};
use crate::net::{forward, Network};
use crate::schedule::Schedule;
use crate::{Error, Result};

/// How many intermediate states a sampler records.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Capture {
    /// At most this many states, evenly spread and always including the
    /// initial and final ones.
    Snapshots(usize),
    /// Every visited state.
    Full,
}

impl Default for Capture {
    fn default() -> Self {
        Capture::Snapshots(32)
    }
}

/// Recorded states of one sampling run, newest last.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Times of the recorded states, strictly decreasing from 1.
    pub times: Vec<f64>,
    /// One batch snapshot per recorded time.
    pub states: Vec<Batch>,
}

/// ODE stepper choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeMethod {
    Euler,
    Rk4,
}

/// Anything that predicts the scaled displacement `(x_t - x0) / sigma_t`
/// for a batch of states sharing one time.
pub trait EpsModel {
    /// Dimension of the states the model accepts.
    fn dim(&self) -> usize;
    fn eps_batch(&self, xs: &Batch, t: f64) -> Result<Batch>;
}

/// A trained network driving the samplers directly.
pub struct NetEps<'a> {
    pub net: &'a Network,
}

impl EpsModel for NetEps<'_> {
    fn dim(&self) -> usize {
        self.net.data_dim()
    }

    fn eps_batch(&self, xs: &Batch, t: f64) -> Result<Batch> {
        forward(self.net, xs, &vec![t; xs.count()])
    }
}

/// A conditional network that sees `concat(x_t, cond_i)` per row.
pub struct ConditionedEps<'a> {
    pub net: &'a Network,
    pub cond: &'a Batch,
}

impl EpsModel for ConditionedEps<'_> {
    fn dim(&self) -> usize {
        self.cond.dim()
    }

    fn eps_batch(&self, xs: &Batch, t: f64) -> Result<Batch> {
        if xs.count() != self.cond.count() {
            return Err(Error::Shape(format!(
                "{} states but {} conditioning rows",
                xs.count(),
                self.cond.count()
            )));
        }
        let joined = Batch::concat_rows(xs, self.cond)?;
        forward(self.net, &joined, &vec![t; xs.count()])
    }
}

/// Analytic model with access to the true paired `x0`; its predictions
/// invert exactly, so chains driven by it must reproduce `x0`. Used to
/// validate the samplers independently of any training.
pub struct OracleEps<'a> {
    pub x0: &'a Batch,
    pub schedule: &'a Schedule,
}

impl EpsModel for OracleEps<'_> {
    fn dim(&self) -> usize {
        self.x0.dim()
    }

    fn eps_batch(&self, xs: &Batch, t: f64) -> Result<Batch> {
        if xs.count() != self.x0.count() {
            return Err(Error::Shape(format!(
                "{} states but {} oracle rows",
                xs.count(),
                self.x0.count()
            )));
        }
        let (_, s2) = self.schedule.rate_and_var_at(t)?;
        if s2 <= 0.0 {
            return Err(Error::Singularity(format!(
                "oracle prediction requested at t={t} where the accumulated variance vanishes"
            )));
        }
        let sd = s2.sqrt();
        let mut out = Batch::zeros(xs.count(), xs.dim());
        for i in 0..xs.count() {
            let (x, x0) = (xs.row(i), self.x0.row(i));
            let row = out.row_mut(i);
            for j in 0..x.len() {
                row[j] = (x[j] - x0[j]) / sd;
            }
        }
        Ok(out)
    }
}

/// Positions (into a sequence of `visited` states) to record.
fn snapshot_positions(visited: usize, capture: Capture) -> Vec<usize> {
    match capture {
        Capture::Full => (0..visited).collect(),
        Capture::Snapshots(cap) => {
            let cap = cap.max(2);
            if visited <= cap {
                return (0..visited).collect();
            }
            let mut out = Vec::with_capacity(cap);
            for j in 0..cap {
                let pos = (j as f64 * (visited - 1) as f64 / (cap - 1) as f64).round() as usize;
                if out.last() != Some(&pos) {
                    out.push(pos);
                }
            }
            out
        }
    }
}

/// Runs the per-step posterior recursion from `x1` down the grid.
///
/// With `stochastic` set, each step draws from the one-step Gaussian
/// posterior; otherwise it takes the posterior mean, which never consumes
/// randomness. States are checked for finiteness after every step.
pub fn run_chain(
    model: &dyn EpsModel,
    x1: &Batch,
    schedule: &Schedule,
    stochastic: bool,
    rng: &mut ChaCha8Rng,
    capture: Capture,
) -> Result<(Batch, Trajectory)> {
    if x1.dim() != model.dim() {
        return Err(Error::Shape(format!(
            "states have dimension {} but the model expects {}",
            x1.dim(),
            model.dim()
        )));
    }
    let n_steps = schedule.n_steps;
    let keep = snapshot_positions(n_steps + 1, capture);
    let mut traj = Trajectory { times: Vec::new(), states: Vec::new() };
    let mut x = x1.clone();
    let mut record = |pos: usize, t: f64, state: &Batch| {
        if keep.binary_search(&pos).is_ok() {
            traj.times.push(t);
            traj.states.push(state.clone());
        }
    };
    record(0, schedule.times[n_steps], &x);
    for n in (0..n_steps).rev() {
        let t_hi = schedule.times[n + 1];
        let eps = model.eps_batch(&x, t_hi)?;
        let sigma_hi = schedule.sigma2_fwd[n + 1].sqrt();
        let s2_lo = schedule.sigma2_fwd[n];
        let alpha2 = schedule.sigma2_fwd[n + 1] - s2_lo;
        for i in 0..x.count() {
            let e = eps.row(i);
            let xi = x.row_mut(i);
            let x0_pred: Vec<f64> =
                xi.iter().zip(e).map(|(&v, &ev)| v - sigma_hi * ev).collect();
            let post = ddpm_posterior_params(s2_lo, alpha2, &x0_pred, xi)?;
            let sd = if stochastic && post.var > 0.0 { post.var.sqrt() } else { 0.0 };
            for j in 0..xi.len() {
                xi[j] = post.mean[j]
                    + if sd > 0.0 { sd * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            }
        }
        if !x.all_finite() {
            return Err(Error::NonFiniteState { step: n, t: schedule.times[n] });
        }
        record(n_steps - n, schedule.times[n], &x);
    }
    Ok((x, traj))
}

/// Translates degraded samples back with a trained bridge network.
pub fn generate_i2sb(
    net: &Network,
    x1: &Batch,
    schedule: &Schedule,
    stochastic: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Batch, Trajectory)> {
    generate_i2sb_captured(net, x1, schedule, stochastic, rng, Capture::default())
}

/// As [`generate_i2sb`] with an explicit capture policy.
pub fn generate_i2sb_captured(
    net: &Network,
    x1: &Batch,
    schedule: &Schedule,
    stochastic: bool,
    rng: &mut ChaCha8Rng,
    capture: Capture,
) -> Result<(Batch, Trajectory)> {
    if net.data_dim() != net.out_dim() {
        return Err(Error::Shape(format!(
            "bridge networks must map a dimension to itself, got {} -> {}",
            net.data_dim(),
            net.out_dim()
        )));
    }
    run_chain(&NetEps { net }, x1, schedule, stochastic, rng, capture)
}

/// Runs the conditional baseline: ancestral sampling from pure noise with
/// the degraded samples supplied only as conditioning.
pub fn generate_csgm(
    net: &Network,
    cond: &Batch,
    schedule: &Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Batch, Trajectory)> {
    generate_csgm_captured(net, cond, schedule, rng, Capture::default())
}

/// As [`generate_csgm`] with an explicit capture policy.
pub fn generate_csgm_captured(
    net: &Network,
    cond: &Batch,
    schedule: &Schedule,
    rng: &mut ChaCha8Rng,
    capture: Capture,
) -> Result<(Batch, Trajectory)> {
    let d = cond.dim();
    if net.data_dim() != 2 * d || net.out_dim() != d {
        return Err(Error::Shape(format!(
            "conditional network must map {} -> {}, got {} -> {}",
            2 * d,
            d,
            net.data_dim(),
            net.out_dim()
        )));
    }
    // The baseline's t=1 marginal is pure Gaussian noise at the schedule's
    // total variance, independent of the degraded sample.
    let sd = schedule.sigma2_total().sqrt();
    let mut start = Batch::zeros(cond.count(), d);
    for v in start.as_flat_mut() {
        *v = sd * rng.sample::<f64, _>(StandardNormal);
    }
    run_chain(&ConditionedEps { net, cond }, &start, schedule, true, rng, capture)
}

/// Integrates the deterministic transport ODE from t = 1 down to the first
/// positive grid time, one step per grid interval.
pub fn integrate_ot_ode(
    net: &Network,
    x1: &Batch,
    schedule: &Schedule,
    method: OdeMethod,
) -> Result<(Batch, Trajectory)> {
    if net.data_dim() != net.out_dim() {
        return Err(Error::Shape(format!(
            "bridge networks must map a dimension to itself, got {} -> {}",
            net.data_dim(),
            net.out_dim()
        )));
    }
    integrate_ot_ode_model(&NetEps { net }, x1, schedule, method, Capture::default())
}

/// As [`integrate_ot_ode`] for any model and capture policy.
pub fn integrate_ot_ode_model(
    model: &dyn EpsModel,
    x1: &Batch,
    schedule: &Schedule,
    method: OdeMethod,
    capture: Capture,
) -> Result<(Batch, Trajectory)> {
    if x1.dim() != model.dim() {
        return Err(Error::Shape(format!(
            "states have dimension {} but the model expects {}",
            x1.dim(),
            model.dim()
        )));
    }
    let n_steps = schedule.n_steps;
    let (_, stop_var) = schedule.rate_and_var_at(schedule.times[1])?;
    if !(stop_var > 0.0) {
        return Err(Error::Singularity(
            "the accumulated variance vanishes at the first grid time; \
             the transport velocity is undefined there. Use a grid whose \
             first positive time carries variance (any built schedule does)"
                .into(),
        ));
    }
    // Velocity of the whole batch at time t.
    let velocity = |x: &Batch, t: f64| -> Result<Batch> {
        let (beta, s2) = schedule.rate_and_var_at(t)?;
        let eps = model.eps_batch(x, t)?;
        let sd = s2.sqrt();
        let mut v = Batch::zeros(x.count(), x.dim());
        for i in 0..x.count() {
            let (xi, ei) = (x.row(i), eps.row(i));
            let x0_pred: Vec<f64> =
                xi.iter().zip(ei).map(|(&xv, &ev)| xv - sd * ev).collect();
            v.row_mut(i)
                .copy_from_slice(&ot_ode_velocity(xi, &x0_pred, beta, s2)?);
        }
        Ok(v)
    };
    let axpy = |x: &Batch, a: f64, d: &Batch| -> Batch {
        let mut out = x.clone();
        for (o, dv) in out.as_flat_mut().iter_mut().zip(d.as_flat()) {
            *o += a * dv;
        }
        out
    };
    let keep = snapshot_positions(n_steps, capture);
    let mut traj = Trajectory { times: Vec::new(), states: Vec::new() };
    let mut x = x1.clone();
    let mut record = |pos: usize, t: f64, state: &Batch| {
        if keep.binary_search(&pos).is_ok() {
            traj.times.push(t);
            traj.states.push(state.clone());
        }
    };
    record(0, schedule.times[n_steps], &x);
    for n in (1..n_steps).rev() {
        let t_hi = schedule.times[n + 1];
        let t_lo = schedule.times[n];
        let h = t_lo - t_hi;
        x = match method {
            OdeMethod::Euler => {
                let k1 = velocity(&x, t_hi)?;
                axpy(&x, h, &k1)
            }
            OdeMethod::Rk4 => {
                let t_mid = t_hi + 0.5 * h;
                let k1 = velocity(&x, t_hi)?;
                let k2 = velocity(&axpy(&x, 0.5 * h, &k1), t_mid)?;
                let k3 = velocity(&axpy(&x, 0.5 * h, &k2), t_mid)?;
                let k4 = velocity(&axpy(&x, h, &k3), t_lo)?;
                let mut out = x.clone();
                let flat = out.as_flat_mut();
                for (j, xv) in flat.iter_mut().enumerate() {
                    *xv += h / 6.0
                        * (k1.as_flat()[j]
                            + 2.0 * k2.as_flat()[j]
                            + 2.0 * k3.as_flat()[j]
                            + k4.as_flat()[j]);
                }
                out
            }
        };
        if !x.all_finite() {
            return Err(Error::NonFiniteState { step: n, t: t_lo });
        }
        record(n_steps - n, t_lo, &x);
    }
    Ok((x, traj))
}
