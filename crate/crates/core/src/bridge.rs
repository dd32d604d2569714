//! Closed-form Gaussian bridge mathematics.
//!
//! Everything here is exact linear-Gaussian algebra in 64-bit floats:
//!
//! - the boundary-pair posterior: the law of the intermediate state `X_t`
//!   given both endpoints `(X_0, X_1)`;
//! - the one-step kernel: the law of `X_n` given `(X_0, X_{n+1})`, used by
//!   the recursive sampler;
//! - a chain-composition oracle that marginalizes the one-step kernels
//!   analytically and must reproduce the direct posterior;
//! - the deterministic probability-flow velocity;
//! - input/skip/output preconditioning coefficients derived from second
//!   moments.
//!
//! The `*_nudged` variants accept a [`BridgeNudge`] of per-coefficient
//! multipliers. They exist so the verification suite can prove its own
//! sensitivity: perturbing any single coefficient must flip at least one
//! check to failing. Production call sites always pass the identity nudge.

use crate::schedule::Schedule;
use crate::{Error, Result};

/// Parameters of an isotropic Gaussian posterior `N(mean, var * I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorParams {
    pub mean: Vec<f64>,
    /// Isotropic variance; exactly 0 at the endpoints t = 0 and t = 1.
    pub var: f64,
}

/// Input/skip/output scalings that normalize the network input and target
/// to unit variance given second moments of the state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreconditionCoeffs {
    pub c_in: f64,
    pub c_skip: f64,
    pub c_out: f64,
}

/// Multiplicative perturbations applied to individual bridge coefficients.
/// The identity (all fields 1.0) leaves every formula unchanged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BridgeNudge {
    /// Scales the x0-weight in the boundary-pair posterior mean.
    pub posterior_weight: f64,
    /// Scales the boundary-pair posterior variance.
    pub posterior_var: f64,
    /// Scales the x0-weight in the one-step kernel mean.
    pub ddpm_weight: f64,
    /// Scales the one-step kernel variance.
    pub ddpm_var: f64,
    /// Scales the first precision term in the Gaussian-product route.
    pub product_precision: f64,
    /// Scales the probability-flow velocity rate.
    pub ode_rate: f64,
}

impl BridgeNudge {
    pub const fn identity() -> Self {
        BridgeNudge {
            posterior_weight: 1.0,
            posterior_var: 1.0,
            ddpm_weight: 1.0,
            ddpm_var: 1.0,
            product_precision: 1.0,
            ode_rate: 1.0,
        }
    }
}

impl Default for BridgeNudge {
    fn default() -> Self {
        Self::identity()
    }
}

fn check_same_dim(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "endpoint dimensions differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Posterior of the intermediate state given both endpoints:
/// `mean = (s2b * x0 + s2f * x1) / (s2f + s2b)`,
/// `var = s2f * s2b / (s2f + s2b)`,
/// where `s2f` is the variance accumulated from t=0 and `s2b` from t=1.
pub fn posterior_params(
    sigma2_fwd: f64,
    sigma2_bwd: f64,
    x0: &[f64],
    x1: &[f64],
) -> Result<PosteriorParams> {
    posterior_params_nudged(sigma2_fwd, sigma2_bwd, x0, x1, &BridgeNudge::identity())
}

/// [`posterior_params`] with coefficient perturbations (verification hook).
pub fn posterior_params_nudged(
    sigma2_fwd: f64,
    sigma2_bwd: f64,
    x0: &[f64],
    x1: &[f64],
    nudge: &BridgeNudge,
) -> Result<PosteriorParams> {
    check_same_dim(x0, x1)?;
    if sigma2_fwd < 0.0 || sigma2_bwd < 0.0 {
        return Err(Error::Config(format!(
            "variances must be nonnegative, got ({sigma2_fwd}, {sigma2_bwd})"
        )));
    }
    let total = sigma2_fwd + sigma2_bwd;
    if total <= 0.0 {
        return Err(Error::DegenerateSchedule);
    }
    let w0 = (sigma2_bwd / total) * nudge.posterior_weight;
    let w1 = sigma2_fwd / total;
    let var = (sigma2_fwd * sigma2_bwd / total) * nudge.posterior_var;
    let mean = x0
        .iter()
        .zip(x1)
        .map(|(&a, &b)| w0 * a + w1 * b)
        .collect();
    Ok(PosteriorParams { mean, var })
}

/// Normalized product of `N(x; x0, s2f * I)` and `N(x; x1, s2b * I)` via
/// precision addition — an algebraically independent route that must agree
/// with [`posterior_params`] to 1e-12.
pub fn gaussian_product_check(
    sigma2_fwd: f64,
    sigma2_bwd: f64,
    x0: &[f64],
    x1: &[f64],
) -> Result<PosteriorParams> {
    gaussian_product_check_nudged(sigma2_fwd, sigma2_bwd, x0, x1, &BridgeNudge::identity())
}

/// [`gaussian_product_check`] with coefficient perturbations.
pub fn gaussian_product_check_nudged(
    sigma2_fwd: f64,
    sigma2_bwd: f64,
    x0: &[f64],
    x1: &[f64],
    nudge: &BridgeNudge,
) -> Result<PosteriorParams> {
    check_same_dim(x0, x1)?;
    if sigma2_fwd < 0.0 || sigma2_bwd < 0.0 {
        return Err(Error::Config(format!(
            "variances must be nonnegative, got ({sigma2_fwd}, {sigma2_bwd})"
        )));
    }
    if sigma2_fwd + sigma2_bwd <= 0.0 {
        return Err(Error::DegenerateSchedule);
    }
    // A zero variance is an infinite precision: the product collapses onto
    // that endpoint.
    if sigma2_fwd == 0.0 {
        return Ok(PosteriorParams { mean: x0.to_vec(), var: 0.0 });
    }
    if sigma2_bwd == 0.0 {
        return Ok(PosteriorParams { mean: x1.to_vec(), var: 0.0 });
    }
    let p0 = (1.0 / sigma2_fwd) * nudge.product_precision;
    let p1 = 1.0 / sigma2_bwd;
    let var = 1.0 / (p0 + p1);
    let mean = x0
        .iter()
        .zip(x1)
        .map(|(&a, &b)| var * (p0 * a + p1 * b))
        .collect();
    Ok(PosteriorParams { mean, var })
}

/// One-step kernel of the reverse recursion: the law of `X_n` given the
/// predicted clean endpoint and the next state `X_{n+1}`, with
/// `sigma2_n` the variance accumulated up to step n and
/// `alpha2_n` the variance added by interval n:
/// `mean = (alpha2 * x0 + sigma2 * x_next) / (alpha2 + sigma2)`,
/// `var = sigma2 * alpha2 / (alpha2 + sigma2)`.
pub fn ddpm_posterior_params(
    sigma2_n: f64,
    alpha2_n: f64,
    x0_pred: &[f64],
    x_next: &[f64],
) -> Result<PosteriorParams> {
    ddpm_posterior_params_nudged(sigma2_n, alpha2_n, x0_pred, x_next, &BridgeNudge::identity())
}

/// [`ddpm_posterior_params`] with coefficient perturbations.
pub fn ddpm_posterior_params_nudged(
    sigma2_n: f64,
    alpha2_n: f64,
    x0_pred: &[f64],
    x_next: &[f64],
    nudge: &BridgeNudge,
) -> Result<PosteriorParams> {
    check_same_dim(x0_pred, x_next)?;
    if sigma2_n < 0.0 || alpha2_n < 0.0 {
        return Err(Error::Config(format!(
            "variances must be nonnegative, got ({sigma2_n}, {alpha2_n})"
        )));
    }
    let denom = sigma2_n + alpha2_n;
    if denom <= 0.0 {
        return Err(Error::DegenerateStep);
    }
    let w0 = (alpha2_n / denom) * nudge.ddpm_weight;
    let w1 = sigma2_n / denom;
    let var = (sigma2_n * alpha2_n / denom) * nudge.ddpm_var;
    let mean = x0_pred
        .iter()
        .zip(x_next)
        .map(|(&a, &b)| w0 * a + w1 * b)
        .collect();
    Ok(PosteriorParams { mean, var })
}

/// Marginal of `X_n` obtained by composing the one-step kernels analytically
/// from step N down to n, starting from the point mass at `x_n_final`. This
/// is the independent oracle for [`posterior_params`]: the two must agree
/// because the one-step recursion marginalizes to the boundary-pair
/// posterior.
pub fn compose_chain_oracle(
    schedule: &Schedule,
    n: usize,
    x0: &[f64],
    x_n_final: &[f64],
) -> Result<PosteriorParams> {
    compose_chain_oracle_nudged(schedule, n, x0, x_n_final, &BridgeNudge::identity())
}

/// [`compose_chain_oracle`] with coefficient perturbations, applied to every
/// per-step kernel.
pub fn compose_chain_oracle_nudged(
    schedule: &Schedule,
    n: usize,
    x0: &[f64],
    x_n_final: &[f64],
    nudge: &BridgeNudge,
) -> Result<PosteriorParams> {
    check_same_dim(x0, x_n_final)?;
    if n >= schedule.n_steps {
        return Err(Error::Bounds { index: n, len: schedule.n_steps });
    }
    let mut mean = x_n_final.to_vec();
    let mut var = 0.0;
    for k in (n..schedule.n_steps).rev() {
        let s2k = schedule.sigma2_fwd[k];
        let a2k = schedule.sigma2_fwd[k + 1] - s2k;
        let step = ddpm_posterior_params_nudged(s2k, a2k, x0, &mean, nudge)?;
        // The step mean is linear in the incoming state; the coefficient on
        // that state scales the variance carried from previous steps.
        let w_carry = s2k / (s2k + a2k);
        var = w_carry * w_carry * var + step.var;
        mean = step.mean;
    }
    Ok(PosteriorParams { mean, var })
}

/// Probability-flow velocity `v = (beta_t / sigma2_fwd) * (x_t - x0)`.
/// Undefined where the accumulated variance vanishes (t = 0), so callers
/// must start integration at a strictly positive time.
pub fn ot_ode_velocity(x_t: &[f64], x0: &[f64], beta_t: f64, sigma2_fwd: f64) -> Result<Vec<f64>> {
    ot_ode_velocity_nudged(x_t, x0, beta_t, sigma2_fwd, &BridgeNudge::identity())
}

/// [`ot_ode_velocity`] with coefficient perturbations.
pub fn ot_ode_velocity_nudged(
    x_t: &[f64],
    x0: &[f64],
    beta_t: f64,
    sigma2_fwd: f64,
    nudge: &BridgeNudge,
) -> Result<Vec<f64>> {
    check_same_dim(x_t, x0)?;
    if !(sigma2_fwd > 0.0) {
        return Err(Error::Singularity(format!(
            "accumulated variance {sigma2_fwd} is not positive; start integration at t > 0"
        )));
    }
    let rate = (beta_t / sigma2_fwd) * nudge.ode_rate;
    Ok(x_t.iter().zip(x0).map(|(&xt, &x0)| rate * (xt - x0)).collect())
}

/// Preconditioning coefficients from second moments of the noisy state:
/// `c_in = 1/sqrt(Var[X_t])`, `c_skip = Cov[X_0, X_t]/Var[X_t]`,
/// `c_out = sqrt(Var[X_0] - Cov[X_0, X_t]^2 / Var[X_t])`.
pub fn precondition_coeffs(
    var_xt: f64,
    cov_x0_xt: f64,
    var_x0: f64,
) -> Result<PreconditionCoeffs> {
    if !(var_xt > 0.0) || !var_xt.is_finite() {
        return Err(Error::InvalidStats(format!(
            "Var[X_t] must be positive and finite, got {var_xt}"
        )));
    }
    if var_x0 < 0.0 || !var_x0.is_finite() || !cov_x0_xt.is_finite() {
        return Err(Error::InvalidStats(format!(
            "invalid moments: Var[X_0]={var_x0}, Cov={cov_x0_xt}"
        )));
    }
    // Allow a hair of slack for Monte-Carlo estimates sitting exactly on the
    // Cauchy-Schwarz boundary; anything beyond it is a genuine violation.
    if cov_x0_xt * cov_x0_xt > var_x0 * var_xt * (1.0 + 1e-12) {
        return Err(Error::InvalidStats(format!(
            "Cauchy-Schwarz violated: Cov^2 = {} exceeds Var[X_0]*Var[X_t] = {}",
            cov_x0_xt * cov_x0_xt,
            var_x0 * var_xt
        )));
    }
    let c_in = 1.0 / var_xt.sqrt();
    let c_skip = cov_x0_xt / var_xt;
    let c_out = (var_x0 - cov_x0_xt * cov_x0_xt / var_xt).max(0.0).sqrt();
    Ok(PreconditionCoeffs { c_in, c_skip, c_out })
}
