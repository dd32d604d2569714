//! Noise schedules: per-interval diffusion rates, accumulated variances,
//! time-grid discretizations, and NFE subsetting.
//!
//! A schedule discretizes t in [0, 1] into `n_steps` intervals. On each
//! interval the diffusion rate beta is stored as a constant (the exact
//! interval average), and the accumulated variances
//!
//! ```text
//! sigma2_fwd[n] = integral of beta over [0, t_n]
//! sigma2_bwd[n] = integral of beta over [t_n, 1]
//! ```
//!
//! are evaluated from closed forms of the rate profile, so no quadrature is
//! involved anywhere and the conservation identity
//! `sigma2_fwd[n] + sigma2_bwd[n] = sigma2_total` holds to rounding error.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Shape of the diffusion rate beta(t) over [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaProfile {
    /// beta(t) = sigma2_total, flat over the whole interval.
    Constant,
    /// Triangular profile: linear from 0 at t=0 up to a peak of
    /// 2*sigma2_total at t=0.5 and back to 0 at t=1. Vanishing rate at both
    /// boundaries shrinks the diffusion near each endpoint distribution.
    Symmetric,
}

/// Placement of the time grid points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    /// times[n] = n/N.
    Uniform,
    /// times[n] = (n/N)^2; concentrates grid points near t=0.
    Quadratic,
}

/// A discretized noise schedule. All arrays are indexed by grid point
/// (length `n_steps + 1`) except `betas`, which is per interval.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    /// Number of intervals N.
    pub n_steps: usize,
    /// Grid times, strictly increasing, `times[0] = 0`, `times[N] = 1`.
    pub times: Vec<f64>,
    /// Per-interval average rate: `betas[n]` over `[times[n], times[n+1]]`.
    pub betas: Vec<f64>,
    /// Variance accumulated forward from t=0.
    pub sigma2_fwd: Vec<f64>,
    /// Variance accumulated backward from t=1.
    pub sigma2_bwd: Vec<f64>,
    /// Continuous rate profile the grid was built from; off-grid queries
    /// evaluate its closed forms.
    pub profile: BetaProfile,
    /// Grid placement rule the schedule was built with.
    pub spacing: Spacing,
}

/// Exact integral of beta over [0, t].
fn cumulative_fwd(profile: BetaProfile, total: f64, t: f64) -> f64 {
    match profile {
        BetaProfile::Constant => total * t,
        BetaProfile::Symmetric => {
            if t <= 0.5 {
                2.0 * total * t * t
            } else {
                let u = 1.0 - t;
                total - 2.0 * total * u * u
            }
        }
    }
}

/// Exact integral of beta over [t, 1], written in its own closed form (not
/// as `total - cumulative_fwd`) so conservation is a checkable identity
/// rather than true by construction.
fn cumulative_bwd(profile: BetaProfile, total: f64, t: f64) -> f64 {
    match profile {
        BetaProfile::Constant => total * (1.0 - t),
        BetaProfile::Symmetric => {
            if t >= 0.5 {
                let u = 1.0 - t;
                2.0 * total * u * u
            } else {
                total - 2.0 * total * t * t
            }
        }
    }
}

/// Builds a schedule with `n_steps` intervals, a rate profile, a target
/// total accumulated variance, and a grid spacing rule.
pub fn build_schedule(
    n_steps: usize,
    beta_profile: BetaProfile,
    sigma2_total: f64,
    spacing: Spacing,
) -> Result<Schedule> {
    if n_steps == 0 {
        return Err(Error::Config("n_steps must be at least 1".into()));
    }
    if !(sigma2_total > 0.0 && sigma2_total.is_finite()) {
        return Err(Error::Config(format!(
            "sigma2_total must be positive and finite, got {sigma2_total}"
        )));
    }
    let n = n_steps;
    let times: Vec<f64> = (0..=n)
        .map(|i| {
            let u = i as f64 / n as f64;
            match spacing {
                Spacing::Uniform => u,
                Spacing::Quadratic => u * u,
            }
        })
        .collect();
    let sigma2_fwd: Vec<f64> = times
        .iter()
        .map(|&t| cumulative_fwd(beta_profile, sigma2_total, t))
        .collect();
    let sigma2_bwd: Vec<f64> = times
        .iter()
        .map(|&t| cumulative_bwd(beta_profile, sigma2_total, t))
        .collect();
    let betas: Vec<f64> = (0..n)
        .map(|i| (sigma2_fwd[i + 1] - sigma2_fwd[i]) / (times[i + 1] - times[i]))
        .collect();
    Ok(Schedule {
        n_steps: n,
        times,
        betas,
        sigma2_fwd,
        sigma2_bwd,
        profile: beta_profile,
        spacing,
    })
}

/// Accumulated variances and the interval increment at grid point `n`:
/// `(sigma2_fwd[n], sigma2_bwd[n], alpha2)` with
/// `alpha2 = sigma2_fwd[n+1] - sigma2_fwd[n]`. The final grid point starts
/// no interval, so its `alpha2` is 0.
pub fn variances_at(schedule: &Schedule, n: usize) -> Result<(f64, f64, f64)> {
    if n > schedule.n_steps {
        return Err(Error::Bounds { index: n, len: schedule.n_steps + 1 });
    }
    let alpha2 = if n < schedule.n_steps {
        schedule.sigma2_fwd[n + 1] - schedule.sigma2_fwd[n]
    } else {
        0.0
    };
    Ok((schedule.sigma2_fwd[n], schedule.sigma2_bwd[n], alpha2))
}

/// Coarsens a schedule to `nfe` intervals by keeping the fine grid points
/// nearest to the equispaced index targets `j * N / nfe` (always retaining
/// the endpoints). Accumulated variances are re-read from the fine arrays,
/// so conservation transfers unchanged, and applying the same subset twice
/// is the identity.
pub fn subset_for_nfe(schedule: &Schedule, nfe: usize) -> Result<Schedule> {
    let n = schedule.n_steps;
    if nfe == 0 || nfe > n {
        return Err(Error::Config(format!(
            "nfe must be in 1..={n}, got {nfe}"
        )));
    }
    let mut indices = Vec::with_capacity(nfe + 1);
    for j in 0..=nfe {
        let ideal = j as f64 * n as f64 / nfe as f64;
        let mut idx = ideal.round() as usize;
        if let Some(&prev) = indices.last() {
            idx = idx.max(prev + 1);
        }
        indices.push(idx.min(n));
    }
    debug_assert_eq!(indices[0], 0);
    debug_assert_eq!(*indices.last().unwrap(), n);
    let times: Vec<f64> = indices.iter().map(|&i| schedule.times[i]).collect();
    let sigma2_fwd: Vec<f64> = indices.iter().map(|&i| schedule.sigma2_fwd[i]).collect();
    let sigma2_bwd: Vec<f64> = indices.iter().map(|&i| schedule.sigma2_bwd[i]).collect();
    let betas: Vec<f64> = (0..nfe)
        .map(|j| (sigma2_fwd[j + 1] - sigma2_fwd[j]) / (times[j + 1] - times[j]))
        .collect();
    Ok(Schedule {
        n_steps: nfe,
        times,
        betas,
        sigma2_fwd,
        sigma2_bwd,
        profile: schedule.profile,
        spacing: schedule.spacing,
    })
}

impl Schedule {
    /// Total accumulated variance over [0, 1].
    pub fn sigma2_total(&self) -> f64 {
        self.sigma2_fwd[self.n_steps]
    }

    /// Instantaneous rate and accumulated forward variance at an arbitrary
    /// time in [0, 1], evaluated from the continuous profile's closed
    /// forms. At grid times the variance agrees bitwise with `sigma2_fwd`,
    /// because both come from the same closed form.
    pub fn rate_and_var_at(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("time {t} outside [0, 1]")));
        }
        let total = self.sigma2_total();
        let beta = match self.profile {
            BetaProfile::Constant => total,
            BetaProfile::Symmetric => {
                if t <= 0.5 {
                    4.0 * total * t
                } else {
                    4.0 * total * (1.0 - t)
                }
            }
        };
        Ok((beta, cumulative_fwd(self.profile, total, t)))
    }

    /// Largest relative conservation residual
    /// `|sigma2_fwd[n] + sigma2_bwd[n] - sigma2_total| / sigma2_total`.
    pub fn max_conservation_residual(&self) -> f64 {
        let total = self.sigma2_total();
        (0..=self.n_steps)
            .map(|n| ((self.sigma2_fwd[n] + self.sigma2_bwd[n] - total) / total).abs())
            .fold(0.0, f64::max)
    }
}
