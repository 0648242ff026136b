//! Diffusion-time bookkeeping: the variance schedule, closed-form forward
//! noising, the predicted clean latent and the posterior sampling step.
//!
//! Timesteps are 1-based throughout (`1..=T`). `alpha_bar(0)` is defined as
//! exactly 1 so that the final posterior step is noiseless.

use crate::error::{invalid, Result};
use crate::grid::LatentGrid;

/// Per-step variances `beta`, `alpha = 1 - beta` and the cumulative product
/// `alpha_bar`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas. Each must lie in `(0, 1)`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(invalid("schedule needs at least one step"));
        }
        if let Some((i, b)) = beta
            .iter()
            .enumerate()
            .find(|(_, &b)| !(b > 0.0 && b < 1.0))
        {
            return Err(invalid(format!("beta[{}] = {b} is outside (0, 1)", i + 1)));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        if let Some(i) = alpha_bar.iter().position(|&a| !(a > 0.0)) {
            return Err(invalid(format!(
                "cumulative alpha underflows to zero at step {}",
                i + 1
            )));
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(invalid(format!(
                "timestep {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    /// Posterior variance `beta_tilde(t) = (1 - abar(t-1)) / (1 - abar(t)) * beta(t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    /// Coefficients `(c0, ct)` of the posterior mean
    /// `mu = c0 * z0 + ct * z_t`.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        if t == 1 {
            return (1.0, 0.0);
        }
        let abar_t = self.alpha_bar(t);
        let abar_prev = self.alpha_bar(t - 1);
        let denom = 1.0 - abar_t;
        let c0 = abar_prev.sqrt() * self.beta(t) / denom;
        let ct = self.alpha(t).sqrt() * (1.0 - abar_prev) / denom;
        (c0, ct)
    }

    /// Keeps `steps` evenly spaced timesteps of this schedule and re-derives
    /// betas so the kept `alpha_bar` values are reproduced exactly:
    /// `beta'_k = 1 - abar(tau_k) / abar(tau_{k-1})`.
    ///
    /// The last kept timestep is always `T`; the first is close to 1.
    pub fn respace(&self, steps: usize) -> Result<NoiseSchedule> {
        let total = self.len();
        if steps == 0 || steps > total {
            return Err(invalid(format!(
                "sampling step count {steps} must be in 1..={total}"
            )));
        }
        if steps == total {
            return Ok(self.clone());
        }
        // tau_k = round(k * T / steps), k = 1..=steps; strictly increasing
        // because T / steps >= 1.
        let taus: Vec<usize> = (1..=steps)
            .map(|k| ((k * total) as f64 / steps as f64).round() as usize)
            .collect();
        let mut betas = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &tau in &taus {
            let abar = self.alpha_bar(tau);
            betas.push(1.0 - abar / prev);
            prev = abar;
        }
        NoiseSchedule::from_betas(betas)
    }
}

/// Linear betas from `beta_start` to `beta_end` over `steps` steps.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid("step count T must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid(format!(
            "betas must satisfy 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        (0..steps)
            .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// `z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps`.
pub fn forward_diffuse(
    z0: &LatentGrid,
    t: usize,
    eps: &LatentGrid,
    s: &NoiseSchedule,
) -> Result<LatentGrid> {
    z0.ensure_same_shape(eps, "forward_diffuse")?;
    s.check_step(t)?;
    let abar = s.alpha_bar(t);
    let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
    Ok(z0.zip_map(eps, |z, e| a * z + b * e))
}

/// `z0 = (z_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)`.
pub fn predict_x0(
    z_t: &LatentGrid,
    eps_hat: &LatentGrid,
    t: usize,
    s: &NoiseSchedule,
) -> Result<LatentGrid> {
    z_t.ensure_same_shape(eps_hat, "predict_x0")?;
    s.check_step(t)?;
    let abar = s.alpha_bar(t);
    let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
    Ok(z_t.zip_map(eps_hat, |z, e| (z - b * e) / a))
}

/// One ancestral step: `mu_tilde(z_t, z0') + sqrt(beta_tilde_t) * noise`.
///
/// At `t == 1` the z0 coefficient is exactly 1 and the variance exactly 0,
/// so the result is `z0_prime` bit for bit.
pub fn posterior_step(
    z_t: &LatentGrid,
    z0_prime: &LatentGrid,
    t: usize,
    noise: &LatentGrid,
    s: &NoiseSchedule,
) -> Result<LatentGrid> {
    z_t.ensure_same_shape(z0_prime, "posterior_step")?;
    z_t.ensure_same_shape(noise, "posterior_step")?;
    s.check_step(t)?;
    if t == 1 {
        return Ok(z0_prime.clone());
    }
    let (c0, ct) = s.posterior_mean_coefs(t);
    let sigma = s.posterior_variance(t).sqrt();
    let data = z_t
        .data()
        .iter()
        .zip(z0_prime.data())
        .zip(noise.data())
        .map(|((&zt, &z0), &n)| c0 * z0 + ct * zt + sigma * n)
        .collect();
    let (h, w, c) = z_t.shape();
    LatentGrid::from_vec(h, w, c, data)
}
