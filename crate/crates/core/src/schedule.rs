//! Per-frame diffusion kernels.
//!
//! Timesteps run over `0..=T`, where `t = 0` denotes a clean frame and
//! `alpha_bar(0) = 1`. Every stochastic kernel takes its noise from the
//! caller so results are reproducible bit for bit.

use crate::error::{invalid, Error, Result};

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-3;
/// Diffusion steps used by the toy training setup.
pub const TOY_TIMESTEPS: usize = 100;

/// Variance schedule of the forward process, stored in 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    // index 0 is padding so that `betas[t]` matches the 1-based timestep
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` at `t = 1` to `beta_end` at `t = T`.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(invalid("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut betas = Vec::with_capacity(num_steps + 1);
        betas.push(0.0);
        for t in 1..=num_steps {
            let beta = if t == 1 {
                beta_start
            } else if t == num_steps {
                beta_end
            } else {
                let frac = (t - 1) as f64 / (num_steps - 1) as f64;
                beta_start + (beta_end - beta_start) * frac
            };
            betas.push(beta);
        }
        Ok(Self::from_betas_padded(betas))
    }

    /// [`NoiseSchedule::linear`] with the default beta range.
    pub fn default_linear(num_steps: usize) -> Result<Self> {
        Self::linear(num_steps, DEFAULT_BETA_START, DEFAULT_BETA_END)
    }

    /// Builds a schedule from explicit betas for `t = 1..=T`.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(invalid("schedule needs at least one timestep"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(invalid(format!("beta {b} outside (0, 1)")));
        }
        let mut padded = Vec::with_capacity(betas.len() + 1);
        padded.push(0.0);
        padded.extend_from_slice(betas);
        Ok(Self::from_betas_padded(padded))
    }

    fn from_betas_padded(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        alpha_bars.push(1.0);
        for t in 1..betas.len() {
            let prev = alpha_bars[t - 1];
            alpha_bars.push(prev * alphas[t]);
        }
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    /// Number of diffusion steps `T`.
    pub fn num_steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.num_steps(), "beta index {t} out of range");
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.num_steps(), "alpha index {t} out of range");
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Betas for `t = 1..=T`.
    pub fn betas(&self) -> &[f64] {
        &self.betas[1..]
    }

    /// Cumulative products for `t = 0..=T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.num_steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                lo,
                hi: self.num_steps(),
            });
        }
        Ok(())
    }

    /// Forward corruption `sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps`.
    pub fn corrupt(&self, z0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t, 0)?;
        same_len(z0, eps)?;
        if t == 0 {
            return Ok(z0.to_vec());
        }
        let ab = self.alpha_bars[t];
        let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z0
            .iter()
            .zip(eps)
            .map(|(z, e)| signal * z + noise * e)
            .collect())
    }

    /// Noise implied by a noisy latent and a clean estimate.
    pub fn eps_from_x0(&self, z_t: &[f64], x0_hat: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_t(t, 1)?;
        same_len(z_t, x0_hat)?;
        let ab = self.alpha_bars[t];
        let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z_t
            .iter()
            .zip(x0_hat)
            .map(|(z, x)| (z - signal * x) / noise)
            .collect())
    }

    /// One ancestral step `t -> t - 1` through the Gaussian posterior.
    ///
    /// The mean uses the noise-parameterised form with the noise recovered
    /// from `x0_hat`. At `t = 1` the posterior collapses onto `x0_hat`.
    pub fn posterior_step(
        &self,
        z_t: &[f64],
        x0_hat: &[f64],
        t: usize,
        noise: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_t(t, 1)?;
        same_len(z_t, x0_hat)?;
        same_len(z_t, noise)?;
        if t == 1 {
            return Ok(x0_hat.to_vec());
        }
        let eps = self.eps_from_x0(z_t, x0_hat, t)?;
        let (beta, alpha, ab) = (self.betas[t], self.alphas[t], self.alpha_bars[t]);
        let eps_coef = beta / (1.0 - ab).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let sigma = self.posterior_variance(t).sqrt();
        Ok(z_t
            .iter()
            .zip(&eps)
            .zip(noise)
            .map(|((z, e), n)| inv_sqrt_alpha * (z - eps_coef * e) + sigma * n)
            .collect())
    }

    /// `(1 - ab_{t-1}) / (1 - ab_t) * beta_t`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let ab = self.alpha_bars[t];
        let ab_prev = self.alpha_bars[t - 1];
        (1.0 - ab_prev) / (1.0 - ab) * self.betas[t]
    }

    /// Deterministic (eta = 0) DDIM jump from `t` down to `t_prev`.
    pub fn ddim_step(
        &self,
        z_t: &[f64],
        x0_hat: &[f64],
        t: usize,
        t_prev: usize,
    ) -> Result<Vec<f64>> {
        if t_prev >= t {
            return Err(invalid(format!("ddim step needs t_prev < t, got {t_prev} >= {t}")));
        }
        let eps = self.eps_from_x0(z_t, x0_hat, t)?;
        let ab_prev = self.alpha_bars[t_prev];
        let (signal, noise) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        Ok(x0_hat
            .iter()
            .zip(&eps)
            .map(|(x, e)| signal * x + noise * e)
            .collect())
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}
