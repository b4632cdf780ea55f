//! Discrete Karras noise grids and σ-sampling distributions.
//!
//! Steps are 1-based and increase with noise: `sigma(1) = sigma_min`,
//! `sigma(T) = sigma_max`. Tables that list noise levels in descending
//! order must be reversed before use.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub steps: usize,
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, rho: f64, steps: usize) -> Result<Self> {
        let sched = Self {
            sigma_min,
            sigma_max,
            rho,
            steps,
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::Config(format!(
                "schedule needs 0 < sigma_min < sigma_max, got {} / {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if self.steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        Ok(())
    }

    /// Noise level at step `t`; shorthand for [`karras_sigma`].
    pub fn sigma(&self, t: usize) -> Result<f64> {
        karras_sigma(t, self)
    }

    /// Noise level at step `t`, with `t = 0` denoting the noise-free terminal level.
    pub fn sigma_or_zero(&self, t: usize) -> Result<f64> {
        if t == 0 {
            Ok(0.0)
        } else {
            karras_sigma(t, self)
        }
    }

    /// All grid levels in ascending order, `[sigma(1), ..., sigma(T)]`.
    pub fn grid(&self) -> Vec<f64> {
        (1..=self.steps)
            .map(|t| karras_sigma(t, self).expect("step in range"))
            .collect()
    }

    pub fn with_sigma_max(mut self, sigma_max: f64) -> Self {
        self.sigma_max = sigma_max;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }
}

/// Karras grid level for step `t` in `1..=T`.
///
/// A single-step grid collapses to `sigma_max`.
pub fn karras_sigma(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    if t == 0 || t > sched.steps {
        return Err(Error::Range(format!(
            "step {t} outside 1..={}",
            sched.steps
        )));
    }
    if sched.steps == 1 {
        return Ok(sched.sigma_max);
    }
    // Exact endpoints, free of pow/root round-off.
    if t == 1 {
        return Ok(sched.sigma_min);
    }
    if t == sched.steps {
        return Ok(sched.sigma_max);
    }
    let inv_rho = 1.0 / sched.rho;
    let lo = sched.sigma_min.powf(inv_rho);
    let hi = sched.sigma_max.powf(inv_rho);
    let frac = (t - 1) as f64 / (sched.steps - 1) as f64;
    Ok((lo + frac * (hi - lo)).powf(sched.rho))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalSigma {
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for LogNormalSigma {
    fn default() -> Self {
        Self {
            p_mean: -3.0,
            p_std: 1.0,
        }
    }
}

/// Draws σ with `ln σ ~ N(p_mean, p_std²)`.
pub fn sample_lognormal_sigma<R: Rng + ?Sized>(rng: &mut R, cfg: &LogNormalSigma) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (cfg.p_mean + cfg.p_std * z).exp()
}

/// Half-lognormal batch: the first `ceil(batch/2)` entries are lognormal, the
/// rest are grid levels at uniformly drawn steps.
pub fn sample_cd_batch_sigmas<R: Rng + ?Sized>(
    rng: &mut R,
    batch: usize,
    cfg: &LogNormalSigma,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if batch < 2 {
        return Err(Error::Range(format!("batch must be at least 2, got {batch}")));
    }
    let lognormal = batch.div_ceil(2);
    let mut out = Vec::with_capacity(batch);
    for _ in 0..lognormal {
        out.push(sample_lognormal_sigma(rng, cfg));
    }
    for _ in lognormal..batch {
        let t = rng.gen_range(1..=sched.steps);
        out.push(karras_sigma(t, sched)?);
    }
    Ok(out)
}
