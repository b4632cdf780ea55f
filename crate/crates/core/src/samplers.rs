//! Inference-time solvers over any [`Denoiser`].
//!
//! Every solver takes the already-noised start state and returns a new
//! tensor; inputs are never modified.

use rand::Rng;

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Second-order deterministic solve from step `t_from` down to `t_to`.
///
/// Step 0 is the noise-free level; the step into it is a plain Euler step.
pub fn heun_solve<D: Denoiser + ?Sized>(
    x_start: &Tensor,
    denoiser: &D,
    sched: &NoiseSchedule,
    t_from: usize,
    t_to: usize,
) -> Result<Tensor> {
    if t_from > sched.steps || t_from <= t_to {
        return Err(Error::Range(format!(
            "need {} >= t_from > t_to >= 0, got {t_from} -> {t_to}",
            sched.steps
        )));
    }
    let mut x = x_start.clone();
    for t in (t_to + 1..=t_from).rev() {
        let s = sched.sigma(t)?;
        let s_next = sched.sigma_or_zero(t - 1)?;
        let d = slope(&x, denoiser, s)?;
        let euler = x.add_scaled(&d, s_next - s)?;
        x = if s_next != 0.0 {
            let d2 = slope(&euler, denoiser, s_next)?;
            let avg = d.add(&d2)?.scale(0.5);
            x.add_scaled(&avg, s_next - s)?
        } else {
            euler
        };
    }
    Ok(x)
}

/// First-order counterpart of [`heun_solve`], used as a reference.
pub fn euler_solve<D: Denoiser + ?Sized>(
    x_start: &Tensor,
    denoiser: &D,
    sched: &NoiseSchedule,
    t_from: usize,
    t_to: usize,
) -> Result<Tensor> {
    if t_from > sched.steps || t_from <= t_to {
        return Err(Error::Range(format!(
            "need {} >= t_from > t_to >= 0, got {t_from} -> {t_to}",
            sched.steps
        )));
    }
    let mut x = x_start.clone();
    for t in (t_to + 1..=t_from).rev() {
        let s = sched.sigma(t)?;
        let s_next = sched.sigma_or_zero(t - 1)?;
        let d = slope(&x, denoiser, s)?;
        x = x.add_scaled(&d, s_next - s)?;
    }
    Ok(x)
}

fn slope<D: Denoiser + ?Sized>(x: &Tensor, denoiser: &D, sigma: f64) -> Result<Tensor> {
    let g = denoiser.denoise(x, sigma)?;
    Ok(x.sub(&g)?.scale(1.0 / sigma))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdmSamplerConfig {
    pub sched: NoiseSchedule,
    pub s_churn: f64,
    pub corrections: usize,
}

impl EdmSamplerConfig {
    pub fn gamma(&self) -> f64 {
        (self.s_churn / self.sched.steps as f64).min(std::f64::consts::SQRT_2 - 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        self.sched.validate()?;
        if !(self.s_churn >= 0.0) {
            return Err(Error::Config(format!("s_churn must be >= 0, got {}", self.s_churn)));
        }
        if self.corrections == 0 {
            return Err(Error::Config("at least one correction iteration".into()));
        }
        Ok(())
    }
}

/// Stochastic solver with noise churn and `R` correction iterations per step.
pub fn edm_solve<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    x_start: &Tensor,
    denoiser: &D,
    cfg: &EdmSamplerConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    let gamma = cfg.gamma();
    let mut x = x_start.clone();
    for t in (1..=cfg.sched.steps).rev() {
        let s = cfg.sched.sigma(t)?;
        let s_next = cfg.sched.sigma_or_zero(t - 1)?;
        for r in (0..cfg.corrections).rev() {
            let s_hat = s * (gamma + 1.0);
            let x_hat = if gamma > 0.0 {
                let eps = Tensor::randn(x.shape(), rng);
                x.add_scaled(&eps, (s_hat * s_hat - s * s).sqrt())?
            } else {
                x
            };
            let d = slope(&x_hat, denoiser, s_hat)?;
            x = x_hat.add_scaled(&d, s_next - s_hat)?;
            if r > 0 {
                let eps = Tensor::randn(x.shape(), rng);
                x = x.add_scaled(&eps, (s * s - s_next * s_next).sqrt())?;
            }
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdSamplerConfig {
    pub steps: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub rho: f64,
}

/// One student evaluation at `sigma_max`, starting from `x_det + sigma_max·ε`.
pub fn cd_onestep<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    x_det: &Tensor,
    student: &D,
    sigma_max: f64,
    sigma_min: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if !(sigma_max >= sigma_min) {
        return Err(Error::Range(format!(
            "sigma_max {sigma_max} below sigma_min {sigma_min}"
        )));
    }
    let eps = Tensor::randn(x_det.shape(), rng);
    student.denoise(&x_det.add_scaled(&eps, sigma_max)?, sigma_max)
}

/// Alternates student evaluations with re-noising on a Karras grid.
///
/// The grid has `T + 1` points `s_0 = sigma_min < ... < s_T = sigma_max`.
/// The student is evaluated at `s_T, ..., s_1`; before each evaluation after
/// the first, fresh noise of scale `sqrt(s_k² − sigma_min²)` lifts the sample
/// to `s_k`. That makes `T` network calls.
pub fn cd_multistep<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    x_det: &Tensor,
    student: &D,
    cfg: &CdSamplerConfig,
    rng: &mut R,
) -> Result<Tensor> {
    if cfg.steps < 2 {
        return Err(Error::Range(format!("multistep needs T >= 2, got {}", cfg.steps)));
    }
    let grid = NoiseSchedule::new(cfg.sigma_min, cfg.sigma_max, cfg.rho, cfg.steps + 1)
        .map_err(|e| Error::Range(e.to_string()))?
        .grid();
    let top = grid[cfg.steps];
    let eps = Tensor::randn(x_det.shape(), rng);
    let mut x = student.denoise(&x_det.add_scaled(&eps, top)?, top)?;
    for &s in grid[1..cfg.steps].iter().rev() {
        let eps = Tensor::randn(x.shape(), rng);
        let lifted = x.add_scaled(&eps, (s * s - cfg.sigma_min * cfg.sigma_min).sqrt())?;
        x = student.denoise(&lifted, s)?;
    }
    Ok(x)
}
