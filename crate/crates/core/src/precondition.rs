//! Preconditioning that turns a raw network core into a well-scaled denoiser.
//!
//! The EDM wrapper computes `c_skip·x + c_out·raw(c_in·x, c_noise)`. The
//! consistency wrapper swaps in boundary-respecting `c_skip`/`c_out` so the
//! wrapped model is exactly the identity at `sigma_min`; it keeps the EDM
//! `c_in` and `c_noise` so a student can start from teacher weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdmPrecondConfig {
    pub sigma_data: f64,
}

impl Default for EdmPrecondConfig {
    fn default() -> Self {
        Self { sigma_data: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdPrecondConfig {
    pub sigma_data: f64,
    pub sigma_min: f64,
}

impl Default for CdPrecondConfig {
    fn default() -> Self {
        Self {
            sigma_data: 0.2,
            sigma_min: 1e-4,
        }
    }
}

impl CdPrecondConfig {
    pub fn edm(&self) -> EdmPrecondConfig {
        EdmPrecondConfig {
            sigma_data: self.sigma_data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdmCoeffs {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("sigma must be positive, got {sigma}")))
    }
}

pub fn edm_coeffs(sigma: f64, cfg: &EdmPrecondConfig) -> Result<EdmCoeffs> {
    check_sigma(sigma)?;
    let sd2 = cfg.sigma_data * cfg.sigma_data;
    let s2 = sigma * sigma;
    let norm = (s2 + sd2).sqrt();
    Ok(EdmCoeffs {
        c_skip: sd2 / (s2 + sd2),
        c_out: sigma * cfg.sigma_data / norm,
        c_in: 1.0 / norm,
        c_noise: sigma.ln() / 4.0,
    })
}

/// `(c_skip, c_out)` of the consistency parameterization.
pub fn cd_coeffs(sigma: f64, cfg: &CdPrecondConfig) -> Result<(f64, f64)> {
    if !(sigma >= cfg.sigma_min) || !sigma.is_finite() {
        return Err(Error::Domain(format!(
            "sigma {sigma} below sigma_min {}",
            cfg.sigma_min
        )));
    }
    let sd = cfg.sigma_data;
    let shifted = sigma - cfg.sigma_min;
    let c_skip = sd * sd / (shifted * shifted + sd * sd);
    let c_out = sd * shifted / (sd * sd + sigma * sigma).sqrt();
    Ok((c_skip, c_out))
}

/// Loss weight `1 / c_out(σ)²`.
pub fn dsm_weight(sigma: f64, cfg: &EdmPrecondConfig) -> Result<f64> {
    check_sigma(sigma)?;
    let sd2 = cfg.sigma_data * cfg.sigma_data;
    let s2 = sigma * sigma;
    Ok((sd2 + s2) / (s2 * sd2))
}

fn combine(x: &Tensor, raw_out: &Tensor, c_skip: f64, c_out: f64) -> Result<Tensor> {
    if raw_out.shape() != x.shape() {
        return Err(Error::Contract(format!(
            "raw network returned shape {:?} for input {:?}",
            raw_out.shape(),
            x.shape()
        )));
    }
    x.zip_map(raw_out, |xv, rv| c_skip * xv + c_out * rv)
}

/// EDM-preconditioned denoiser output. `raw` receives `(c_in·x, c_noise)`.
pub fn edm_wrap<F>(raw: F, x: &Tensor, sigma: f64, cfg: &EdmPrecondConfig) -> Result<Tensor>
where
    F: FnOnce(&Tensor, f64) -> Result<Tensor>,
{
    let c = edm_coeffs(sigma, cfg)?;
    let out = raw(&x.scale(c.c_in), c.c_noise)?;
    combine(x, &out, c.c_skip, c.c_out)
}

/// Consistency-parameterized output. `raw` receives `(c_in·x, c_noise)` with
/// the EDM input scaling.
pub fn cd_wrap<F>(raw: F, x: &Tensor, sigma: f64, cfg: &CdPrecondConfig) -> Result<Tensor>
where
    F: FnOnce(&Tensor, f64) -> Result<Tensor>,
{
    let (c_skip, c_out) = cd_coeffs(sigma, cfg)?;
    let c = edm_coeffs(sigma, &cfg.edm())?;
    let out = raw(&x.scale(c.c_in), c.c_noise)?;
    combine(x, &out, c_skip, c_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SD: EdmPrecondConfig = EdmPrecondConfig { sigma_data: 0.2 };

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn symmetric_point_and_unit_sigma() {
        assert!((edm_coeffs(0.2, &SD).unwrap().c_skip - 0.5).abs() < 1e-15);
        let c = edm_coeffs(1.0, &EdmPrecondConfig { sigma_data: 3.7 }).unwrap();
        assert_eq!(c.c_noise, 0.0);
    }

    #[test]
    fn coefficients_match_extended_precision() {
        let c = edm_coeffs(0.5, &SD).unwrap();
        assert!(rel(c.c_skip, 0.137_931_034_482_758_62) < 1e-14);
        assert!(rel(c.c_out, 0.185_695_338_177_051_86) < 1e-14);
        assert!(rel(c.c_in, 1.856_953_381_770_518_6) < 1e-14);
        assert!(rel(c.c_noise, -0.173_286_795_139_986_33) < 1e-14);
    }

    #[test]
    fn non_positive_sigma_is_domain_error() {
        assert!(matches!(edm_coeffs(0.0, &SD), Err(Error::Domain(_))));
        assert!(matches!(dsm_weight(-1.0, &SD), Err(Error::Domain(_))));
        let cd = CdPrecondConfig::default();
        assert!(matches!(cd_coeffs(5e-5, &cd), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_core_leaves_skip_term() {
        let x = Tensor::row(vec![1.0, -2.0, 0.5]);
        let out = edm_wrap(|v, _| Ok(Tensor::zeros(v.shape())), &x, 0.3, &SD).unwrap();
        let c = edm_coeffs(0.3, &SD).unwrap();
        for (o, xv) in out.data().iter().zip(x.data()) {
            assert_eq!(*o, c.c_skip * xv);
        }
    }

    #[test]
    fn tiny_sigma_passes_input_through() {
        let x = Tensor::row(vec![0.3, -0.1]);
        let out = edm_wrap(|v, _| Ok(Tensor::full(v.shape(), 5.0)), &x, 1e-9, &SD).unwrap();
        for (o, xv) in out.data().iter().zip(x.data()) {
            assert!((o - xv).abs() < 1e-7);
        }
    }

    #[test]
    fn constant_core_at_sigma_data() {
        let x = Tensor::row(vec![0.0; 4]);
        let out = edm_wrap(|v, _| Ok(Tensor::full(v.shape(), 1.0)), &x, 0.2, &SD).unwrap();
        for o in out.data() {
            assert!((o - 0.141_421_356_237_309_5).abs() < 1e-15);
        }
    }

    #[test]
    fn wrapper_rejects_shape_change() {
        let x = Tensor::row(vec![0.0; 4]);
        let r = edm_wrap(|_, _| Ok(Tensor::row(vec![0.0; 3])), &x, 0.2, &SD);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn edm_wrap_is_linear_in_core_output() {
        let x = Tensor::row(vec![0.4, -0.7, 0.1]);
        let a = Tensor::row(vec![1.0, 2.0, -1.0]);
        let b = Tensor::row(vec![-0.5, 0.25, 3.0]);
        let apply = |y: Tensor| edm_wrap(move |_, _| Ok(y), &x, 0.7, &SD).unwrap();
        let skip = apply(Tensor::zeros(&[1, 3]));
        let fa = apply(a.clone()).sub(&skip).unwrap();
        let fb = apply(b.clone()).sub(&skip).unwrap();
        let fab = apply(a.add_scaled(&b, 2.0).unwrap()).sub(&skip).unwrap();
        let lin = fa.add_scaled(&fb, 2.0).unwrap();
        for (u, v) in fab.data().iter().zip(lin.data()) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn cd_boundary_values() {
        let cfg = CdPrecondConfig::default();
        assert_eq!(cd_coeffs(1e-4, &cfg).unwrap(), (1.0, 0.0));
        let (skip, _) = cd_coeffs(0.2, &cfg).unwrap();
        assert!(rel(skip, 0.500_250_062_499_992_2) < 1e-14);
    }

    #[test]
    fn cd_wrap_is_identity_at_sigma_min() {
        let cfg = CdPrecondConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::row((0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let out = cd_wrap(|v, _| Ok(v.map(|q| 10.0 * q + 1.0)), &x, 1e-4, &cfg).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn dsm_weight_values() {
        assert!((dsm_weight(0.2, &SD).unwrap() - 50.0).abs() < 1e-12);
        assert!(dsm_weight(0.1, &SD).unwrap() > dsm_weight(1.0, &SD).unwrap());
        for &s in &[1e-3, 0.05, 0.2, 3.0, 80.0] {
            let c = edm_coeffs(s, &SD).unwrap();
            assert!((dsm_weight(s, &SD).unwrap() * c.c_out * c.c_out - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coefficient_identities_over_log_grid() {
        for i in 0..1000 {
            let s = 10f64.powf(-5.0 + 7.0 * i as f64 / 999.0);
            let c = edm_coeffs(s, &SD).unwrap();
            let sd2 = 0.04;
            assert!(rel(c.c_in * (s * s + sd2).sqrt(), 1.0) < 1e-12);
            assert!(rel(c.c_out * c.c_out, s * s * sd2 / (s * s + sd2)) < 1e-12);
        }
    }
}
