//! Closed-form denoisers and probability-flow transports for isotropic
//! Gaussian data, used as ground truth for solvers, losses and distillation.

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clean data distributed as `N(mu0, s0² I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianData {
    pub mu0: Tensor,
    pub s0: f64,
}

impl GaussianData {
    pub fn new(mu0: Tensor, s0: f64) -> Result<Self> {
        if !(s0 > 0.0) {
            return Err(Error::Domain(format!("s0 must be positive, got {s0}")));
        }
        Ok(Self { mu0, s0 })
    }

    /// Constant mean `mu` over a `[1, dim]` row.
    pub fn isotropic(mu: f64, dim: usize, s0: f64) -> Result<Self> {
        Self::new(Tensor::full(&[1, dim], mu), s0)
    }

    /// Score of the σ-smoothed marginal, `-(x - mu0) / (s0² + σ²)`.
    pub fn score(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        let var = self.s0 * self.s0 + sigma * sigma;
        x.zip_map(&self.mu0, |xv, m| -(xv - m) / var)
    }
}

/// Posterior mean `E[x0 | x_t]`.
pub fn optimal_denoiser(x_t: &Tensor, sigma: f64, g: &GaussianData) -> Result<Tensor> {
    let s02 = g.s0 * g.s0;
    let gain = s02 / (s02 + sigma * sigma);
    if gain == 1.0 {
        x_t.ensure_same_shape(&g.mu0, "optimal_denoiser")?;
        return Ok(x_t.clone());
    }
    x_t.zip_map(&g.mu0, |x, m| m + gain * (x - m))
}

/// Exact probability-flow transport from `sigma_from` to `sigma_to`.
pub fn analytic_pfode_map(
    x: &Tensor,
    sigma_from: f64,
    sigma_to: f64,
    g: &GaussianData,
) -> Result<Tensor> {
    if sigma_from < 0.0 || sigma_to < 0.0 {
        return Err(Error::Domain(format!(
            "noise levels must be non-negative: {sigma_from} -> {sigma_to}"
        )));
    }
    let s02 = g.s0 * g.s0;
    let ratio = ((s02 + sigma_to * sigma_to) / (s02 + sigma_from * sigma_from)).sqrt();
    if ratio == 1.0 {
        x.ensure_same_shape(&g.mu0, "analytic_pfode_map")?;
        return Ok(x.clone());
    }
    x.zip_map(&g.mu0, |xv, m| m + ratio * (xv - m))
}

/// The optimal denoiser as a [`Denoiser`].
#[derive(Debug, Clone)]
pub struct GaussianDenoiser(pub GaussianData);

impl Denoiser for GaussianDenoiser {
    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        optimal_denoiser(x, sigma, &self.0)
    }
}

/// Exact consistency function: transports `x` at `sigma` down to `sigma_min`,
/// which makes it the identity at the boundary.
#[derive(Debug, Clone)]
pub struct AnalyticConsistency {
    pub data: GaussianData,
    pub sigma_min: f64,
}

impl Denoiser for AnalyticConsistency {
    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        if sigma == self.sigma_min {
            return Ok(x.clone());
        }
        analytic_pfode_map(x, sigma, self.sigma_min, &self.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn scalar_data() -> GaussianData {
        GaussianData::isotropic(0.0, 1, 1.0).unwrap()
    }

    #[test]
    fn zero_noise_is_identity() {
        let g = GaussianData::isotropic(0.3, 3, 0.7).unwrap();
        let x = Tensor::row(vec![1.0, -2.0, 0.25]);
        assert_eq!(optimal_denoiser(&x, 0.0, &g).unwrap(), x);
    }

    #[test]
    fn point_mass_collapses_to_mean() {
        let g = GaussianData::isotropic(0.3, 2, 1e-12).unwrap();
        let x = Tensor::row(vec![5.0, -4.0]);
        for v in optimal_denoiser(&x, 0.5, &g).unwrap().data() {
            assert!((v - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_mean_matches_monte_carlo() {
        let exact = optimal_denoiser(&Tensor::row(vec![2.0]), 1.0, &scalar_data()).unwrap();
        assert!((exact.data()[0] - 1.0).abs() < 1e-15);

        // Bin E[x0 | x_t] near x_t = 2 from paired draws.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mut acc, mut n) = (0.0, 0usize);
        for _ in 0..4_000_000 {
            let x0: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            let xt = x0 + e;
            if (xt - 2.0).abs() < 0.05 {
                acc += x0;
                n += 1;
            }
        }
        let mc = acc / n as f64;
        assert!((mc - 1.0).abs() < 1e-2, "monte carlo {mc} from {n} samples");
    }

    #[test]
    fn pfode_map_fixed_points() {
        let g = GaussianData::isotropic(0.5, 2, 0.8).unwrap();
        let x = Tensor::row(vec![1.5, -0.2]);
        assert_eq!(analytic_pfode_map(&x, 0.3, 0.3, &g).unwrap(), x);
        let m = analytic_pfode_map(&g.mu0, 4.0, 0.1, &g).unwrap();
        assert_eq!(m, g.mu0);
        assert!(analytic_pfode_map(&x, -1.0, 0.0, &g).is_err());
    }

    #[test]
    fn pfode_map_matches_fine_euler() {
        let g = scalar_data();
        let x = Tensor::row(vec![2.0]);
        let exact = analytic_pfode_map(&x, 1.0, 0.0, &g).unwrap().data()[0];
        assert!((exact - std::f64::consts::SQRT_2).abs() < 1e-15);

        // dx/dσ = (x - D(x, σ)) / σ, integrated from σ = 1 to 0.
        let steps = 10_000;
        let mut xv = 2.0;
        for i in 0..steps {
            let s = 1.0 - i as f64 / steps as f64;
            let s_next = 1.0 - (i + 1) as f64 / steps as f64;
            let d = (xv - xv / (1.0 + s * s)) / s;
            xv += (s_next - s) * d;
        }
        assert!((xv - exact).abs() < 1e-4, "euler {xv} vs {exact}");
    }

    #[test]
    fn consistency_oracle_boundary() {
        let c = AnalyticConsistency {
            data: scalar_data(),
            sigma_min: 1e-4,
        };
        let x = Tensor::row(vec![0.123]);
        assert_eq!(c.denoise(&x, 1e-4).unwrap(), x);
    }

    proptest! {
        #[test]
        fn transport_semigroup(
            a in 0.0f64..20.0, b in 0.0f64..20.0, c in 0.0f64..20.0,
            mu in -1.0f64..1.0, s0 in 0.05f64..3.0, xv in -5.0f64..5.0,
        ) {
            let g = GaussianData::isotropic(mu, 1, s0).unwrap();
            let x = Tensor::row(vec![xv]);
            let direct = analytic_pfode_map(&x, a, c, &g).unwrap().data()[0];
            let mid = analytic_pfode_map(&x, a, b, &g).unwrap();
            let chained = analytic_pfode_map(&mid, b, c, &g).unwrap().data()[0];
            prop_assert!((direct - chained).abs() <= 1e-10 * direct.abs().max(1e-12) + 1e-15);
        }

        #[test]
        fn denoiser_score_relation(
            sigma in 1e-3f64..50.0, mu in -1.0f64..1.0, s0 in 0.05f64..3.0, xv in -5.0f64..5.0,
        ) {
            let g = GaussianData::isotropic(mu, 1, s0).unwrap();
            let x = Tensor::row(vec![xv]);
            let d = optimal_denoiser(&x, sigma, &g).unwrap().data()[0];
            let via_denoiser = (d - xv) / (sigma * sigma);
            let score = g.score(&x, sigma).unwrap().data()[0];
            prop_assert!((via_denoiser - score).abs() <= 1e-10 * score.abs().max(1e-12) + 1e-12);
        }
    }
}
