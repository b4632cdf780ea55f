//! Training objectives, as plain values over any [`Denoiser`] and as graph
//! nodes for gradient-based training.

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::network::{Graph, Var};
use crate::samplers::heun_solve;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub scalar: f64,
    pub per_sample: Vec<f64>,
}

impl LossValue {
    pub fn from_samples(per_sample: Vec<f64>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::Contract("loss over an empty batch".into()));
        }
        let scalar = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
        if !scalar.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {scalar}")));
        }
        Ok(Self { scalar, per_sample })
    }
}

fn per_sample_sq(a: &Tensor, b: &Tensor, mean: bool) -> Result<Vec<f64>> {
    a.ensure_same_shape(b, "loss")?;
    Ok(a.samples()
        .into_iter()
        .zip(b.samples())
        .map(|(x, y)| {
            let s: f64 = x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum();
            if mean {
                s / x.len().max(1) as f64
            } else {
                s
            }
        })
        .collect())
}

/// Mean squared error, averaged within each sample and then over the batch.
pub fn det_loss(estimate: &Tensor, target: &Tensor) -> Result<LossValue> {
    LossValue::from_samples(per_sample_sq(estimate, target, true)?)
}

/// `weight · ‖x0 − D(x0 + σ·eps, σ)‖²`, summed within each sample.
pub fn dsm_loss<D: Denoiser + ?Sized>(
    denoiser: &D,
    x0: &Tensor,
    sigma: f64,
    eps: &Tensor,
    weight: f64,
) -> Result<LossValue> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("DSM needs sigma > 0, got {sigma}")));
    }
    eps.ensure_same_shape(x0, "dsm_loss noise")?;
    let noisy = x0.add_scaled(eps, sigma)?;
    let out = denoiser.denoise(&noisy, sigma)?;
    let per = per_sample_sq(x0, &out, false)?;
    LossValue::from_samples(per.into_iter().map(|v| weight * v).collect())
}

/// Teacher-solved, stop-gradient target for the consistency loss.
///
/// Runs `h` Heun steps of `teacher` from `sigma(t)` to `sigma(t - h)` and maps
/// the result through the frozen copy of the student.
pub fn cd_target<T: Denoiser + ?Sized, S: Denoiser + ?Sized>(
    teacher: &T,
    sg_student: &S,
    x_t: &Tensor,
    t: usize,
    h: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t < 2 || t > sched.steps {
        return Err(Error::Range(format!("step {t} outside 2..={}", sched.steps)));
    }
    if h == 0 || h > t - 1 {
        return Err(Error::Range(format!("teacher steps {h} outside 1..={}", t - 1)));
    }
    let x_prev = heun_solve(x_t, teacher, sched, t, t - h)?;
    sg_student.denoise(&x_prev, sched.sigma(t - h)?)
}

/// Consistency loss with ε supplied by the caller: squared L2 between
/// `student(x0 + sigma(t)·eps, sigma(t))` and [`cd_target`].
#[allow(clippy::too_many_arguments)]
pub fn cd_loss<S: Denoiser + ?Sized, G: Denoiser + ?Sized, T: Denoiser + ?Sized>(
    student: &S,
    sg_student: &G,
    teacher: &T,
    x0: &Tensor,
    eps: &Tensor,
    t: usize,
    h: usize,
    sched: &NoiseSchedule,
) -> Result<LossValue> {
    eps.ensure_same_shape(x0, "cd_loss noise")?;
    let sigma = sched.sigma(t)?;
    let x_t = x0.add_scaled(eps, sigma)?;
    let target = cd_target(teacher, sg_student, &x_t, t, h, sched)?;
    let pred = student.denoise(&x_t, sigma)?;
    LossValue::from_samples(per_sample_sq(&pred, &target, false)?)
}

/// `cd + lambda_dsm · dsm`, per sample.
pub fn combined_loss(cd: &LossValue, dsm: &LossValue, lambda_dsm: f64) -> Result<LossValue> {
    if cd.per_sample.len() != dsm.per_sample.len() {
        return Err(Error::Contract(format!(
            "batch sizes differ: {} vs {}",
            cd.per_sample.len(),
            dsm.per_sample.len()
        )));
    }
    LossValue::from_samples(
        cd.per_sample
            .iter()
            .zip(&dsm.per_sample)
            .map(|(c, d)| c + lambda_dsm * d)
            .collect(),
    )
}

/// Graph form of the per-sample MSE.
pub fn det_loss_on(g: &mut Graph, estimate: Var, target: &Tensor) -> Result<Var> {
    let n = target.len().max(1) as f64;
    let t = g.constant(target.clone());
    let diff = g.sub(estimate, t)?;
    let ss = g.sum_squares(diff);
    Ok(g.scale(ss, 1.0 / n))
}

/// Graph form of a weighted squared-L2 distance to a fixed target. Serves the
/// DSM term (weight `λ(σ)`) and the consistency term (weight 1).
pub fn weighted_sq_on(g: &mut Graph, pred: Var, target: &Tensor, weight: f64) -> Result<Var> {
    let t = g.constant(target.clone());
    let diff = g.sub(pred, t)?;
    let ss = g.sum_squares(diff);
    Ok(g.scale(ss, weight))
}
