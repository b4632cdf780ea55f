//! Adam and Rectified Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Gradients, Parameters};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Radam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be >= 0", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps {} must be positive", self.eps)));
        }
        Ok(())
    }
}

/// First and second moment estimates for exactly the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    pub step: u64,
    m: Parameters,
    v: Parameters,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: &Parameters) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        })
    }

    /// Applies one update. Every parameter must have a gradient.
    pub fn update(&mut self, params: &mut Parameters, grads: &Gradients) -> Result<()> {
        params.ensure_matches(&self.m, "optimizer state")?;
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as f64;
        let bias1 = 1.0 - c.beta1.powf(t);
        let bias2 = 1.0 - c.beta2.powf(t);

        // Rectification term; `None` means fall back to momentum SGD.
        let rect = match c.kind {
            OptimizerKind::Adam => Some(1.0),
            OptimizerKind::Radam => {
                let rho_inf = 2.0 / (1.0 - c.beta2) - 1.0;
                let rho = rho_inf - 2.0 * t * c.beta2.powf(t) / bias2;
                (rho > 4.0).then(|| {
                    (((rho - 4.0) * (rho - 2.0) * rho_inf)
                        / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
                        .sqrt()
                })
            }
        };

        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for {name}")))?;
            g.ensure_same_shape(p, name)?;
            let m = self.m.get_mut(name).expect("matched").data_mut();
            let v = self.v.get_mut(name).expect("matched").data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let m_hat = *mv / bias1;
                let delta = match rect {
                    Some(r) => r * m_hat / ((*vv / bias2).sqrt() + c.eps),
                    None => m_hat,
                };
                *pv -= c.lr * delta;
            }
        }
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        self.m.round_to_f32();
        self.v.round_to_f32();
    }

    /// Moments under `m.`/`v.` plus the step counter, for checkpointing.
    pub fn export(&self) -> Parameters {
        let mut out = Parameters::new();
        out.extend_prefixed("m.", &self.m);
        out.extend_prefixed("v.", &self.v);
        out.insert("step", Tensor::scalar(self.step as f64));
        out
    }

    pub fn import(cfg: OptimizerConfig, state: &Parameters, params: &Parameters) -> Result<Self> {
        let m = state.strip_prefix("m.");
        let v = state.strip_prefix("v.");
        m.ensure_matches(params, "optimizer first moments")?;
        v.ensure_matches(params, "optimizer second moments")?;
        let step = state
            .get("step")
            .map(|t| t.data()[0])
            .ok_or_else(|| Error::Checkpoint("optimizer step counter missing".into()))?;
        Ok(Self {
            cfg,
            step: step as u64,
            m,
            v,
        })
    }
}
