//! Declarative run configuration, read from TOML with one table per module.
//!
//! Unknown keys are rejected and missing keys take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::network::UNetConfig;
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::precondition::{CdPrecondConfig, EdmPrecondConfig};
use crate::schedule::{LogNormalSigma, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrecondSection {
    pub sigma_data: f64,
    pub sigma_min: f64,
}

impl Default for PrecondSection {
    fn default() -> Self {
        Self {
            sigma_data: 0.2,
            sigma_min: 1e-4,
        }
    }
}

impl PrecondSection {
    pub fn edm(&self) -> EdmPrecondConfig {
        EdmPrecondConfig {
            sigma_data: self.sigma_data,
        }
    }

    pub fn cd(&self) -> CdPrecondConfig {
        CdPrecondConfig {
            sigma_data: self.sigma_data,
            sigma_min: self.sigma_min,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub p_mean: f64,
    pub p_std: f64,
    /// Karras grid used by distillation and the self-consistency metric.
    pub sigma_max: f64,
    pub rho: f64,
    pub steps: usize,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            p_mean: -3.0,
            p_std: 1.0,
            sigma_max: 10.0,
            rho: 9.0,
            steps: 18,
        }
    }
}

impl NoiseSection {
    pub fn lognormal(&self) -> LogNormalSigma {
        LogNormalSigma {
            p_mean: self.p_mean,
            p_std: self.p_std,
        }
    }

    pub fn schedule(&self, sigma_min: f64) -> Result<NoiseSchedule> {
        NoiseSchedule::new(sigma_min, self.sigma_max, self.rho, self.steps)
    }
}

/// One training stage. The distillation-only fields are ignored elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// One epoch is `ceil(train / batch)` steps.
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch: usize,
    pub seed: u64,
    pub ema_mu: f64,
    pub h_max: usize,
    pub lambda_dsm: f64,
    pub log_every: usize,
    /// 0 disables periodic validation.
    pub val_every: usize,
}

impl TrainConfig {
    fn stage(optimizer: OptimizerKind, lr: f64, epochs: usize) -> Self {
        Self {
            optimizer,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs,
            steps: None,
            batch: 8,
            seed: 0,
            ema_mu: 0.999,
            h_max: 17,
            lambda_dsm: 1.0,
            log_every: 10,
            val_every: 100,
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn total_steps(&self, train_examples: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * train_examples.div_ceil(self.batch.max(1)))
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer().validate()?;
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_mu) {
            return Err(Error::Config(format!("ema_mu {} outside [0, 1]", self.ema_mu)));
        }
        if self.h_max == 0 {
            return Err(Error::Config("h_max must be at least 1".into()));
        }
        Ok(())
    }
}

impl TrainConfig {
    pub fn det_defaults() -> Self {
        Self::stage(OptimizerKind::Adam, 1e-3, 50)
    }

    pub fn diff_defaults() -> Self {
        Self::stage(OptimizerKind::Adam, 5e-4, 80)
    }

    pub fn distill_defaults() -> Self {
        Self::stage(OptimizerKind::Radam, 1e-3, 20)
    }

    /// Stage defaults with the keys of `overrides` laid on top.
    fn merged(self, overrides: toml::Table) -> Result<Self> {
        let mut base = toml::Table::try_from(&self).map_err(|e| Error::Config(e.to_string()))?;
        base.extend(overrides);
        base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Det,
    Edm,
    CdOnestep,
    CdMultistep,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Det => "det",
            SamplerKind::Edm => "edm",
            SamplerKind::CdOnestep => "cd-onestep",
            SamplerKind::CdMultistep => "cd-multistep",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub steps: usize,
    pub corrections: usize,
    pub s_churn: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Edm,
            steps: 5,
            corrections: 2,
            s_churn: 20.0,
            sigma_max: 0.01,
            rho: 9.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Defaults to the chunk length.
    pub window: Option<usize>,
    /// Defaults to half the window.
    pub hop: Option<usize>,
    pub sigma_grid: Vec<f64>,
    pub steps_grid: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            window: None,
            hop: None,
            sigma_grid: log_grid(0.001, 80.0, 12),
            steps_grid: (1..=5).collect(),
            seed: 0,
        }
    }
}

/// `n` log-spaced values from `lo` to `hi` inclusive, rounded to 4 significant digits.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| {
            let v = (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp();
            let mag = 10f64.powi(v.log10().floor() as i32 - 3);
            (v / mag).round() * mag
        })
        .map(|v| format!("{v:.6e}").parse().expect("float"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub network: UNetConfig,
    pub precondition: PrecondSection,
    pub noise: NoiseSection,
    pub det: TrainConfig,
    pub diff: TrainConfig,
    pub distill: TrainConfig,
    pub sampler: SamplerSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DatasetConfig::default(),
            network: UNetConfig::default(),
            precondition: PrecondSection::default(),
            noise: NoiseSection::default(),
            det: TrainConfig::det_defaults(),
            diff: TrainConfig::diff_defaults(),
            distill: TrainConfig::distill_defaults(),
            sampler: SamplerSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Stage tables stay raw until merged over their per-stage defaults.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    #[serde(default)]
    data: DatasetConfig,
    #[serde(default)]
    network: UNetConfig,
    #[serde(default)]
    precondition: PrecondSection,
    #[serde(default)]
    noise: NoiseSection,
    #[serde(default)]
    det: toml::Table,
    #[serde(default)]
    diff: toml::Table,
    #[serde(default)]
    distill: toml::Table,
    #[serde(default)]
    sampler: SamplerSection,
    #[serde(default)]
    eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawRunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = RunConfig {
            data: raw.data,
            network: raw.network,
            precondition: raw.precondition,
            noise: raw.noise,
            det: TrainConfig::det_defaults().merged(raw.det)?,
            diff: TrainConfig::diff_defaults().merged(raw.diff)?,
            distill: TrainConfig::distill_defaults().merged(raw.distill)?,
            sampler: raw.sampler,
            eval: raw.eval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The fully resolved configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.data.validate(self.network.stride())?;
        if self.network.num_sources != crate::data::NUM_SOURCES {
            return Err(Error::Config(format!(
                "network.num_sources must be {}",
                crate::data::NUM_SOURCES
            )));
        }
        self.noise.schedule(self.precondition.sigma_min)?;
        for t in [&self.det, &self.diff, &self.distill] {
            t.validate()?;
        }
        if self.eval.sigma_grid.iter().any(|&s| !(s > self.precondition.sigma_min)) {
            return Err(Error::Config("sigma grid values must exceed sigma_min".into()));
        }
        if self.eval.steps_grid.contains(&0) {
            return Err(Error::Config("steps grid values must be at least 1".into()));
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        self.eval.window.unwrap_or(self.data.chunk_len)
    }

    pub fn hop(&self) -> usize {
        self.eval.hop.unwrap_or(self.window() / 2)
    }
}
