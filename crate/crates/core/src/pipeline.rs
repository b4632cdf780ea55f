//! Training stages, the inference front end and the sweep driver.
//!
//! Every optimizer step draws its randomness from a generator keyed by
//! `(seed, stage, step)`, and parameters plus optimizer moments are kept at
//! `f32` precision after each update. Together these make a resumed run
//! bitwise identical to an uninterrupted one.

use std::collections::HashMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, SamplerKind, SamplerSection, TrainConfig};
use crate::data::{generate_example, DatasetConfig, Example, Split, NUM_SOURCES};
use crate::error::{Error, Result};
use crate::losses::{cd_target, det_loss, det_loss_on, weighted_sq_on};
use crate::metrics::{evaluate_chunks, ChunkKey, EvalReport, SweepRow};
use crate::network::checkpoint;
use crate::network::{
    ema_update, Conditioning, FeatureMaps, Gradients, Graph, Parameters, Precond, ScoreModel,
    UNet, Var,
};
use crate::optim::Optimizer;
use crate::precondition::dsm_weight;
use crate::samplers::{cd_multistep, cd_onestep, edm_solve, CdSamplerConfig, EdmSamplerConfig};
use crate::schedule::{sample_cd_batch_sigmas, sample_lognormal_sigma, NoiseSchedule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Det,
    Diff,
    Distill,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Det => "det",
            Stage::Diff => "diff",
            Stage::Distill => "distill",
        }
    }

    fn index(self) -> u64 {
        match self {
            Stage::Det => 0,
            Stage::Diff => 1,
            Stage::Distill => 2,
        }
    }

    fn from_index(i: u64) -> Option<Self> {
        [Stage::Det, Stage::Diff, Stage::Distill]
            .into_iter()
            .find(|s| s.index() == i)
    }
}

/// Generates `indices` on up to `workers` threads, returned in index order.
pub fn generate_examples(cfg: &DatasetConfig, indices: Range<u64>, workers: usize) -> Vec<Example> {
    let idx: Vec<u64> = indices.collect();
    let workers = workers.clamp(1, idx.len().max(1));
    if workers == 1 {
        return idx.iter().map(|&i| generate_example(cfg.seed, i, cfg)).collect();
    }
    let per = idx.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = idx
            .chunks(per)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&i| generate_example(cfg.seed, i, cfg))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("generator thread"))
            .collect()
    })
}

/// In-memory training and validation examples.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

impl TrainSet {
    pub fn generate(cfg: &DatasetConfig, workers: usize) -> Self {
        Self {
            train: generate_examples(cfg, cfg.indices(Split::Train), workers),
            val: generate_examples(cfg, cfg.indices(Split::Val), workers),
        }
    }
}

/// The label and inputs of one training sample.
#[derive(Debug, Clone)]
enum Job {
    Det {
        ex: usize,
        source: usize,
    },
    Diff {
        ex: usize,
        source: usize,
        sigma: f64,
        eps: Tensor,
    },
    Distill {
        ex: usize,
        source: usize,
        t: usize,
        h: usize,
        eps_cd: Tensor,
        sigma: f64,
        eps_dsm: Tensor,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEvent {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub val: Option<f64>,
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Parameters,
    pub opt: Optimizer,
    /// Stop-gradient copy of the student (distillation only).
    pub ema: Option<Parameters>,
    pub step: u64,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub stage: Stage,
    pub seed: u64,
    pub state: TrainState,
    det_net: UNet,
    score_net: UNet,
    det: Option<Parameters>,
    teacher: Option<Parameters>,
    workers: usize,
}

fn u64_tensor(v: u64) -> Tensor {
    Tensor::vector((0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f64).collect())
}

fn tensor_u64(t: &Tensor) -> Result<u64> {
    if t.len() != 4 {
        return Err(Error::Checkpoint("malformed integer field".into()));
    }
    Ok(t.data()
        .iter()
        .enumerate()
        .fold(0u64, |acc, (i, &v)| acc | ((v as u64 & 0xffff) << (16 * i))))
}

fn digest_tensor(hex_digest: &str) -> Tensor {
    let bytes = hex::decode(hex_digest).expect("hex digest");
    Tensor::vector(bytes.into_iter().map(f64::from).collect())
}

fn tensor_digest(t: &Tensor) -> String {
    hex::encode(t.data().iter().map(|&v| v as u8).collect::<Vec<u8>>())
}

/// Model weights stored in a checkpoint.
pub fn model_params(ckpt: &Parameters) -> Result<Parameters> {
    let p = ckpt.strip_prefix("model.");
    if p.is_empty() {
        return Err(Error::Checkpoint("checkpoint holds no model weights".into()));
    }
    Ok(p)
}

pub fn checkpoint_stage(ckpt: &Parameters) -> Result<Stage> {
    ckpt.get("meta.stage")
        .and_then(|t| Stage::from_index(t.data()[0] as u64))
        .ok_or_else(|| Error::Checkpoint("checkpoint has no stage tag".into()))
}

/// Digest of the upstream model a checkpoint was trained against.
pub fn checkpoint_reference(ckpt: &Parameters, stage: Stage) -> Option<String> {
    ckpt.get(&format!("ref.{}", stage.name())).map(tensor_digest)
}

fn check_reference(ckpt: &Parameters, stage: Stage, params: &Parameters) -> Result<()> {
    match checkpoint_reference(ckpt, stage) {
        Some(want) if want != checkpoint::digest(params) => Err(Error::Checkpoint(format!(
            "{} weights do not match the ones this checkpoint was trained with",
            stage.name()
        ))),
        _ => Ok(()),
    }
}

impl Trainer {
    fn build(
        cfg: &RunConfig,
        stage: Stage,
        seed: u64,
        det: Option<Parameters>,
        teacher: Option<Parameters>,
        init: Parameters,
    ) -> Result<Self> {
        cfg.validate()?;
        let det_net = UNet::deterministic(cfg.network.clone())?;
        let score_net = UNet::score(cfg.network.clone())?;
        let tc = stage_config(cfg, stage);
        if stage == Stage::Distill && tc.batch < 2 {
            return Err(Error::Config("distillation needs batch >= 2".into()));
        }
        let template = match stage {
            Stage::Det => det_net.init(0),
            _ => score_net.init(0),
        };
        init.ensure_matches(&template, "initial weights")?;
        if let Some(d) = &det {
            d.ensure_matches(&det_net.init(0), "extractor weights")?;
        }
        if let Some(t) = &teacher {
            t.ensure_matches(&template, "teacher weights")?;
        }
        let opt = Optimizer::new(tc.optimizer(), &init)?;
        let ema = (stage == Stage::Distill).then(|| init.clone());
        Ok(Self {
            cfg: cfg.clone(),
            stage,
            seed,
            state: TrainState {
                params: init,
                opt,
                ema,
                step: 0,
            },
            det_net,
            score_net,
            det,
            teacher,
            workers: 1,
        })
    }

    pub fn det(cfg: &RunConfig, seed: u64) -> Result<Self> {
        let init = UNet::deterministic(cfg.network.clone())?.init(seed);
        Self::build(cfg, Stage::Det, seed, None, None, init)
    }

    /// The extractor is frozen; the refiner starts with a zero output layer.
    pub fn diff(cfg: &RunConfig, seed: u64, det: Parameters) -> Result<Self> {
        let init = UNet::score(cfg.network.clone())?.init(seed);
        Self::build(cfg, Stage::Diff, seed, Some(det), None, init)
    }

    /// Student and its stop-gradient copy both start from the teacher.
    pub fn distill(cfg: &RunConfig, seed: u64, det: Parameters, teacher: Parameters) -> Result<Self> {
        let init = teacher.clone();
        Self::build(cfg, Stage::Distill, seed, Some(det), Some(teacher), init)
    }

    /// Restores a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        cfg: &RunConfig,
        ckpt: &Parameters,
        det: Option<Parameters>,
        teacher: Option<Parameters>,
    ) -> Result<Self> {
        let stage = checkpoint_stage(ckpt)?;
        let seed = tensor_u64(ckpt.require("meta.seed")?)?;
        if let Some(d) = &det {
            check_reference(ckpt, Stage::Det, d)?;
        }
        if let Some(t) = &teacher {
            check_reference(ckpt, Stage::Diff, t)?;
        }
        let mut tr = Self::build(cfg, stage, seed, det, teacher, model_params(ckpt)?)?;
        tr.state.opt = Optimizer::import(
            stage_config(cfg, stage).optimizer(),
            &ckpt.strip_prefix("opt."),
            &tr.state.params,
        )?;
        if stage == Stage::Distill {
            let ema = ckpt.strip_prefix("ema.");
            ema.ensure_matches(&tr.state.params, "stop-gradient weights")?;
            tr.state.ema = Some(ema);
        }
        tr.state.step = tensor_u64(ckpt.require("meta.step")?)?;
        Ok(tr)
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    pub fn train_config(&self) -> &TrainConfig {
        stage_config(&self.cfg, self.stage)
    }

    pub fn checkpoint(&self) -> Parameters {
        let mut out = Parameters::new();
        out.extend_prefixed("model.", &self.state.params);
        out.extend_prefixed("opt.", &self.state.opt.export());
        if let Some(ema) = &self.state.ema {
            out.extend_prefixed("ema.", ema);
        }
        out.insert("meta.stage", Tensor::scalar(self.stage.index() as f64));
        out.insert("meta.step", u64_tensor(self.state.step));
        out.insert("meta.seed", u64_tensor(self.seed));
        if let Some(d) = &self.det {
            out.insert("ref.det", digest_tensor(&checkpoint::digest(d)));
        }
        if let Some(t) = &self.teacher {
            out.insert("ref.diff", digest_tensor(&checkpoint::digest(t)));
        }
        out
    }

    fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((self.stage.index() << 48) | step);
        rng
    }

    fn cd_schedule(&self) -> Result<NoiseSchedule> {
        self.cfg.noise.schedule(self.cfg.precondition.sigma_min)
    }

    fn draw_jobs(&self, data: &TrainSet) -> Result<Vec<Job>> {
        let n_train = data.train.len();
        if n_train == 0 {
            return Err(Error::Contract("training set is empty".into()));
        }
        let tc = self.train_config();
        let len = self.cfg.data.chunk_len;
        let mut rng = self.step_rng(self.state.step);
        let dsm_sigmas = if self.stage == Stage::Distill {
            sample_cd_batch_sigmas(&mut rng, tc.batch, &self.cfg.noise.lognormal(), &self.cd_schedule()?)?
        } else {
            Vec::new()
        };
        let sched_steps = self.cfg.noise.steps;
        (0..tc.batch)
            .map(|b| {
                let ex = rng.gen_range(0..n_train);
                let source = rng.gen_range(0..NUM_SOURCES);
                Ok(match self.stage {
                    Stage::Det => Job::Det { ex, source },
                    Stage::Diff => Job::Diff {
                        ex,
                        source,
                        sigma: sample_lognormal_sigma(&mut rng, &self.cfg.noise.lognormal()),
                        eps: Tensor::randn(&[1, len], &mut rng),
                    },
                    Stage::Distill => {
                        if sched_steps < 2 {
                            return Err(Error::Config("distillation grid needs 2+ steps".into()));
                        }
                        let t = rng.gen_range(2..=sched_steps);
                        let h = rng.gen_range(1..=tc.h_max.min(t - 1));
                        Job::Distill {
                            ex,
                            source,
                            t,
                            h,
                            eps_cd: Tensor::randn(&[1, len], &mut rng),
                            sigma: dsm_sigmas[b],
                            eps_dsm: Tensor::randn(&[1, len], &mut rng),
                        }
                    }
                })
            })
            .collect()
    }

    fn teacher_model(&self) -> ScoreModel {
        ScoreModel {
            net: self.score_net.clone(),
            precond: Precond::Edm(self.cfg.precondition.edm()),
        }
    }

    fn student_model(&self) -> ScoreModel {
        ScoreModel {
            net: self.score_net.clone(),
            precond: Precond::Consistency(self.cfg.precondition.cd()),
        }
    }

    /// Records the frozen extractor on `g` and returns its decoder features.
    fn extractor_features(&self, g: &mut Graph, mix: &Tensor, source: usize) -> Result<Vec<Var>> {
        let det = self.det.as_ref().expect("stage has an extractor");
        let b = det.bind(g, false);
        let x = g.constant(mix.clone());
        let (_, feats) = self.det_net.forward(g, &b, x, &Conditioning::source(source), None)?;
        Ok(feats)
    }

    fn run_job(&self, job: &Job, data: &TrainSet) -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let edm = self.cfg.precondition.edm();
        let loss = match job {
            Job::Det { ex, source } => {
                let ex = &data.train[*ex];
                let p = self.state.params.bind(&mut g, true);
                let x = g.constant(ex.mix.clone());
                let (out, _) = self.det_net.forward(&mut g, &p, x, &Conditioning::source(*source), None)?;
                det_loss_on(&mut g, out, &ex.stem(*source))?
            }
            Job::Diff { ex, source, sigma, eps } => {
                let ex = &data.train[*ex];
                let feats = self.extractor_features(&mut g, &ex.mix, *source)?;
                let p = self.state.params.bind(&mut g, true);
                let x0 = ex.stem(*source);
                let noisy = x0.add_scaled(eps, *sigma)?;
                let den = self.teacher_model().denoise_on(&mut g, &p, &noisy, *sigma, *source, &feats)?;
                weighted_sq_on(&mut g, den, &x0, dsm_weight(*sigma, &edm)?)?
            }
            Job::Distill { ex, source, t, h, eps_cd, sigma, eps_dsm } => {
                let ex = &data.train[*ex];
                let feats = self.extractor_features(&mut g, &ex.mix, *source)?;
                let fmaps = FeatureMaps {
                    levels: feats.iter().map(|&v| g.value(v).clone()).collect(),
                };
                let sched = self.cd_schedule()?;
                let x0 = ex.stem(*source);
                let sigma_t = sched.sigma(*t)?;
                let x_t = x0.add_scaled(eps_cd, sigma_t)?;
                let teacher = self.teacher_model();
                let student = self.student_model();
                let target = cd_target(
                    &teacher.bind(self.teacher.as_ref().expect("teacher"), *source, &fmaps),
                    &student.bind(self.state.ema.as_ref().expect("ema"), *source, &fmaps),
                    &x_t,
                    *t,
                    *h,
                    &sched,
                )?;
                let p = self.state.params.bind(&mut g, true);
                let pred = student.denoise_on(&mut g, &p, &x_t, sigma_t, *source, &feats)?;
                let cd = weighted_sq_on(&mut g, pred, &target, 1.0)?;
                let noisy = x0.add_scaled(eps_dsm, *sigma)?;
                let den = student.denoise_on(&mut g, &p, &noisy, *sigma, *source, &feats)?;
                let dsm = weighted_sq_on(&mut g, den, &x0, dsm_weight(*sigma, &edm)?)?;
                g.lincomb(cd, 1.0, dsm, self.train_config().lambda_dsm)?
            }
        };
        let value = g.value(loss).data()[0];
        // Summed losses are reported as is but differentiated per element, so
        // gradient size does not grow with chunk length. This matters for the
        // un-rectified first RAdam steps, which are plain momentum SGD.
        let objective = match job {
            Job::Det { .. } => loss,
            _ => g.scale(loss, 1.0 / self.cfg.data.chunk_len as f64),
        };
        Ok((value, g.backward(objective)?))
    }

    fn run_jobs(&self, jobs: &[Job], data: &TrainSet) -> Result<Vec<(f64, Gradients)>> {
        if self.workers == 1 || jobs.len() == 1 {
            return jobs.iter().map(|j| self.run_job(j, data)).collect();
        }
        let per = jobs.len().div_ceil(self.workers);
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .chunks(per)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|j| self.run_job(j, data))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut out = Vec::with_capacity(jobs.len());
            for h in handles {
                out.extend(h.join().expect("training worker")?);
            }
            Ok(out)
        })
    }

    /// Batch loss and gradients at the current parameters, without updating.
    pub fn batch_gradients(&self, data: &TrainSet) -> Result<(f64, Gradients)> {
        let jobs = self.draw_jobs(data)?;
        let results = self.run_jobs(&jobs, data)?;
        let scale = 1.0 / results.len() as f64;
        let mut grads = Gradients::default();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l * scale;
            grads.accumulate(g, scale);
        }
        Ok((loss, grads))
    }

    /// One optimizer step; returns the batch loss.
    pub fn step(&mut self, data: &TrainSet) -> Result<f64> {
        let (loss, grads) = self.batch_gradients(data)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged(format!(
                "{} training diverged at step {} (loss {loss})",
                self.stage.name(),
                self.state.step
            )));
        }
        self.state.opt.update(&mut self.state.params, &grads)?;
        self.state.params.round_to_f32();
        self.state.opt.round_to_f32();
        let mu = self.train_config().ema_mu;
        if let Some(ema) = &mut self.state.ema {
            ema_update(ema, &self.state.params, mu)?;
            ema.round_to_f32();
        }
        self.state.step += 1;
        Ok(loss)
    }

    /// Steps until `until` (absolute step count), reporting through `log`.
    pub fn run(
        &mut self,
        data: &TrainSet,
        until: u64,
        log: &mut dyn FnMut(&LogEvent) -> Result<()>,
    ) -> Result<()> {
        let tc = self.train_config().clone();
        while self.state.step < until {
            let loss = self.step(data)?;
            let step = self.state.step;
            let val = (tc.val_every > 0 && (step % tc.val_every as u64 == 0 || step == until))
                .then(|| self.validate(data))
                .transpose()?
                .flatten();
            if val.is_some() || tc.log_every == 0 || step % tc.log_every as u64 == 0 || step == until {
                log(&LogEvent {
                    step,
                    loss,
                    lr: tc.lr,
                    val,
                })?;
            }
        }
        Ok(())
    }

    /// Validation pairs: every source of up to `max` validation examples.
    fn val_pairs<'a>(&self, data: &'a TrainSet, max: usize) -> Vec<(&'a Example, usize)> {
        data.val
            .iter()
            .take(max)
            .flat_map(|ex| (0..NUM_SOURCES).map(move |s| (ex, s)))
            .collect()
    }

    /// Stage-specific validation score; `None` without validation data.
    pub fn validate(&self, data: &TrainSet) -> Result<Option<f64>> {
        if data.val.is_empty() {
            return Ok(None);
        }
        match self.stage {
            Stage::Det => {
                let pairs = self.val_pairs(data, usize::MAX);
                let mut acc = 0.0;
                for (ex, s) in &pairs {
                    let (est, _) = crate::network::det_forward(
                        &self.det_net,
                        &self.state.params,
                        &ex.mix,
                        &Conditioning::source(*s),
                    )?;
                    acc += det_loss(&est, &ex.stem(*s))?.scalar;
                }
                Ok(Some(acc / pairs.len() as f64))
            }
            Stage::Diff => self.validation_dsm(data, &self.state.params).map(Some),
            Stage::Distill => self.self_consistency_gap(data, &self.state.params).map(Some),
        }
    }

    /// Weighted DSM loss on validation pairs with fixed noise draws.
    pub fn validation_dsm(&self, data: &TrainSet, params: &Parameters) -> Result<f64> {
        let det = self.det.as_ref().ok_or_else(|| Error::State("no extractor".into()))?;
        let edm = self.cfg.precondition.edm();
        let model = self.teacher_model();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        let pairs = self.val_pairs(data, usize::MAX);
        let mut acc = 0.0;
        for (ex, s) in &pairs {
            let sigma = sample_lognormal_sigma(&mut rng, &self.cfg.noise.lognormal());
            let eps = Tensor::randn(ex.mix.shape(), &mut rng);
            let (_, feats) =
                crate::network::det_forward(&self.det_net, det, &ex.mix, &Conditioning::source(*s))?;
            let x0 = ex.stem(*s);
            let den = model.denoise(params, &x0.add_scaled(&eps, sigma)?, sigma, *s, &feats)?;
            acc += dsm_weight(sigma, &edm)? * x0.sub(&den)?.sum_sq();
        }
        Ok(acc / pairs.len() as f64)
    }

    /// Mean squared distance between student outputs along one noising
    /// trajectory `x0 + σ_t·ε`, over all ordered pairs of grid levels,
    /// averaged over validation pairs.
    pub fn self_consistency_gap(&self, data: &TrainSet, params: &Parameters) -> Result<f64> {
        let det = self.det.as_ref().ok_or_else(|| Error::State("no extractor".into()))?;
        let sched = self.cd_schedule()?;
        let model = self.student_model();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX - 1);
        let pairs = self.val_pairs(data, 2);
        let mut acc = 0.0;
        for (ex, s) in &pairs {
            let eps = Tensor::randn(ex.mix.shape(), &mut rng);
            let (_, feats) =
                crate::network::det_forward(&self.det_net, det, &ex.mix, &Conditioning::source(*s))?;
            let x0 = ex.stem(*s);
            let outs = sched
                .grid()
                .into_iter()
                .map(|sigma| model.denoise(params, &x0.add_scaled(&eps, sigma)?, sigma, *s, &feats))
                .collect::<Result<Vec<_>>>()?;
            let mut sum = 0.0;
            for (i, a) in outs.iter().enumerate() {
                for (j, b) in outs.iter().enumerate() {
                    if i != j {
                        sum += a.sub(b)?.sum_sq();
                    }
                }
            }
            let n = outs.len() as f64;
            acc += sum / (n * (n - 1.0));
        }
        Ok(acc / pairs.len() as f64)
    }
}

fn stage_config(cfg: &RunConfig, stage: Stage) -> &TrainConfig {
    match stage {
        Stage::Det => &cfg.det,
        Stage::Diff => &cfg.diff,
        Stage::Distill => &cfg.distill,
    }
}

/// Frozen models assembled for inference.
pub struct Separator {
    pub cfg: RunConfig,
    det_net: UNet,
    score_net: UNet,
    det: Parameters,
    diffusion: Option<Parameters>,
    consistency: Option<Parameters>,
}

impl Separator {
    pub fn new(cfg: &RunConfig, det: Parameters) -> Result<Self> {
        let det_net = UNet::deterministic(cfg.network.clone())?;
        det.ensure_matches(&det_net.init(0), "extractor checkpoint")?;
        Ok(Self {
            cfg: cfg.clone(),
            score_net: UNet::score(cfg.network.clone())?,
            det_net,
            det,
            diffusion: None,
            consistency: None,
        })
    }

    pub fn with_diffusion(mut self, params: Parameters) -> Result<Self> {
        params.ensure_matches(&self.score_net.init(0), "diffusion checkpoint")?;
        self.diffusion = Some(params);
        Ok(self)
    }

    pub fn with_consistency(mut self, params: Parameters) -> Result<Self> {
        params.ensure_matches(&self.score_net.init(0), "consistency checkpoint")?;
        self.consistency = Some(params);
        Ok(self)
    }

    pub fn det_pass(&self, mix: &Tensor, source: usize) -> Result<(Tensor, FeatureMaps)> {
        crate::network::det_forward(&self.det_net, &self.det, mix, &Conditioning::source(source))
    }

    /// Refines an extractor estimate with the sampler in `settings`.
    pub fn refine<R: Rng + ?Sized>(
        &self,
        x_det: &Tensor,
        feats: &FeatureMaps,
        source: usize,
        settings: &SamplerSection,
        rng: &mut R,
    ) -> Result<Tensor> {
        let sigma_min = self.cfg.precondition.sigma_min;
        let missing = |what: &str| Error::Config(format!("sampler {} needs a {what} checkpoint", settings.kind.name()));
        match settings.kind {
            SamplerKind::Det => Ok(x_det.clone()),
            SamplerKind::Edm => {
                let params = self.diffusion.as_ref().ok_or_else(|| missing("diffusion"))?;
                let model = ScoreModel {
                    net: self.score_net.clone(),
                    precond: Precond::Edm(self.cfg.precondition.edm()),
                };
                let cfg = EdmSamplerConfig {
                    sched: NoiseSchedule::new(sigma_min, settings.sigma_max, settings.rho, settings.steps)?,
                    s_churn: settings.s_churn,
                    corrections: settings.corrections,
                };
                let eps = Tensor::randn(x_det.shape(), rng);
                let start = x_det.add_scaled(&eps, settings.sigma_max)?;
                edm_solve(&start, &model.bind(params, source, feats), &cfg, rng)
            }
            SamplerKind::CdOnestep | SamplerKind::CdMultistep => {
                let params = self.consistency.as_ref().ok_or_else(|| missing("consistency"))?;
                let model = ScoreModel {
                    net: self.score_net.clone(),
                    precond: Precond::Consistency(self.cfg.precondition.cd()),
                };
                let student = model.bind(params, source, feats);
                if settings.kind == SamplerKind::CdOnestep {
                    cd_onestep(x_det, &student, settings.sigma_max, sigma_min, rng)
                } else {
                    let cfg = CdSamplerConfig {
                        steps: settings.steps,
                        sigma_max: settings.sigma_max,
                        sigma_min,
                        rho: settings.rho,
                    };
                    cd_multistep(x_det, &student, &cfg, rng)
                }
            }
        }
    }

    pub fn extract<R: Rng + ?Sized>(
        &self,
        mix: &Tensor,
        source: usize,
        settings: &SamplerSection,
        rng: &mut R,
    ) -> Result<Tensor> {
        let (x_det, feats) = self.det_pass(mix, source)?;
        self.refine(&x_det, &feats, source, settings, rng)
    }

    /// Extraction for any length: zero-pads to the network stride and trims back.
    pub fn extract_any<R: Rng + ?Sized>(
        &self,
        mix: &[f64],
        source: usize,
        settings: &SamplerSection,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if mix.is_empty() {
            return Err(Error::Audio("empty input".into()));
        }
        let stride = self.cfg.network.stride();
        let padded = mix.len().div_ceil(stride) * stride;
        let mut buf = mix.to_vec();
        buf.resize(padded, 0.0);
        let out = self.extract(&Tensor::row(buf), source, settings, rng)?;
        Ok(out.into_data()[..mix.len()].to_vec())
    }
}

/// Network evaluations per extraction, counting the extractor pass.
pub fn calls_per_extraction(settings: &SamplerSection) -> usize {
    1 + match settings.kind {
        SamplerKind::Det => 0,
        SamplerKind::Edm => settings.steps * settings.corrections,
        SamplerKind::CdOnestep => 1,
        SamplerKind::CdMultistep => settings.steps,
    }
}

/// Extractor outputs for every kept evaluation chunk, reused across a sweep.
pub struct DetCache {
    entries: HashMap<(ChunkKey, usize), (Tensor, FeatureMaps)>,
}

impl DetCache {
    pub fn build(sep: &Separator, test: &[Example], window: usize, hop: usize) -> Result<Self> {
        let mut entries = HashMap::new();
        for (key, mix, refs) in crate::metrics::kept_chunks(test, window, hop)? {
            for (s, r) in refs.iter().enumerate() {
                if r.is_some() {
                    entries.insert((key, s), sep.det_pass(&mix, s)?);
                }
            }
        }
        Ok(Self { entries })
    }
}

/// Evaluates one sampler setting over `test`. The generator is seeded from
/// `seed` alone so repeated runs give identical reports (timing aside).
pub fn evaluate_sampler(
    sep: &Separator,
    test: &[Example],
    settings: &SamplerSection,
    seed: u64,
    cache: Option<&DetCache>,
) -> Result<EvalReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window = sep.cfg.window();
    let hop = sep.cfg.hop();
    evaluate_chunks(
        |key, mix, s| match cache.and_then(|c| c.entries.get(&(key, s))) {
            Some((x_det, feats)) => sep.refine(x_det, feats, s, settings, &mut rng),
            None => sep.extract(mix, s, settings, &mut rng),
        },
        test,
        window,
        hop,
        sep.cfg.data.sample_rate,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepModel {
    Diffusion,
    Consistency,
}

impl SweepModel {
    pub fn name(self) -> &'static str {
        match self {
            SweepModel::Diffusion => "edm",
            SweepModel::Consistency => "cd",
        }
    }
}

/// Sampler settings for `steps` network evaluations at `sigma_max`.
///
/// For the diffusion model `steps` counts solver iterations `T·R`: it uses
/// the configured correction count when that divides `steps` and `R = 1`
/// otherwise. The consistency model uses one step or a multistep grid.
pub fn sweep_settings(model: SweepModel, steps: usize, sigma_max: f64, base: &SamplerSection) -> SamplerSection {
    match model {
        SweepModel::Diffusion => {
            let r = if base.corrections > 0 && steps % base.corrections == 0 {
                base.corrections
            } else {
                1
            };
            SamplerSection {
                kind: SamplerKind::Edm,
                steps: steps / r,
                corrections: r,
                sigma_max,
                ..*base
            }
        }
        SweepModel::Consistency => SamplerSection {
            kind: if steps == 1 {
                SamplerKind::CdOnestep
            } else {
                SamplerKind::CdMultistep
            },
            steps,
            sigma_max,
            ..*base
        },
    }
}

/// One row per `(sigma_max, steps)` pair, grouped by steps.
pub fn sweep(
    sep: &Separator,
    test: &[Example],
    model: SweepModel,
    sigma_grid: &[f64],
    steps_grid: &[usize],
    seed: u64,
    cache: Option<&DetCache>,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(sigma_grid.len() * steps_grid.len());
    for &steps in steps_grid {
        for &sigma_max in sigma_grid {
            let settings = sweep_settings(model, steps, sigma_max, &sep.cfg.sampler);
            let report = evaluate_sampler(sep, test, &settings, seed, cache)?;
            rows.push(SweepRow {
                sigma_max,
                steps,
                si_sdri_avg: report.avg_si_sdri,
            });
        }
    }
    Ok(rows)
}

/// Test-split examples of a configuration.
pub fn test_examples(cfg: &DatasetConfig, workers: usize) -> Vec<Example> {
    generate_examples(cfg, cfg.indices(Split::Test), workers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::UNetConfig;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.network = UNetConfig {
            levels: 2,
            channels: vec![4, 8],
            kernel: 3,
            downsample: 4,
            cond_dim: 8,
            num_sources: 4,
        };
        cfg.data.chunk_len = 64;
        cfg.data.train = 6;
        cfg.data.val = 2;
        cfg.data.test = 4;
        for t in [&mut cfg.det, &mut cfg.diff, &mut cfg.distill] {
            t.batch = 3;
        }
        cfg.eval.sigma_grid = vec![0.01, 1.0];
        cfg.eval.steps_grid = vec![1, 2];
        cfg
    }

    fn trained_det(cfg: &RunConfig, data: &TrainSet, steps: u64) -> Parameters {
        let mut tr = Trainer::det(cfg, 0).unwrap();
        tr.run(data, steps, &mut |_| Ok(())).unwrap();
        tr.state.params
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let mut cfg = tiny_cfg();
        cfg.det.lr = 1e-300;
        let data = TrainSet::generate(&cfg.data, 1);
        let mut tr = Trainer::det(&cfg, 0).unwrap();
        let before = tr.state.params.clone();
        tr.run(&data, 3, &mut |_| Ok(())).unwrap();
        assert_eq!(tr.state.params, before);
    }

    #[test]
    fn det_training_is_reproducible_and_resumable() {
        let cfg = tiny_cfg();
        let data = TrainSet::generate(&cfg.data, 1);
        let mut a = Trainer::det(&cfg, 3).unwrap();
        a.run(&data, 4, &mut |_| Ok(())).unwrap();

        let mut b = Trainer::det(&cfg, 3).unwrap().with_workers(2);
        b.run(&data, 2, &mut |_| Ok(())).unwrap();
        let bytes = checkpoint::to_bytes(&b.checkpoint());
        let mut b = Trainer::resume(&cfg, &checkpoint::from_bytes(&bytes).unwrap(), None, None).unwrap();
        b.run(&data, 4, &mut |_| Ok(())).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(checkpoint::to_bytes(&a.checkpoint()), checkpoint::to_bytes(&b.checkpoint()));
    }

    #[test]
    fn diffusion_gradients_skip_the_extractor() {
        let cfg = tiny_cfg();
        let data = TrainSet::generate(&cfg.data, 1);
        let det = trained_det(&cfg, &data, 1);
        let tr = Trainer::diff(&cfg, 0, det).unwrap();
        let (loss, grads) = tr.batch_gradients(&data).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        let names: Vec<_> = grads.iter().map(|(k, _)| k.clone()).collect();
        let want: Vec<_> = tr.state.params.names().cloned().collect();
        assert_eq!(names, want);
        assert_eq!(tr.state.opt.export().len(), 2 * want.len() + 1);
    }

    #[test]
    fn distillation_starts_from_teacher_and_tracks_ema() {
        let cfg = tiny_cfg();
        let data = TrainSet::generate(&cfg.data, 1);
        let det = trained_det(&cfg, &data, 1);
        let mut diff = Trainer::diff(&cfg, 0, det.clone()).unwrap();
        diff.run(&data, 2, &mut |_| Ok(())).unwrap();
        let teacher = diff.state.params.clone();

        let mut tr = Trainer::distill(&cfg, 0, det.clone(), teacher.clone()).unwrap();
        assert_eq!(tr.state.params, teacher);
        assert_eq!(tr.state.ema.as_ref().unwrap(), &teacher);
        let gap0 = tr.self_consistency_gap(&data, &tr.state.params).unwrap();
        assert!(gap0.is_finite());
        tr.run(&data, 2, &mut |_| Ok(())).unwrap();
        let ema = tr.state.ema.clone().unwrap();
        assert_ne!(ema, teacher);

        // Teacher digests are checked on resume.
        let ckpt = tr.checkpoint();
        assert!(Trainer::resume(&cfg, &ckpt, Some(det.clone()), Some(teacher.clone())).is_ok());
        assert!(matches!(
            Trainer::resume(&cfg, &ckpt, Some(det), Some(tr.state.params.clone())),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn sampler_dispatch_and_call_counts() {
        let cfg = tiny_cfg();
        let data = TrainSet::generate(&cfg.data, 1);
        let det = trained_det(&cfg, &data, 1);
        let score = UNet::score(cfg.network.clone()).unwrap().init(1);
        let sep = Separator::new(&cfg, det).unwrap().with_diffusion(score.clone()).unwrap();
        let mix = &data.train[0].mix;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let det_only = SamplerSection { kind: SamplerKind::Det, ..cfg.sampler };
        assert_eq!(sep.extract(mix, 0, &det_only, &mut rng).unwrap(), sep.det_pass(mix, 0).unwrap().0);
        let edm = sep.extract(mix, 0, &cfg.sampler, &mut rng).unwrap();
        assert!(edm.is_finite());
        let cd = SamplerSection { kind: SamplerKind::CdOnestep, ..cfg.sampler };
        assert!(matches!(sep.extract(mix, 0, &cd, &mut rng), Err(Error::Config(_))));

        assert_eq!(calls_per_extraction(&det_only), 1);
        assert_eq!(calls_per_extraction(&cfg.sampler), 11);
        let multi = SamplerSection { kind: SamplerKind::CdMultistep, steps: 4, ..cfg.sampler };
        assert_eq!(calls_per_extraction(&multi), 5);

        let out = sep.extract_any(&mix.data()[..50], 1, &det_only, &mut rng).unwrap();
        assert_eq!(out.len(), 50);
    }

    #[test]
    fn sweep_settings_map_steps() {
        let base = SamplerSection::default();
        let s = sweep_settings(SweepModel::Diffusion, 4, 0.5, &base);
        assert_eq!((s.steps, s.corrections, s.sigma_max), (2, 2, 0.5));
        let s = sweep_settings(SweepModel::Diffusion, 3, 0.5, &base);
        assert_eq!((s.steps, s.corrections), (3, 1));
        assert_eq!(sweep_settings(SweepModel::Consistency, 1, 0.5, &base).kind, SamplerKind::CdOnestep);
        assert_eq!(sweep_settings(SweepModel::Consistency, 3, 0.5, &base).kind, SamplerKind::CdMultistep);
    }

    #[test]
    fn sweep_is_deterministic() {
        let mut cfg = tiny_cfg();
        cfg.data.silence_prob = 0.0;
        let data = TrainSet::generate(&cfg.data, 1);
        let det = trained_det(&cfg, &data, 1);
        let score = UNet::score(cfg.network.clone()).unwrap().init(1);
        let sep = Separator::new(&cfg, det)
            .unwrap()
            .with_diffusion(score.clone())
            .unwrap()
            .with_consistency(score)
            .unwrap();
        let test = test_examples(&cfg.data, 1);
        let cache = DetCache::build(&sep, &test, cfg.window(), cfg.hop()).unwrap();
        for model in [SweepModel::Diffusion, SweepModel::Consistency] {
            let a = sweep(&sep, &test, model, &cfg.eval.sigma_grid, &cfg.eval.steps_grid, 0, Some(&cache)).unwrap();
            let b = sweep(&sep, &test, model, &cfg.eval.sigma_grid, &cfg.eval.steps_grid, 0, None).unwrap();
            assert_eq!(a.len(), 4);
            assert_eq!(a, b);
        }
    }
}
