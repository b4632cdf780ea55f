//! Scaled-down 1-D U-Net used as the deterministic extractor, the diffusion
//! core and the consistency core.
//!
//! Encoder levels run conv → FiLM → SiLU and hand a skip to the decoder; a
//! non-overlapping strided conv moves to the next level. The decoder mirrors
//! this with transposed convs. The score variant projects the extractor's
//! decoder features with a 1×1 conv and adds them at the matching level.

pub mod checkpoint;
pub mod graph;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::precondition::{cd_coeffs, edm_coeffs, CdPrecondConfig, EdmPrecondConfig};
use crate::tensor::Tensor;

pub use graph::{Gradients, Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub downsample: usize,
    pub cond_dim: usize,
    pub num_sources: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            channels: vec![16, 32, 64],
            kernel: 5,
            downsample: 4,
            cond_dim: 32,
            num_sources: 4,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.channels.len() != self.levels {
            return Err(Error::Config(format!(
                "network needs one channel count per level ({} levels, {:?})",
                self.levels, self.channels
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel must be odd, got {}", self.kernel)));
        }
        if self.downsample < 2 || self.cond_dim == 0 || self.num_sources == 0 {
            return Err(Error::Config("downsample ≥ 2, cond_dim ≥ 1, num_sources ≥ 1".into()));
        }
        Ok(())
    }

    /// Input lengths must be multiples of this.
    pub fn stride(&self) -> usize {
        self.downsample.pow(self.levels as u32)
    }

    fn bottom_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    /// Channels after the downsampler leaving level `l`.
    fn next_channels(&self, l: usize) -> usize {
        if l + 1 < self.levels {
            self.channels[l + 1]
        } else {
            self.bottom_channels()
        }
    }
}

/// Named parameter tensors, iterated in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parameters {
    tensors: BTreeMap<String, Tensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Parameters {
        Parameters {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> Parameters {
        Parameters {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Copies every entry of `other` in under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &Parameters) {
        for (k, v) in &other.tensors {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Rounds every value to the nearest `f32`, the precision checkpoints store.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn ensure_matches(&self, other: &Parameters, what: &str) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Contract(format!(
                "{what}: {} vs {} tensors",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.tensors.iter().zip(&other.tensors) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(Error::Contract(format!(
                    "{what}: {ka}{:?} vs {kb}{:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Binds every tensor onto `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.param(k, v.clone(), trainable)))
                .collect(),
        }
    }
}

/// Parameters bound to graph nodes.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }
}

/// `target ← mu·target + (1 − mu)·source`.
pub fn ema_update(target: &mut Parameters, source: &Parameters, mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::Range(format!("EMA rate {mu} outside [0, 1]")));
    }
    target.ensure_matches(source, "ema_update")?;
    for ((_, t), (_, s)) in target.tensors.iter_mut().zip(&source.tensors) {
        for (tv, &sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = mu * *tv + (1.0 - mu) * sv;
        }
    }
    Ok(())
}

/// Instrument label plus the optional noise embedding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conditioning {
    pub label: usize,
    pub noise_embed: Option<f64>,
}

impl Conditioning {
    pub fn source(label: usize) -> Self {
        Self {
            label,
            noise_embed: None,
        }
    }

    pub fn with_noise(label: usize, c_noise: f64) -> Self {
        Self {
            label,
            noise_embed: Some(c_noise),
        }
    }

    pub fn one_hot(&self, num_sources: usize) -> Vec<f64> {
        (0..num_sources)
            .map(|s| if s == self.label { 1.0 } else { 0.0 })
            .collect()
    }

    fn embedding_input(&self, num_sources: usize) -> Result<Tensor> {
        if self.label >= num_sources {
            return Err(Error::Contract(format!(
                "label {} outside 0..{num_sources}",
                self.label
            )));
        }
        let mut v = self.one_hot(num_sources);
        v.push(self.noise_embed.unwrap_or(0.0));
        Ok(Tensor::vector(v))
    }
}

/// Decoder activations of the extractor, indexed by level (0 = full rate).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub levels: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNet {
    pub cfg: UNetConfig,
    /// Adds projected extractor features in the decoder.
    pub inject_features: bool,
    /// Zero-initialize the output projection.
    pub zero_output: bool,
}

impl UNet {
    pub fn deterministic(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            inject_features: false,
            zero_output: false,
        })
    }

    pub fn score(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            inject_features: true,
            zero_output: true,
        })
    }

    /// Every parameter with its shape, in construction order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.cfg;
        let (k, f, d) = (c.kernel, c.downsample, c.cond_dim);
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        push("embed.0.w".into(), vec![d, c.num_sources + 1]);
        push("embed.0.b".into(), vec![d]);
        push("embed.1.w".into(), vec![d, d]);
        push("embed.1.b".into(), vec![d]);
        push("in.w".into(), vec![c.channels[0], 1, k]);
        push("in.b".into(), vec![c.channels[0]]);
        let block = |push: &mut dyn FnMut(String, Vec<usize>), name: &str, ch: usize| {
            push(format!("{name}.conv.w"), vec![ch, ch, k]);
            push(format!("{name}.conv.b"), vec![ch]);
            push(format!("{name}.film.w"), vec![2 * ch, d]);
            push(format!("{name}.film.b"), vec![2 * ch]);
        };
        for l in 0..c.levels {
            let ch = c.channels[l];
            let next = c.next_channels(l);
            block(&mut push, &format!("enc.{l}"), ch);
            push(format!("down.{l}.w"), vec![next, ch, f]);
            push(format!("down.{l}.b"), vec![next]);
            push(format!("up.{l}.w"), vec![next, ch, f]);
            push(format!("up.{l}.b"), vec![ch]);
            block(&mut push, &format!("dec.{l}"), ch);
            if self.inject_features {
                push(format!("feat.{l}.w"), vec![ch, ch, 1]);
                push(format!("feat.{l}.b"), vec![ch]);
            }
        }
        block(&mut push, "mid", c.bottom_channels());
        push("out.w".into(), vec![1, c.channels[0], k]);
        push("out.b".into(), vec![1]);
        out
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init(&self, seed: u64) -> Parameters {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Parameters::new();
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let is_bias = name.ends_with(".b");
            let zero = is_bias || (self.zero_output && name == "out.w");
            let data = if zero {
                vec![0.0; n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (1.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            // Stored at checkpoint precision from the start.
            let data = data.into_iter().map(|v| v as f32 as f64).collect();
            p.insert(name, Tensor::new(shape, data).expect("shape"));
        }
        p
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let len = match x.shape() {
            [1, n] => *n,
            s => {
                return Err(Error::Contract(format!(
                    "network input must be [1, N], got {s:?}"
                )))
            }
        };
        if len == 0 || len % self.cfg.stride() != 0 {
            return Err(Error::Contract(format!(
                "input length {len} not divisible by {}",
                self.cfg.stride()
            )));
        }
        Ok(len)
    }

    fn block(&self, g: &mut Graph, p: &Bound, name: &str, h: Var, emb: Var) -> Result<Var> {
        let c = g.conv(h, p.var(&format!("{name}.conv.w"))?, p.var(&format!("{name}.conv.b"))?)?;
        let m = g.linear(emb, p.var(&format!("{name}.film.w"))?, p.var(&format!("{name}.film.b"))?)?;
        let f = g.film(c, m)?;
        Ok(g.silu(f))
    }

    /// Records a forward pass. Returns the `[1, N]` output and the decoder
    /// activations per level.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        input: Var,
        cond: &Conditioning,
        feats: Option<&[Var]>,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_input(g.value(input))?;
        let levels = self.cfg.levels;
        if self.inject_features {
            match feats {
                Some(f) if f.len() == levels => {}
                Some(f) => {
                    return Err(Error::Contract(format!(
                        "expected {levels} feature levels, got {}",
                        f.len()
                    )))
                }
                None => return Err(Error::Contract("score network needs features".into())),
            }
        }

        let e = g.constant(cond.embedding_input(self.cfg.num_sources)?);
        let e = g.linear(e, p.var("embed.0.w")?, p.var("embed.0.b")?)?;
        let e = g.silu(e);
        let e = g.linear(e, p.var("embed.1.w")?, p.var("embed.1.b")?)?;
        let emb = g.silu(e);

        let mut h = g.conv(input, p.var("in.w")?, p.var("in.b")?)?;
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            h = self.block(g, p, &format!("enc.{l}"), h, emb)?;
            skips.push(h);
            h = g.down(h, p.var(&format!("down.{l}.w"))?, p.var(&format!("down.{l}.b"))?)?;
        }
        h = self.block(g, p, "mid", h, emb)?;

        let mut dec = vec![h; levels];
        for l in (0..levels).rev() {
            h = g.up(h, p.var(&format!("up.{l}.w"))?, p.var(&format!("up.{l}.b"))?)?;
            h = g.add(h, skips[l])?;
            if let Some(f) = feats.filter(|_| self.inject_features) {
                let proj = g.conv(f[l], p.var(&format!("feat.{l}.w"))?, p.var(&format!("feat.{l}.b"))?)?;
                h = g.add(h, proj)?;
            }
            h = self.block(g, p, &format!("dec.{l}"), h, emb)?;
            dec[l] = h;
        }
        let out = g.conv(h, p.var("out.w")?, p.var("out.b")?)?;
        Ok((out, dec))
    }
}

/// Runs the extractor on `mix`; returns the estimate and its decoder features.
pub fn det_forward(
    net: &UNet,
    params: &Parameters,
    mix: &Tensor,
    cond: &Conditioning,
) -> Result<(Tensor, FeatureMaps)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(mix.clone());
    let (out, dec) = net.forward(&mut g, &p, x, cond, None)?;
    let feats = FeatureMaps {
        levels: dec.iter().map(|&v| g.value(v).clone()).collect(),
    };
    Ok((g.value(out).clone(), feats))
}

/// Raw score core `g'(input, c_noise, label, features)` without preconditioning.
pub fn score_forward(
    net: &UNet,
    params: &Parameters,
    input: &Tensor,
    cond: &Conditioning,
    feats: &FeatureMaps,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(input.clone());
    let fv: Vec<Var> = feats.levels.iter().map(|t| g.constant(t.clone())).collect();
    let (out, _) = net.forward(&mut g, &p, x, cond, Some(&fv))?;
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Precond {
    Edm(EdmPrecondConfig),
    Consistency(CdPrecondConfig),
}

impl Precond {
    /// `(c_skip, c_out, c_in, c_noise)` at `sigma`.
    pub fn coeffs(&self, sigma: f64) -> Result<(f64, f64, f64, f64)> {
        match self {
            Precond::Edm(cfg) => {
                let c = edm_coeffs(sigma, cfg)?;
                Ok((c.c_skip, c.c_out, c.c_in, c.c_noise))
            }
            Precond::Consistency(cfg) => {
                let (skip, out) = cd_coeffs(sigma, cfg)?;
                let c = edm_coeffs(sigma, &cfg.edm())?;
                Ok((skip, out, c.c_in, c.c_noise))
            }
        }
    }
}

/// A score network together with its preconditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    pub net: UNet,
    pub precond: Precond,
}

impl ScoreModel {
    /// Records the preconditioned denoiser output on `g`.
    pub fn denoise_on(
        &self,
        g: &mut Graph,
        p: &Bound,
        x_noisy: &Tensor,
        sigma: f64,
        label: usize,
        feats: &[Var],
    ) -> Result<Var> {
        let (c_skip, c_out, c_in, c_noise) = self.precond.coeffs(sigma)?;
        let x = g.constant(x_noisy.clone());
        let scaled = g.constant(x_noisy.scale(c_in));
        let cond = Conditioning::with_noise(label, c_noise);
        let (raw, _) = self.net.forward(g, p, scaled, &cond, Some(feats))?;
        g.lincomb(x, c_skip, raw, c_out)
    }

    pub fn denoise(
        &self,
        params: &Parameters,
        x_noisy: &Tensor,
        sigma: f64,
        label: usize,
        feats: &FeatureMaps,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let fv: Vec<Var> = feats.levels.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.denoise_on(&mut g, &p, x_noisy, sigma, label, &fv)?;
        Ok(g.value(out).clone())
    }

    pub fn bind<'a>(
        &'a self,
        params: &'a Parameters,
        label: usize,
        feats: &'a FeatureMaps,
    ) -> BoundScore<'a> {
        BoundScore {
            model: self,
            params,
            label,
            feats,
        }
    }
}

/// A score model fixed to one label and feature set.
pub struct BoundScore<'a> {
    pub model: &'a ScoreModel,
    pub params: &'a Parameters,
    pub label: usize,
    pub feats: &'a FeatureMaps,
}

impl Denoiser for BoundScore<'_> {
    fn denoise(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        self.model
            .denoise(self.params, x, sigma, self.label, self.feats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn small_cfg() -> UNetConfig {
        UNetConfig {
            levels: 2,
            channels: vec![3, 4],
            kernel: 3,
            downsample: 2,
            cond_dim: 4,
            num_sources: 2,
        }
    }

    fn noise(seed: u64, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::row((0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    #[test]
    fn zero_output_layer_gives_zero_estimate() {
        let net = UNet::deterministic(UNetConfig::default()).unwrap();
        let mut p = net.init(0);
        for v in p.get_mut("out.w").unwrap().data_mut() {
            *v = 0.0;
        }
        let (est, feats) = det_forward(&net, &p, &noise(1, 1024), &Conditioning::source(2)).unwrap();
        assert!(est.data().iter().all(|&v| v == 0.0));
        assert_eq!(feats.levels.len(), 3);
    }

    #[test]
    fn forward_is_deterministic_and_bounded() {
        let net = UNet::deterministic(UNetConfig::default()).unwrap();
        let p = net.init(3);
        let x = noise(2, 2048);
        let cond = Conditioning::source(1);
        let (a, fa) = det_forward(&net, &p, &x, &cond).unwrap();
        let (b, fb) = det_forward(&net, &p, &x, &cond).unwrap();
        assert_eq!(a, b);
        assert_eq!(fa, fb);
        assert_eq!(a.shape(), x.shape());
        assert!(a.is_finite());
        assert!(a.rms() < 10.0 * x.rms(), "rms {}", a.rms());
        assert_eq!(net.init(3), p);
    }

    #[test]
    fn rejects_bad_lengths_and_labels() {
        let net = UNet::deterministic(UNetConfig::default()).unwrap();
        let p = net.init(0);
        assert!(det_forward(&net, &p, &noise(0, 1000), &Conditioning::source(0)).is_err());
        assert!(det_forward(&net, &p, &noise(0, 1024), &Conditioning::source(4)).is_err());
    }

    #[test]
    fn score_net_requires_features() {
        let cfg = small_cfg();
        let net = UNet::score(cfg.clone()).unwrap();
        let p = net.init(0);
        let empty = FeatureMaps { levels: vec![] };
        let r = score_forward(&net, &p, &noise(0, 8), &Conditioning::with_noise(0, 0.1), &empty);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn zero_core_reduces_to_skip_scaling() {
        let cfg = UNetConfig::default();
        let det = UNet::deterministic(cfg.clone()).unwrap();
        let dp = det.init(0);
        let model = ScoreModel {
            net: UNet::score(cfg).unwrap(),
            precond: Precond::Edm(EdmPrecondConfig::default()),
        };
        let sp = model.net.init(1);
        for n in [1024, 2048] {
            let mix = noise(5, n);
            let (_, feats) = det_forward(&det, &dp, &mix, &Conditioning::source(0)).unwrap();
            let x = noise(6, n);
            let out = model.denoise(&sp, &x, 0.3, 0, &feats).unwrap();
            assert_eq!(out.shape(), x.shape());
            let c = edm_coeffs(0.3, &EdmPrecondConfig::default()).unwrap();
            for (o, xv) in out.data().iter().zip(x.data()) {
                assert_eq!(*o, c.c_skip * xv);
            }
        }
    }

    #[test]
    fn ema_rates() {
        let mut a = Parameters::new();
        a.insert("w", Tensor::vector(vec![0.0, 2.0]));
        let mut b = Parameters::new();
        b.insert("w", Tensor::vector(vec![1.0, 1.0]));

        let mut t = a.clone();
        ema_update(&mut t, &b, 1.0).unwrap();
        assert_eq!(t, a);
        ema_update(&mut t, &b, 0.0).unwrap();
        assert_eq!(t, b);
        let mut t = a.clone();
        ema_update(&mut t, &b, 0.999).unwrap();
        assert!((t.get("w").unwrap().data()[0] - 0.001).abs() < 1e-15);

        let mut c = Parameters::new();
        c.insert("v", Tensor::vector(vec![1.0, 1.0]));
        assert!(matches!(ema_update(&mut t, &c, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn parameter_iteration_is_sorted() {
        let net = UNet::score(UNetConfig::default()).unwrap();
        let p = net.init(0);
        let names: Vec<_> = p.names().cloned().collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        assert_eq!(p.len(), net.param_shapes().len());
    }
}
