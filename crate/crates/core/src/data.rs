//! Synthetic four-stem mixtures, chunking and the evaluation chunk filter.
//!
//! Each example is a pure function of `(seed, idx)`. Stems are generated in
//! source order, soft-clipped to `±1/S` and summed in ascending order, so the
//! mixture is bounded by 1 and equals the stem sum bit for bit.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_SOURCES: usize = 4;

/// A stem counts as present when its RMS reaches this level (-80 dBFS).
pub const ACTIVE_RMS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    SawtoothBass,
    NoiseBurstPercussion,
    SquareLead,
    SineChord,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StemSpec {
    pub source: usize,
    pub family: Family,
    /// Pitch range of the fundamental in Hz, or the full band for percussion.
    pub band: (f64, f64),
    /// Highest partial the generator emits, in Hz.
    pub max_partial: f64,
    /// Per-event peak amplitude range before the soft clip.
    pub amplitude: (f64, f64),
}

pub const STEMS: [StemSpec; NUM_SOURCES] = [
    StemSpec {
        source: 0,
        family: Family::SawtoothBass,
        band: (40.0, 200.0),
        max_partial: 400.0,
        amplitude: (0.15, 0.3),
    },
    StemSpec {
        source: 1,
        family: Family::NoiseBurstPercussion,
        band: (0.0, 4000.0),
        max_partial: 4000.0,
        amplitude: (0.15, 0.3),
    },
    StemSpec {
        source: 2,
        family: Family::SquareLead,
        band: (400.0, 2000.0),
        max_partial: 2000.0,
        amplitude: (0.1, 0.2),
    },
    StemSpec {
        source: 3,
        family: Family::SineChord,
        band: (200.0, 1200.0),
        max_partial: 1200.0,
        amplitude: (0.05, 0.1),
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub sample_rate: u32,
    pub chunk_len: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub silence_prob: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            chunk_len: 2048,
            train: 512,
            val: 16,
            test: 64,
            seed: 0,
            silence_prob: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self, stride: usize) -> Result<()> {
        if self.sample_rate == 0 || self.chunk_len == 0 {
            return Err(Error::Config("sample_rate and chunk_len must be positive".into()));
        }
        if self.chunk_len % stride != 0 {
            return Err(Error::Config(format!(
                "chunk_len {} not divisible by network stride {stride}",
                self.chunk_len
            )));
        }
        if !(0.0..=1.0).contains(&self.silence_prob) {
            return Err(Error::Config(format!("silence_prob {} outside [0, 1]", self.silence_prob)));
        }
        Ok(())
    }

    /// Example indices of a split; splits are consecutive and disjoint.
    pub fn indices(&self, split: Split) -> Range<u64> {
        let (a, b, c) = (self.train as u64, self.val as u64, self.test as u64);
        match split {
            Split::Train => 0..a,
            Split::Val => a..a + b,
            Split::Test => a + b..a + b + c,
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.chunk_len as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub idx: u64,
    /// `[S, N]`
    pub stems: Tensor,
    /// `[1, N]`
    pub mix: Tensor,
    pub active: [bool; NUM_SOURCES],
}

impl Example {
    pub fn stem(&self, s: usize) -> Tensor {
        let n = self.mix.len();
        Tensor::row(self.stems.data()[s * n..(s + 1) * n].to_vec())
    }
}

pub fn generate_example(seed: u64, idx: u64, cfg: &DatasetConfig) -> Example {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(idx);
    let n = cfg.chunk_len;
    let sr = cfg.sample_rate as f64;
    let clip = NUM_SOURCES as f64;

    let mut stems = Vec::with_capacity(NUM_SOURCES * n);
    let mut active = [false; NUM_SOURCES];
    for spec in &STEMS {
        // Always consume the same draws so one stem's silence does not shift
        // the others.
        let silent = rng.gen::<f64>() < cfg.silence_prob;
        let raw = render(spec, n, sr, &mut rng);
        if silent {
            stems.extend(std::iter::repeat(0.0).take(n));
        } else {
            stems.extend(raw.iter().map(|&v| (clip * v).tanh() / clip));
            active[spec.source] = true;
        }
    }
    let mut mix = vec![0.0; n];
    for s in 0..NUM_SOURCES {
        for (m, v) in mix.iter_mut().zip(&stems[s * n..(s + 1) * n]) {
            *m += v;
        }
    }
    Example {
        idx,
        stems: Tensor::new(vec![NUM_SOURCES, n], stems).expect("shape"),
        mix: Tensor::row(mix),
        active,
    }
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

/// Linear fade in and out over `ramp` samples.
fn envelope(i: usize, len: usize, ramp: usize) -> f64 {
    let ramp = ramp.min(len / 2).max(1);
    if i < ramp {
        i as f64 / ramp as f64
    } else if i + ramp > len {
        (len - i) as f64 / ramp as f64
    } else {
        1.0
    }
}

/// Splits `[0, n)` into `count` consecutive note spans.
fn note_spans<R: Rng>(rng: &mut R, n: usize, count: usize) -> Vec<Range<usize>> {
    let mut cuts: Vec<usize> = (1..count).map(|_| rng.gen_range(n / 8..n - n / 8)).collect();
    cuts.sort_unstable();
    let mut spans = Vec::with_capacity(count);
    let mut start = 0;
    for c in cuts.into_iter().chain(std::iter::once(n)) {
        if c > start {
            spans.push(start..c);
            start = c;
        }
    }
    spans
}

fn render<R: Rng>(spec: &StemSpec, n: usize, sr: f64, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let ramp = (0.01 * sr) as usize;
    match spec.family {
        Family::SawtoothBass | Family::SquareLead => {
            let count = rng.gen_range(1..=3);
            for span in note_spans(rng, n, count) {
                let f0 = log_uniform(rng, spec.band.0, spec.band.1);
                let amp = rng.gen_range(spec.amplitude.0..spec.amplitude.1);
                let phase = rng.gen_range(0.0..TAU);
                let square = spec.family == Family::SquareLead;
                let len = span.len();
                for (j, i) in span.enumerate() {
                    let t = i as f64 / sr;
                    let mut v = 0.0;
                    let mut k = 1usize;
                    while k as f64 * f0 <= spec.max_partial || k == 1 {
                        let arg = TAU * k as f64 * f0 * t + k as f64 * phase;
                        v += if square {
                            (4.0 / PI) * arg.sin() / k as f64
                        } else {
                            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                            (2.0 / PI) * sign * arg.sin() / k as f64
                        };
                        k += if square { 2 } else { 1 };
                    }
                    out[i] = amp * envelope(j, len, ramp) * v;
                }
            }
        }
        Family::NoiseBurstPercussion => {
            let count = rng.gen_range(2..=5);
            for _ in 0..count {
                let onset = rng.gen_range(0..n - n / 8);
                let amp = rng.gen_range(spec.amplitude.0..spec.amplitude.1);
                let decay = rng.gen_range(0.01..0.06) * sr;
                let len = ((5.0 * decay) as usize).min(n - onset);
                for j in 0..len {
                    let e: f64 = StandardNormal.sample(rng);
                    let attack = (j as f64 / 8.0).min(1.0);
                    out[onset + j] += amp * attack * (-(j as f64) / decay).exp() * e;
                }
            }
        }
        Family::SineChord => {
            const INTERVALS: [[f64; 3]; 3] = [
                [1.0, 5.0 / 4.0, 3.0 / 2.0],
                [1.0, 6.0 / 5.0, 3.0 / 2.0],
                [1.0, 4.0 / 3.0, 5.0 / 3.0],
            ];
            let count = rng.gen_range(1..=2);
            for span in note_spans(rng, n, count) {
                let root = log_uniform(rng, spec.band.0, spec.band.1 / 2.0);
                let shape = INTERVALS[rng.gen_range(0..INTERVALS.len())];
                let voices: Vec<(f64, f64, f64)> = shape
                    .iter()
                    .map(|r| {
                        (
                            (root * r).min(spec.max_partial),
                            rng.gen_range(spec.amplitude.0..spec.amplitude.1),
                            rng.gen_range(0.0..TAU),
                        )
                    })
                    .collect();
                let len = span.len();
                for (j, i) in span.enumerate() {
                    let t = i as f64 / sr;
                    let env = envelope(j, len, 4 * ramp);
                    out[i] = env
                        * voices
                            .iter()
                            .map(|&(f, a, p)| a * (TAU * f * t + p).sin())
                            .sum::<f64>();
                }
            }
        }
    }
    out
}

/// Full windows of `track` starting at `0, hop, 2·hop, ...`.
///
/// A window longer than the track yields no chunks.
pub fn chunk_stream(track: &[f64], window: usize, hop: usize) -> Result<Vec<&[f64]>> {
    if window == 0 || hop == 0 {
        return Err(Error::Range(format!("window {window} and hop {hop} must be positive")));
    }
    if window > track.len() {
        log::warn!("window {window} exceeds track length {}", track.len());
        return Ok(Vec::new());
    }
    Ok((0..=(track.len() - window) / hop)
        .map(|k| &track[k * hop..k * hop + window])
        .collect())
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Chunk indices where at least two sources are active.
///
/// `stem_chunks[s][k]` is chunk `k` of source `s`.
pub fn filter_eval_chunks(stem_chunks: &[Vec<&[f64]>]) -> Result<Vec<usize>> {
    let count = stem_chunks.first().map_or(0, Vec::len);
    if stem_chunks.iter().any(|c| c.len() != count) {
        return Err(Error::Contract("per-source chunk lists differ in length".into()));
    }
    Ok((0..count)
        .filter(|&k| {
            stem_chunks
                .iter()
                .filter(|chunks| rms(chunks[k]) >= ACTIVE_RMS)
                .count()
                >= 2
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub idx: u64,
    pub seed: u64,
    pub active: [bool; NUM_SOURCES],
}

pub fn manifest_line(e: &ManifestEntry) -> String {
    let mut s = format!("{}\t{}", e.idx, e.seed);
    for a in e.active {
        write!(s, "\t{}", u8::from(a)).expect("string write");
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = || Error::Config(format!("manifest line {}: {line:?}", n + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 2 + NUM_SOURCES {
                return Err(bad());
            }
            let mut active = [false; NUM_SOURCES];
            for (a, f) in active.iter_mut().zip(&fields[2..]) {
                *a = match *f {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad()),
                };
            }
            Ok(ManifestEntry {
                idx: fields[0].parse().map_err(|_| bad())?,
                seed: fields[1].parse().map_err(|_| bad())?,
                active,
            })
        })
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&manifest_line(e));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    parse_manifest(&fs::read_to_string(path)?)
}

/// Every example of a split, regenerated from the config.
pub fn split_examples(cfg: &DatasetConfig, split: Split) -> Vec<Example> {
    cfg.indices(split)
        .map(|i| generate_example(cfg.seed, i, cfg))
        .collect()
}
