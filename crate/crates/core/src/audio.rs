//! Mono WAV import and export.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Float32,
    Pcm16,
}

fn audio_err(path: &Path, e: hound::Error) -> Error {
    Error::Audio(format!("{}: {e}", path.display()))
}

pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32, enc: WavEncoding) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: match enc {
            WavEncoding::Float32 => 32,
            WavEncoding::Pcm16 => 16,
        },
        sample_format: match enc {
            WavEncoding::Float32 => SampleFormat::Float,
            WavEncoding::Pcm16 => SampleFormat::Int,
        },
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| audio_err(path, e))?;
    for &v in samples {
        match enc {
            WavEncoding::Float32 => w.write_sample(v as f32),
            WavEncoding::Pcm16 => w.write_sample((v * 32768.0).round().clamp(-32768.0, 32767.0) as i16),
        }
        .map_err(|e| audio_err(path, e))?;
    }
    w.finalize().map_err(|e| audio_err(path, e))
}

/// Reads a mono WAV as `f64` in `[-1, 1]`; returns samples and sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let r = WavReader::open(path).map_err(|e| audio_err(path, e))?;
    let spec = r.spec();
    if spec.channels != 1 {
        return Err(Error::Audio(format!(
            "{}: expected mono, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => r
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<Vec<_>, _>>(),
        (SampleFormat::Int, bits @ 1..=32) => {
            let scale = (1u64 << (bits - 1)) as f64;
            r.into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect()
        }
        (fmt, bits) => {
            return Err(Error::Audio(format!(
                "{}: unsupported {fmt:?} at {bits} bits",
                path.display()
            )))
        }
    }
    .map_err(|e| audio_err(path, e))?;
    Ok((samples, spec.sample_rate))
}
