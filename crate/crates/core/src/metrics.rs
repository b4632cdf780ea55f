//! Scale-invariant SDR and the windowed evaluation protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use crate::data::{chunk_stream, filter_eval_chunks, rms, Example, ACTIVE_RMS, NUM_SOURCES};
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Values are clamped to `±SI_SDR_CAP` dB so zero-error cases stay finite.
pub const SI_SDR_CAP: f64 = 100.0;

pub const SWEEP_HEADER: &str = "sigma_max,steps,si_sdri_avg";

pub fn si_sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::Contract(format!(
            "estimate has {} samples, reference {}",
            estimate.len(),
            reference.len()
        )));
    }
    let ref_energy = dot(reference, reference);
    if ref_energy == 0.0 {
        return Err(Error::UndefinedMetric("reference is all zeros".into()));
    }
    let alpha = dot(estimate, reference) / ref_energy;
    let (mut target, mut error) = (0.0, 0.0);
    for (&e, &r) in estimate.iter().zip(reference) {
        let t = alpha * r;
        target += t * t;
        error += (e - t) * (e - t);
    }
    if target == 0.0 {
        return Ok(-SI_SDR_CAP);
    }
    if error == 0.0 {
        return Ok(SI_SDR_CAP);
    }
    Ok((10.0 * (target / error).log10()).clamp(-SI_SDR_CAP, SI_SDR_CAP))
}

pub fn si_sdr_i(estimate: &[f64], reference: &[f64], mixture: &[f64]) -> Result<f64> {
    if mixture.len() != reference.len() {
        return Err(Error::Contract("mixture and reference lengths differ".into()));
    }
    Ok(si_sdr(estimate, reference)? - si_sdr(mixture, reference)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_stem_si_sdri: BTreeMap<usize, f64>,
    pub avg_si_sdri: f64,
    pub chunks_evaluated: usize,
    pub inference_seconds: f64,
    pub rtf: f64,
}

impl EvalReport {
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        writeln!(s, "avg_si_sdri={:.6}", self.avg_si_sdri).unwrap();
        for (k, v) in &self.per_stem_si_sdri {
            writeln!(s, "si_sdri_{k}={v:.6}").unwrap();
        }
        writeln!(s, "chunks_evaluated={}", self.chunks_evaluated).unwrap();
        writeln!(s, "inference_seconds={:.6}", self.inference_seconds).unwrap();
        writeln!(s, "rtf={:.6}", self.rtf).unwrap();
        s
    }

    pub fn csv_header() -> String {
        let mut h = String::from("avg_si_sdri");
        for s in 0..NUM_SOURCES {
            write!(h, ",si_sdri_{s}").unwrap();
        }
        h.push_str(",chunks_evaluated,inference_seconds,rtf");
        h
    }

    /// Stems without any evaluated chunk are left empty.
    pub fn to_csv_row(&self) -> String {
        let mut r = format!("{:.6}", self.avg_si_sdri);
        for s in 0..NUM_SOURCES {
            match self.per_stem_si_sdri.get(&s) {
                Some(v) => write!(r, ",{v:.6}").unwrap(),
                None => r.push(','),
            }
        }
        write!(r, ",{},{:.6},{:.6}", self.chunks_evaluated, self.inference_seconds, self.rtf).unwrap();
        r
    }
}

/// One row of a noise-level / step-count sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub sigma_max: f64,
    pub steps: usize,
    pub si_sdri_avg: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{},{},{:.6}", r.sigma_max, r.steps, r.si_sdri_avg).unwrap();
    }
    s
}

/// Sum in a fixed order so the result does not depend on evaluation order.
fn ordered_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Identifies one evaluation chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChunkKey {
    pub example: u64,
    pub chunk: usize,
}

/// Runs `extract(mix_chunk, source)` over every kept chunk of `examples`.
///
/// Chunks with fewer than two active sources are skipped, as are stems that
/// are silent within a kept chunk. Only time spent inside `extract` counts
/// towards `inference_seconds`.
pub fn evaluate_model<F>(
    mut extract: F,
    examples: &[Example],
    window: usize,
    hop: usize,
    sample_rate: u32,
) -> Result<EvalReport>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    evaluate_chunks(|_, mix, s| extract(mix, s), examples, window, hop, sample_rate)
}

/// [`evaluate_model`] with the chunk identity passed to the extractor.
pub fn evaluate_chunks<F>(
    mut extract: F,
    examples: &[Example],
    window: usize,
    hop: usize,
    sample_rate: u32,
) -> Result<EvalReport>
where
    F: FnMut(ChunkKey, &Tensor, usize) -> Result<Tensor>,
{
    let mut scores: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut chunks_evaluated = 0usize;
    let mut seconds = 0.0;
    for (key, mix, refs) in kept_chunks(examples, window, hop)? {
        for (s, reference) in refs.iter().enumerate() {
            let Some(reference) = reference else { continue };
            let start = Instant::now();
            let est = extract(key, &mix, s)?;
            seconds += start.elapsed().as_secs_f64();
            if est.len() != reference.len() {
                return Err(Error::Contract(format!(
                    "extractor returned {} samples for a {}-sample chunk",
                    est.len(),
                    reference.len()
                )));
            }
            let v = si_sdr_i(est.data(), reference, mix.data())?;
            scores.entry(s).or_default().push(v);
        }
        chunks_evaluated += 1;
    }
    if chunks_evaluated == 0 {
        return Err(Error::EmptyEvaluation(
            "no chunk has two or more active sources".into(),
        ));
    }
    let per_stem_si_sdri: BTreeMap<usize, f64> = scores
        .into_iter()
        .map(|(s, mut v)| (s, ordered_mean(&mut v)))
        .collect();
    let mut stem_means: Vec<f64> = per_stem_si_sdri.values().copied().collect();
    let audio_seconds = chunks_evaluated as f64 * window as f64 / sample_rate as f64;
    Ok(EvalReport {
        avg_si_sdri: ordered_mean(&mut stem_means),
        per_stem_si_sdri,
        chunks_evaluated,
        inference_seconds: seconds,
        rtf: seconds / audio_seconds,
    })
}

/// Mixture chunk and the active per-source references of every chunk that
/// passes the two-source filter.
#[allow(clippy::type_complexity)]
pub fn kept_chunks(
    examples: &[Example],
    window: usize,
    hop: usize,
) -> Result<Vec<(ChunkKey, Tensor, Vec<Option<Vec<f64>>>)>> {
    let mut out = Vec::new();
    for ex in examples {
        let stems: Vec<Tensor> = (0..NUM_SOURCES).map(|s| ex.stem(s)).collect();
        let per_source: Vec<Vec<&[f64]>> = stems
            .iter()
            .map(|t| chunk_stream(t.data(), window, hop))
            .collect::<Result<_>>()?;
        let mix_chunks = chunk_stream(ex.mix.data(), window, hop)?;
        for k in filter_eval_chunks(&per_source)? {
            let refs = per_source
                .iter()
                .map(|c| (rms(c[k]) >= ACTIVE_RMS).then(|| c[k].to_vec()))
                .collect();
            let key = ChunkKey {
                example: ex.idx,
                chunk: k,
            };
            out.push((key, Tensor::row(mix_chunks[k].to_vec()), refs));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_example, DatasetConfig};
    use proptest::prelude::*;

    #[test]
    fn hand_computed_values() {
        assert_eq!(si_sdr(&[1.0, 1.0], &[1.0, 0.0]).unwrap(), 0.0);
        let r = [0.3, -0.2, 0.9];
        assert_eq!(si_sdr(&r, &r).unwrap(), SI_SDR_CAP);
        assert_eq!(si_sdr(&[0.6, -0.4, 1.8], &r).unwrap(), SI_SDR_CAP);
        assert!(matches!(si_sdr(&r, &[0.0; 3]), Err(Error::UndefinedMetric(_))));
        assert!(si_sdr(&r, &[1.0]).is_err());
        assert_eq!(si_sdr(&[0.0; 3], &r).unwrap(), -SI_SDR_CAP);
    }

    #[test]
    fn improvement_examples() {
        let r = [0.3, -0.2, 0.9, 0.1];
        let m = [0.5, 0.1, 0.7, -0.3];
        assert_eq!(si_sdr_i(&m, &r, &m).unwrap(), 0.0);
        let gain = si_sdr_i(&r, &r, &m).unwrap();
        assert_eq!(gain, SI_SDR_CAP - si_sdr(&m, &r).unwrap());
        assert!(gain > 0.0);
        assert_eq!(si_sdr_i(&r, &r, &r).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn scale_invariance(
            est in prop::collection::vec(-1.0f64..1.0, 16),
            reference in prop::collection::vec(-1.0f64..1.0, 16),
            c in 1e-3f64..1e3,
        ) {
            prop_assume!(reference.iter().any(|v| v.abs() > 1e-3));
            let a = si_sdr(&est, &reference).unwrap();
            let scaled: Vec<f64> = est.iter().map(|v| v * c).collect();
            let b = si_sdr(&scaled, &reference).unwrap();
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }

    fn test_set() -> (Vec<Example>, DatasetConfig) {
        let cfg = DatasetConfig::default();
        ((100..108).map(|i| generate_example(0, i, &cfg)).collect(), cfg)
    }

    #[test]
    fn mixture_stub_scores_zero() {
        let (exs, cfg) = test_set();
        let r = evaluate_model(|m, _| Ok(m.clone()), &exs, cfg.chunk_len, cfg.chunk_len / 2, cfg.sample_rate).unwrap();
        assert_eq!(r.avg_si_sdri, 0.0);
        assert_eq!(r.chunks_evaluated, 8);
        assert!(r.rtf >= 0.0);
    }

    #[test]
    fn oracle_stub_scores_cap_minus_mixture() {
        let (exs, cfg) = test_set();
        let n = cfg.chunk_len;
        // One chunk per example, so the stem can be looked up by mixture.
        let lookup = |m: &Tensor, s: usize| {
            let ex = exs.iter().find(|e| e.mix.data() == m.data()).unwrap();
            Ok(ex.stem(s))
        };
        let r = evaluate_model(lookup, &exs, n, n / 2, cfg.sample_rate).unwrap();
        let mut per: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for ex in &exs {
            for s in 0..NUM_SOURCES {
                if ex.stem(s).rms() >= ACTIVE_RMS {
                    per.entry(s).or_default().push(si_sdr(ex.mix.data(), ex.stem(s).data()).unwrap());
                }
            }
        }
        let mut want = 0.0;
        for v in per.values() {
            want += SI_SDR_CAP - v.iter().sum::<f64>() / v.len() as f64;
        }
        want /= per.len() as f64;
        assert!((r.avg_si_sdri - want).abs() < 1e-9);
    }

    #[test]
    fn order_of_examples_does_not_matter() {
        let (mut exs, cfg) = test_set();
        let extract = |m: &Tensor, s: usize| Ok(m.scale(0.2 + 0.1 * s as f64).map(|v| v.tanh()));
        let n = cfg.chunk_len;
        let a = evaluate_model(extract, &exs, n, n / 2, cfg.sample_rate).unwrap();
        exs.reverse();
        let b = evaluate_model(extract, &exs, n, n / 2, cfg.sample_rate).unwrap();
        assert_eq!(a.per_stem_si_sdri, b.per_stem_si_sdri);
        assert_eq!(a.avg_si_sdri, b.avg_si_sdri);
    }

    #[test]
    fn empty_evaluation_is_reported() {
        let cfg = DatasetConfig { silence_prob: 1.0, ..DatasetConfig::default() };
        let exs = vec![generate_example(0, 0, &cfg)];
        let r = evaluate_model(|m, _| Ok(m.clone()), &exs, 2048, 1024, 8000);
        assert!(matches!(r, Err(Error::EmptyEvaluation(_))));
    }

    #[test]
    fn serializations() {
        let report = EvalReport {
            per_stem_si_sdri: [(0, 1.5), (2, -0.5)].into_iter().collect(),
            avg_si_sdri: 0.5,
            chunks_evaluated: 3,
            inference_seconds: 0.25,
            rtf: 0.1,
        };
        assert!(report.to_key_values().contains("si_sdri_2=-0.500000\n"));
        assert_eq!(report.to_csv_row(), "0.500000,1.500000,,-0.500000,,3,0.250000,0.100000");
        assert_eq!(EvalReport::csv_header().split(',').count(), report.to_csv_row().split(',').count());
        let csv = sweep_csv(&[SweepRow { sigma_max: 0.01, steps: 2, si_sdri_avg: 3.25 }]);
        assert_eq!(csv, "sigma_max,steps,si_sdri_avg\n0.01,2,3.250000\n");
    }
}
