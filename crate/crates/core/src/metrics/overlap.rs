//! Energy-based overlap-ratio proxy.
//!
//! Frames are 25 ms with a 10 ms hop; each frame accounts for one hop of
//! time. Speech length is the union of frames where any source is active at
//! [`SPEECH_THRESHOLD`]; overlap length counts speech frames where two or
//! more sources are active at the reporting threshold. Speech length is
//! therefore the same for every reporting threshold, and overlap length (and
//! with it the ratio) can only shrink as the threshold rises.

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::check_lengths;
use crate::error::{Error, Result};
use crate::signal::{MelFilterbank, Waveform};

/// Mel bands the single-estimate proxy projects onto.
const PROJECTION_BANDS: usize = 40;

/// Neighbouring frames on each side stacked into one projection; shared
/// vowels make single frames of different talkers nearly collinear, their
/// timing does not.
const PROJECTION_CONTEXT: usize = 6;

/// Reporting thresholds, as a fraction of the utterance peak frame RMS.
pub const OVERLAP_THRESHOLDS: [f64; 2] = [0.3, 0.5];

/// Activity level defining speech length (20 dB below the peak frame).
pub const SPEECH_THRESHOLD: f64 = 0.1;

const FRAME_SECS: f64 = 0.025;
const HOP_SECS: f64 = 0.010;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub threshold: f64,
    pub speech_secs: f64,
    pub overlap_secs: f64,
    /// `overlap / speech`; 0 when there is no speech.
    pub ratio: f64,
}

impl OverlapStats {
    /// Pools several streams by summing lengths before taking the ratio.
    pub fn pooled(parts: &[OverlapStats]) -> Option<OverlapStats> {
        let first = parts.first()?;
        let speech: f64 = parts.iter().map(|p| p.speech_secs).sum();
        let overlap: f64 = parts.iter().map(|p| p.overlap_secs).sum();
        Some(OverlapStats {
            threshold: first.threshold,
            speech_secs: speech,
            overlap_secs: overlap,
            ratio: if speech > 0.0 { overlap / speech } else { 0.0 },
        })
    }
}

struct Framing {
    len: usize,
    hop: usize,
    count: usize,
}

impl Framing {
    fn new(samples: usize, sample_rate: u32) -> Self {
        let len = (FRAME_SECS * sample_rate as f64).round() as usize;
        let hop = (HOP_SECS * sample_rate as f64).round() as usize;
        let count = if samples <= len { 1 } else { (samples - len) / hop + 1 };
        Self { len, hop, count }
    }

    fn frame<'a>(&self, x: &'a [f64], i: usize) -> &'a [f64] {
        let lo = (i * self.hop).min(x.len());
        &x[lo..(lo + self.len).min(x.len())]
    }

    fn rms(&self, x: &[f64]) -> Vec<f64> {
        (0..self.count)
            .map(|i| {
                let f = self.frame(x, i);
                (f.iter().map(|v| v * v).sum::<f64>() / self.len as f64).sqrt()
            })
            .collect()
    }
}

/// Per-frame activity levels for each source, plus the peak used as the
/// reference level.
struct Levels {
    per_source: Vec<Vec<f64>>,
    peak: f64,
    hop_secs: f64,
}

fn stats_from_levels(levels: &Levels, threshold: f64) -> OverlapStats {
    let frames = levels.per_source.first().map_or(0, Vec::len);
    let (mut speech, mut overlap) = (0usize, 0usize);
    if levels.peak > 0.0 {
        for n in 0..frames {
            let active = |t: f64| {
                levels
                    .per_source
                    .iter()
                    .filter(|s| s[n] > t * levels.peak)
                    .count()
            };
            if active(SPEECH_THRESHOLD) >= 1 {
                speech += 1;
                if active(threshold) >= 2 {
                    overlap += 1;
                }
            }
        }
    }
    let speech_secs = speech as f64 * levels.hop_secs;
    let overlap_secs = overlap as f64 * levels.hop_secs;
    OverlapStats {
        threshold,
        speech_secs,
        overlap_secs,
        ratio: if speech > 0 { overlap_secs / speech_secs } else { 0.0 },
    }
}

/// Stem-based proxy: `K ≥ 2` aligned streams, each judged against its own
/// peak frame RMS.
pub fn overlap_ratio(streams: &[Waveform], threshold: f64) -> Result<OverlapStats> {
    Ok(overlap_ratio_multi(streams, &[threshold])?.remove(0))
}

pub fn overlap_ratio_multi(streams: &[Waveform], thresholds: &[f64]) -> Result<Vec<OverlapStats>> {
    if streams.len() < 2 {
        return Err(Error::StreamCountMismatch {
            expected: 2,
            found: streams.len(),
        });
    }
    let len = streams[0].len();
    for s in streams {
        check_lengths(len, s.len())?;
    }
    let framing = Framing::new(len, streams[0].sample_rate());
    // normalize each stream by its own peak so one common peak of 1 applies
    let per_source = streams
        .iter()
        .map(|s| {
            let r = framing.rms(s.samples());
            let peak = r.iter().cloned().fold(0.0, f64::max);
            if peak > 0.0 {
                r.into_iter().map(|v| v / peak).collect()
            } else {
                r
            }
        })
        .collect();
    let levels = Levels {
        per_source,
        peak: 1.0,
        hop_secs: framing.hop as f64 / streams[0].sample_rate() as f64,
    };
    Ok(thresholds.iter().map(|&t| stats_from_levels(&levels, t)).collect())
}

/// Nonnegative least squares for a handful of columns by enumerating active
/// sets; returns the feasible solution with the smallest residual.
fn small_nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Vec<f64> {
    let k = a.ncols();
    let mut best = (b.norm_squared(), vec![0.0; k]);
    for mask in 1u32..(1 << k) {
        let cols: Vec<usize> = (0..k).filter(|&c| mask & (1 << c) != 0).collect();
        let sub = DMatrix::from_fn(a.nrows(), cols.len(), |r, c| a[(r, cols[c])]);
        let gram = sub.transpose() * &sub;
        let rhs = sub.transpose() * b;
        let Some(sol) = gram.lu().solve(&rhs) else {
            continue;
        };
        if sol.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            continue;
        }
        let resid = (&sub * &sol - b).norm_squared();
        if resid < best.0 {
            let mut x = vec![0.0; k];
            for (c, &v) in cols.iter().zip(sol.iter()) {
                x[*c] = v;
            }
            best = (resid, x);
        }
    }
    best.1
}

/// Single-estimate proxy: each frame's mel-band power, stacked with its
/// neighbours, is explained as a nonnegative mix of the references' stacked
/// mel-band powers, and source `k`
/// counts as present when its share `sqrt(a_k) · rms(ref_k)` exceeds the
/// threshold times the estimate's peak frame RMS.
pub fn overlap_ratio_against(
    estimate: &Waveform,
    references: &[Waveform],
    thresholds: &[f64],
) -> Result<Vec<OverlapStats>> {
    if references.is_empty() {
        return Err(Error::StreamCountMismatch {
            expected: 1,
            found: 0,
        });
    }
    for r in references {
        check_lengths(estimate.len(), r.len())?;
    }
    let sr = estimate.sample_rate();
    let framing = Framing::new(estimate.len(), sr);
    let nfft = framing.len.next_power_of_two();
    let fft = FftPlanner::new().plan_fft_forward(nfft);
    let window: Vec<f64> = (0..framing.len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / framing.len as f64).cos())
        .collect();
    let bins = nfft / 2 + 1;
    let fb = MelFilterbank::new(sr, nfft, PROJECTION_BANDS, 0.0, sr as f64 / 2.0)?;
    let spectra = |x: &[f64]| -> Vec<Vec<f64>> {
        (0..framing.count)
            .map(|i| {
                let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
                for ((c, v), w) in buf.iter_mut().zip(framing.frame(x, i)).zip(&window) {
                    c.re = v * w;
                }
                fft.process(&mut buf);
                let power = ndarray::Array1::from_iter(buf[..bins].iter().map(|c| c.norm_sqr()));
                fb.weights().dot(&power).to_vec()
            })
            .collect()
    };
    let stacked = |s: &[Vec<f64>], n: usize| -> DVector<f64> {
        let lo = n.saturating_sub(PROJECTION_CONTEXT);
        let hi = (n + PROJECTION_CONTEXT + 1).min(s.len());
        DVector::from_iterator((hi - lo) * PROJECTION_BANDS, s[lo..hi].iter().flatten().copied())
    };

    let est_rms = framing.rms(estimate.samples());
    let peak = est_rms.iter().cloned().fold(0.0, f64::max);
    let ref_rms: Vec<Vec<f64>> = references.iter().map(|r| framing.rms(r.samples())).collect();
    let est_spec = spectra(estimate.samples());
    let ref_spec: Vec<Vec<Vec<f64>>> = references.iter().map(|r| spectra(r.samples())).collect();
    let k = references.len();
    let mut per_source = vec![vec![0.0; framing.count]; k];
    for n in 0..framing.count {
        if est_rms[n] == 0.0 {
            continue;
        }
        let target = stacked(&est_spec, n);
        let cols: Vec<DVector<f64>> = ref_spec.iter().map(|s| stacked(s, n)).collect();
        let a = DMatrix::from_columns(&cols);
        let coef = small_nnls(&a, &target);
        for s in 0..k {
            per_source[s][n] = coef[s].sqrt() * ref_rms[s][n];
        }
    }
    let levels = Levels {
        per_source,
        peak,
        hop_secs: framing.hop as f64 / sr as f64,
    };
    Ok(thresholds.iter().map(|&t| stats_from_levels(&levels, t)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(len: usize, f: f64, on: impl Fn(usize) -> bool) -> Waveform {
        Waveform::new(
            (0..len)
                .map(|i| if on(i) { (2.0 * std::f64::consts::PI * f * i as f64 / 8000.0).sin() } else { 0.0 })
                .collect(),
            8000,
        )
        .unwrap()
    }

    #[test]
    fn disjoint_and_identical() {
        let a = tone(16000, 300.0, |i| i < 8000);
        let b = tone(16000, 500.0, |i| i >= 8000);
        let r = overlap_ratio(&[a.clone(), b], 0.3).unwrap();
        assert!(r.ratio < 0.02, "{r:?}");
        let same = overlap_ratio(&[a.clone(), a.clone()], 0.3).unwrap();
        assert_eq!(same.ratio, 1.0);
        let silent = Waveform::zeros(16000, 8000).unwrap();
        assert_eq!(overlap_ratio(&[silent.clone(), silent], 0.3).unwrap().ratio, 0.0);
    }

    #[test]
    fn projected_mode_separates_clean_from_mixed() {
        let a = tone(16000, 300.0, |_| true);
        let b = tone(16000, 1100.0, |i| i >= 4000);
        let mix = Waveform::new(a.samples().iter().zip(b.samples()).map(|(x, y)| x + y).collect(), 8000).unwrap();
        let refs = [a.clone(), b];
        let clean = overlap_ratio_against(&a, &refs, &OVERLAP_THRESHOLDS).unwrap();
        assert_eq!(clean[0].overlap_secs, 0.0);
        let mixed = overlap_ratio_against(&mix, &refs, &OVERLAP_THRESHOLDS).unwrap();
        assert!(mixed[0].ratio > 0.7, "{mixed:?}");
        assert!(mixed[1].ratio <= mixed[0].ratio);
    }

    #[test]
    fn nnls_recovers_nonnegative_mix() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, 3.0, 5.0]);
        let x = small_nnls(&a, &b);
        assert!((x[0] - 2.0).abs() < 1e-12 && (x[1] - 3.0).abs() < 1e-12);
        let neg = DVector::from_vec(vec![-1.0, 2.0, 1.0]);
        let y = small_nnls(&a, &neg);
        assert_eq!(y[0], 0.0);
        assert!(y[1] > 0.0);
    }
}
