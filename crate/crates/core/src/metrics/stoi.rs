//! Short-time objective intelligibility.
//!
//! Follows the published algorithm: 10 kHz internal rate, 256-sample frames
//! with 50% overlap, 512-point FFT, 15 one-third-octave bands from 150 Hz,
//! 30-frame (384 ms) segments, clipping at −15 dB signal-to-distortion, and
//! removal of frames more than 40 dB below the loudest reference frame.

use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::check_lengths;
use crate::error::{Error, Result};
use crate::signal::Waveform;

pub const STOI_RATE: u32 = 10_000;
const FRAME: usize = 256;
const HOP: usize = FRAME / 2;
const NFFT: usize = 512;
const BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
const SEGMENT: usize = 30;
const BETA_DB: f64 = -15.0;
const DYN_RANGE_DB: f64 = 40.0;
const EPS: f64 = f64::EPSILON;

/// Symmetric Hann without its zero end points (length `n`).
fn analysis_window(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n + 1) as f64).cos())
        .collect()
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let (mut sum, mut term, mut k) = (1.0, 1.0, 1.0);
    while term > 1e-17 * sum {
        term *= (x / (2.0 * k)) * (x / (2.0 * k));
        sum += term;
        k += 1.0;
    }
    sum
}

/// Polyphase rational resampling with a Kaiser-windowed sinc low-pass
/// (60 dB rejection, roll-off 10% of the cutoff), as in the reference
/// STOI implementation. Output sample `m` sits at input position
/// `m · from / to`; DC gain is one.
pub(crate) fn resample(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to {
        return x.to_vec();
    }
    let g = gcd(from as u64, to as u64);
    let (up, down) = ((to as u64 / g) as i64, (from as u64 / g) as i64);
    let cutoff = 1.0 / (2.0 * up.max(down) as f64);
    let rejection_db = 60.0;
    let half = ((rejection_db - 8.0) / (28.714 * cutoff / 10.0)).ceil() as i64;
    let beta = 0.1102 * (rejection_db - 8.7);
    let mut h: Vec<f64> = (-half..=half)
        .map(|d| {
            let arg = PI * 2.0 * cutoff * d as f64;
            let sinc = if d == 0 { 1.0 } else { arg.sin() / arg };
            let r = d as f64 / half as f64;
            let kaiser = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / bessel_i0(beta);
            kaiser * sinc
        })
        .collect();
    let norm = up as f64 / h.iter().sum::<f64>();
    h.iter_mut().for_each(|v| *v *= norm);

    let out_len = (x.len() as u64 * up as u64).div_ceil(down as u64) as usize;
    (0..out_len as i64)
        .map(|m| {
            // taps with |m·down − n·up| ≤ half
            let centre = m * down;
            let n_lo = (centre - half).div_euclid(up).max(0);
            let n_hi = ((centre + half).div_euclid(up)).min(x.len() as i64 - 1);
            (n_lo..=n_hi)
                .filter_map(|n| {
                    let d = centre - n * up;
                    (d.abs() <= half).then(|| h[(d + half) as usize] * x[n as usize])
                })
                .sum()
        })
        .collect()
}

fn frames(x: &[f64], window: &[f64]) -> Vec<Vec<f64>> {
    if x.len() <= FRAME {
        return Vec::new();
    }
    (0..x.len() - FRAME)
        .step_by(HOP)
        .map(|i| x[i..i + FRAME].iter().zip(window).map(|(a, w)| a * w).collect())
        .collect()
}

fn overlap_add(frames: &[&Vec<f64>]) -> Vec<f64> {
    if frames.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; (frames.len() - 1) * HOP + FRAME];
    for (i, f) in frames.iter().enumerate() {
        for (j, v) in f.iter().enumerate() {
            out[i * HOP + j] += v;
        }
    }
    out
}

fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let window = analysis_window(FRAME);
    let xf = frames(x, &window);
    let yf = frames(y, &window);
    let energies: Vec<f64> = xf
        .iter()
        .map(|f| 20.0 * (f.iter().map(|v| v * v).sum::<f64>().sqrt() + EPS).log10())
        .collect();
    let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = (0..xf.len())
        .filter(|&i| max - DYN_RANGE_DB - energies[i] < 0.0)
        .collect();
    let xs: Vec<&Vec<f64>> = keep.iter().map(|&i| &xf[i]).collect();
    let ys: Vec<&Vec<f64>> = keep.iter().map(|&i| &yf[i]).collect();
    (overlap_add(&xs), overlap_add(&ys))
}

/// Power spectrogram, bins × frames.
fn power_spectrogram(x: &[f64], planner: &mut FftPlanner<f64>) -> Array2<f64> {
    let window = analysis_window(FRAME);
    let fft = planner.plan_fft_forward(NFFT);
    let fr = frames(x, &window);
    let bins = NFFT / 2 + 1;
    let mut out = Array2::zeros((bins, fr.len()));
    let mut buf = vec![Complex64::new(0.0, 0.0); NFFT];
    for (t, f) in fr.iter().enumerate() {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (c, v) in buf.iter_mut().zip(f) {
            c.re = *v;
        }
        fft.process(&mut buf);
        for b in 0..bins {
            out[[b, t]] = buf[b].norm_sqr();
        }
    }
    out
}

/// One-third-octave band matrix, bands × bins.
fn third_octave_bands() -> Array2<f64> {
    let bins = NFFT / 2 + 1;
    let freqs: Vec<f64> = (0..bins)
        .map(|b| b as f64 * STOI_RATE as f64 / NFFT as f64)
        .collect();
    let closest = |target: f64| {
        freqs
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, &f)| {
                let d = (f - target) * (f - target);
                if d < best.1 {
                    (i, d)
                } else {
                    best
                }
            })
            .0
    };
    let mut obm = Array2::zeros((BANDS, bins));
    for k in 0..BANDS {
        let lo = MIN_FREQ * 2f64.powf((2.0 * k as f64 - 1.0) / 6.0);
        let hi = MIN_FREQ * 2f64.powf((2.0 * k as f64 + 1.0) / 6.0);
        for b in closest(lo)..closest(hi) {
            obm[[k, b]] = 1.0;
        }
    }
    obm
}

fn band_envelopes(power: &Array2<f64>, obm: &Array2<f64>) -> Array2<f64> {
    obm.dot(power).mapv(f64::sqrt)
}

fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let mean = row.mean().unwrap_or(0.0);
        row.mapv_inplace(|v| v - mean);
        let norm = row.dot(&row).sqrt() + EPS;
        row.mapv_inplace(|v| v / norm);
    }
}

/// STOI of `estimate` against `reference`, in `[-1, 1]`.
pub fn stoi(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    check_lengths(estimate.len(), reference.len())?;
    if estimate.sample_rate() != reference.sample_rate() {
        return Err(Error::InvalidWaveform("sample rates differ".into()));
    }
    let sr = reference.sample_rate();
    let x = resample(reference.samples(), sr, STOI_RATE);
    let y = resample(estimate.samples(), sr, STOI_RATE);
    let (x, y) = remove_silent_frames(&x, &y);

    let mut planner = FftPlanner::new();
    let obm = third_octave_bands();
    let x_tob = band_envelopes(&power_spectrogram(&x, &mut planner), &obm);
    let y_tob = band_envelopes(&power_spectrogram(&y, &mut planner), &obm);
    let n_frames = x_tob.ncols();
    if n_frames < SEGMENT {
        return Err(Error::TooShort(format!(
            "STOI needs {SEGMENT} active frames (384 ms), got {n_frames}"
        )));
    }

    let clip = 10f64.powf(-BETA_DB / 20.0);
    let mut total = 0.0;
    let segments = n_frames - SEGMENT + 1;
    for m in SEGMENT..=n_frames {
        let mut xs = x_tob.slice(ndarray::s![.., m - SEGMENT..m]).to_owned();
        let ys = y_tob.slice(ndarray::s![.., m - SEGMENT..m]);
        let mut yp = Array2::zeros((BANDS, SEGMENT));
        for j in 0..BANDS {
            let xn = xs.row(j).dot(&xs.row(j)).sqrt();
            let yn = ys.row(j).dot(&ys.row(j)).sqrt();
            let norm = xn / (yn + EPS);
            for t in 0..SEGMENT {
                yp[[j, t]] = (ys[[j, t]] * norm).min(xs[[j, t]] * (1.0 + clip));
            }
        }
        normalize_rows(&mut xs);
        normalize_rows(&mut yp);
        total += (&xs * &yp).sum();
    }
    Ok(total / (BANDS * segments) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Harmonic syllables with raised-sine envelopes and every fourth one
    /// silent, mirrored exactly by the reference values below.
    fn syllables(sr: u32) -> Vec<f64> {
        let n = sr as usize / 5;
        let mut x = vec![0.0; 2 * sr as usize];
        for s in 0..10 {
            if s % 4 == 3 {
                continue;
            }
            let f0 = 100.0 + 20.0 * s as f64;
            for i in 0..n {
                let t = (s * n + i) as f64 / sr as f64;
                let env = (PI * i as f64 / n as f64).sin();
                x[s * n + i] = env * (1..8).map(|h| (2.0 * PI * f0 * h as f64 * t).sin() / h as f64).sum::<f64>();
            }
        }
        x
    }

    /// 64-bit LCG mapped to `[-1, 1)`.
    fn lcg(len: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            })
            .collect()
    }

    fn wave(v: Vec<f64>, sr: u32) -> Waveform {
        Waveform::new(v, sr).unwrap()
    }

    #[test]
    fn matches_reference_implementation_at_native_rate() {
        // values from the widely used Python implementation on the same signals
        let x = syllables(10_000);
        let y = lcg(x.len(), 7);
        let z: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + 0.5 * b).collect();
        let noise = stoi(&wave(y, 10_000), &wave(x.clone(), 10_000)).unwrap();
        let noisy = stoi(&wave(z, 10_000), &wave(x, 10_000)).unwrap();
        assert!((noise - 0.2110938071158064).abs() < 1e-9, "{noise}");
        assert!((noisy - 0.7017203671487362).abs() < 1e-9, "{noisy}");
    }

    #[test]
    fn resampler_preserves_low_tone() {
        let x: Vec<f64> = (0..8000).map(|i| (2.0 * PI * 440.0 * i as f64 / 8000.0).sin()).collect();
        let y = resample(&x, 8000, 10000);
        assert_eq!(y.len(), 10000);
        for m in 200..9800 {
            let want = (2.0 * PI * 440.0 * m as f64 / 10000.0).sin();
            assert!((y[m] - want).abs() < 1e-3, "{m}: {} vs {want}", y[m]);
        }
        let z = resample(&x, 16000, 10000);
        assert_eq!(z.len(), 5000);
    }

    #[test]
    fn identical_signals_score_one() {
        let x = wave(syllables(8000), 8000);
        let d = stoi(&x, &x).unwrap();
        assert!(d > 0.99, "{d}");
        let scaled = stoi(&x.scaled(0.1), &x).unwrap();
        assert!((scaled - d).abs() < 1e-9);
    }

    #[test]
    fn resampled_path_tracks_reference_and_rejects_noise() {
        let x = syllables(8000);
        let y = lcg(x.len(), 7);
        let z: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + 0.5 * b).collect();
        let noise = stoi(&wave(y, 8000), &wave(x.clone(), 8000)).unwrap();
        let noisy = stoi(&wave(z, 8000), &wave(x, 8000)).unwrap();
        // same reference implementation, through its resampler
        assert!(noise < 0.2, "{noise}");
        assert!((noise - 0.19134772035935002).abs() < 1e-6, "{noise}");
        assert!((noisy - 0.6633207265266048).abs() < 1e-6, "{noisy}");
    }

    #[test]
    fn too_short_is_an_error() {
        let x = wave(syllables(8000)[..2000].to_vec(), 8000);
        assert!(matches!(stoi(&x, &x), Err(Error::TooShort(_))));
    }
}
