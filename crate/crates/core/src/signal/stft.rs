//! Hann-windowed short-time Fourier transform and its least-squares inverse.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    /// `num_frames × (window_size / 2 + 1)`
    pub frames: Array2<Complex64>,
    pub window_size: usize,
    pub hop: usize,
    pub original_length: usize,
    pub sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.frames.ncols()
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.frames.mapv(|c| c.norm())
    }

    pub fn power(&self) -> Array2<f64> {
        self.frames.mapv(|c| c.norm_sqr())
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            frames: self.frames.mapv(|c| c * alpha),
            ..self.clone()
        }
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Number of centered frames for a signal of `len` samples.
pub fn num_frames(len: usize, hop: usize) -> usize {
    len / hop + 1
}

/// Mirror index into `0..len` without repeating the edge sample.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= len as isize {
        m = period - m;
    }
    m as usize
}

/// Cached window and FFT plans for one `(window_size, hop)` pair.
#[derive(Clone)]
pub struct StftPlan {
    window_size: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan")
            .field("window_size", &self.window_size)
            .field("hop", &self.hop)
            .finish()
    }
}

impl StftPlan {
    pub fn new(window_size: usize, hop: usize) -> Result<Self> {
        if window_size < 2 || !window_size.is_power_of_two() {
            return Err(Error::InvalidTransform(format!(
                "window size {window_size} is not a power of two"
            )));
        }
        if hop == 0 || hop > window_size {
            return Err(Error::InvalidTransform(format!(
                "hop {hop} must be in 1..={window_size}"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            window_size,
            hop,
            window: hann(window_size),
            forward: planner.plan_fft_forward(window_size),
            inverse: planner.plan_fft_inverse(window_size),
        })
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn num_bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    /// Windowed one-sided spectrum of one frame of samples.
    fn analyze(&self, frame: impl Iterator<Item = f64>, out: &mut [Complex64]) {
        let mut buf: Vec<Complex64> = frame
            .zip(&self.window)
            .map(|(s, w)| Complex64::new(s * w, 0.0))
            .collect();
        self.forward.process(&mut buf);
        out.copy_from_slice(&buf[..self.num_bins()]);
    }

    /// Real inverse of a one-sided spectrum (length `window_size`).
    fn synthesize(&self, bins: &[Complex64]) -> Vec<f64> {
        let n = self.window_size;
        let mut full = vec![Complex64::new(0.0, 0.0); n];
        full[..bins.len()].copy_from_slice(bins);
        // DC and Nyquist must be real for a real signal
        full[0].im = 0.0;
        full[n / 2].im = 0.0;
        for k in 1..n / 2 {
            full[n - k] = bins[k].conj();
        }
        self.inverse.process(&mut full);
        full.iter().map(|c| c.re / n as f64).collect()
    }

    /// Centered STFT with reflect padding of `window_size / 2` on both sides.
    pub fn stft(&self, w: &Waveform) -> ComplexSpectrogram {
        let x = w.samples();
        let len = x.len();
        let pad = (self.window_size / 2) as isize;
        let frames_n = num_frames(len, self.hop);
        let mut frames = Array2::zeros((frames_n, self.num_bins()));
        for (n, mut row) in frames.rows_mut().into_iter().enumerate() {
            let start = (n * self.hop) as isize - pad;
            let samples = (0..self.window_size).map(|k| x[reflect(start + k as isize, len)]);
            self.analyze(samples, row.as_slice_mut().expect("contiguous"));
        }
        ComplexSpectrogram {
            frames,
            window_size: self.window_size,
            hop: self.hop,
            original_length: len,
            sample_rate: w.sample_rate(),
        }
    }

    /// Frames of an arbitrary signal without padding: frame `n` covers
    /// `x[n*hop .. n*hop + window_size]` (zeros past the end).
    pub(crate) fn stft_unpadded(&self, x: &[f64], frames_n: usize) -> Array2<Complex64> {
        let mut frames = Array2::zeros((frames_n, self.num_bins()));
        for (n, mut row) in frames.rows_mut().into_iter().enumerate() {
            let start = n * self.hop;
            let samples = (0..self.window_size).map(|k| x.get(start + k).copied().unwrap_or(0.0));
            self.analyze(samples, row.as_slice_mut().expect("contiguous"));
        }
        frames
    }

    /// Least-squares overlap-add of the given frames into a signal of
    /// `(frames - 1) * hop + window_size` samples (no trimming).
    pub(crate) fn overlap_add(&self, frames: &Array2<Complex64>) -> Vec<f64> {
        let n_frames = frames.nrows();
        let total = (n_frames.max(1) - 1) * self.hop + self.window_size;
        let mut out = vec![0.0; total];
        let mut norm = vec![0.0; total];
        for (n, row) in frames.rows().into_iter().enumerate() {
            let bins: Vec<Complex64> = row.iter().copied().collect();
            let seg = self.synthesize(&bins);
            let start = n * self.hop;
            for k in 0..self.window_size {
                out[start + k] += seg[k] * self.window[k];
                norm[start + k] += self.window[k] * self.window[k];
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-10 {
                *o /= n;
            } else {
                *o = 0.0;
            }
        }
        out
    }

    pub fn istft(&self, s: &ComplexSpectrogram) -> Result<Waveform> {
        if s.window_size != self.window_size || s.hop != self.hop {
            return Err(Error::InconsistentSpectrogram(format!(
                "plan is {}/{}, spectrogram is {}/{}",
                self.window_size, self.hop, s.window_size, s.hop
            )));
        }
        istft_checks(s)?;
        let padded = self.overlap_add(&s.frames);
        let pad = self.window_size / 2;
        let samples = padded[pad..pad + s.original_length].to_vec();
        Waveform::new(samples, s.sample_rate)
    }
}

fn istft_checks(s: &ComplexSpectrogram) -> Result<()> {
    if s.num_bins() != s.window_size / 2 + 1 {
        return Err(Error::InconsistentSpectrogram(format!(
            "{} bins for window {}",
            s.num_bins(),
            s.window_size
        )));
    }
    if s.hop == 0 || s.hop > s.window_size {
        return Err(Error::InconsistentSpectrogram(format!(
            "hop {} with window {}",
            s.hop, s.window_size
        )));
    }
    if s.original_length == 0 || s.num_frames() != num_frames(s.original_length, s.hop) {
        return Err(Error::InconsistentSpectrogram(format!(
            "{} frames cannot come from {} samples at hop {}",
            s.num_frames(),
            s.original_length,
            s.hop
        )));
    }
    Ok(())
}

pub fn stft(w: &Waveform, window_size: usize, hop: usize) -> Result<ComplexSpectrogram> {
    if w.is_empty() {
        return Err(Error::InvalidWaveform("cannot transform an empty signal".into()));
    }
    Ok(StftPlan::new(window_size, hop)?.stft(w))
}

pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    istft_checks(s)?;
    StftPlan::new(s.window_size, s.hop)
        .map_err(|e| Error::InconsistentSpectrogram(e.to_string()))?
        .istft(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), 8000).unwrap()
    }

    #[test]
    fn frame_count_and_bins() {
        let s = stft(&noise(1000, 1), 256, 80).unwrap();
        assert_eq!(s.num_frames(), 1000 / 80 + 1);
        assert_eq!(s.num_bins(), 129);
    }

    #[test]
    fn silence_is_zero() {
        let s = stft(&Waveform::zeros(500, 8000).unwrap(), 64, 16).unwrap();
        assert!(s.frames.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn bin_centered_sine_peaks_at_its_bin() {
        let (n, k) = (256usize, 20usize);
        let x: Vec<f64> = (0..4000)
            .map(|t| (2.0 * PI * k as f64 * t as f64 / n as f64).sin())
            .collect();
        let s = stft(&Waveform::new(x, 8000).unwrap(), n, 64).unwrap();
        let mag = s.magnitude();
        // edge frames see reflected (phase-flipped) padding
        for row in mag.rows().into_iter().skip(2).take(mag.nrows() - 4) {
            let arg = row
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            assert_eq!(arg, k);
        }
    }

    #[test]
    fn parseval_per_frame() {
        // Frame energy from the one-sided spectrum equals the windowed time energy.
        let w = noise(2000, 2);
        let plan = StftPlan::new(128, 32).unwrap();
        let s = plan.stft(&w);
        let win = hann(128);
        let x = w.samples();
        for n in [3usize, 10, 40] {
            let start = n * 32 - 64;
            let time: f64 = (0..128).map(|k| (x[start + k] * win[k]).powi(2)).sum();
            let row = s.frames.row(n);
            let mut freq = row[0].norm_sqr() + row[64].norm_sqr();
            freq += 2.0 * (1..64).map(|k| row[k].norm_sqr()).sum::<f64>();
            freq /= 128.0;
            assert!((time - freq).abs() < 1e-9 * time.max(1.0));
        }
    }

    #[test]
    fn round_trip_and_linearity() {
        let w = noise(4321, 3);
        let s = stft(&w, 256, 64).unwrap();
        let back = istft(&s).unwrap();
        let err = w
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
        let scaled = istft(&s.scaled(-2.5)).unwrap();
        for (a, b) in scaled.samples().iter().zip(back.samples()) {
            assert!((a + 2.5 * b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_spectrogram_gives_silence() {
        let s = ComplexSpectrogram {
            frames: Array2::zeros((11, 33)),
            window_size: 64,
            hop: 16,
            original_length: 160,
            sample_rate: 8000,
        };
        assert!(istft(&s).unwrap().samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_parameters() {
        let w = noise(100, 4);
        assert!(stft(&w, 100, 10).is_err());
        assert!(stft(&w, 64, 65).is_err());
        let mut s = stft(&w, 64, 16).unwrap();
        s.original_length = 5000;
        assert!(matches!(istft(&s), Err(Error::InconsistentSpectrogram(_))));
    }
}
