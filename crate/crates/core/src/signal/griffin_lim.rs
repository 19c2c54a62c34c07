//! Iterative phase reconstruction from an STFT magnitude.

use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;

use super::stft::StftPlan;
use super::Waveform;
use crate::error::{Error, Result};

pub const DEFAULT_ITERATIONS: usize = 60;

#[derive(Clone, Debug)]
pub struct GriffinLimOutput {
    pub waveform: Waveform,
    /// Spectral convergence `‖mag − |STFT(wᵢ)|‖ / ‖mag‖` after each iteration,
    /// measured over the two-sided spectrum.
    pub convergence: Vec<f64>,
}

/// Frobenius norm over the implied two-sided spectrum: interior bins count twice.
fn two_sided_norm_sq(frames: &Array2<f64>) -> f64 {
    let last = frames.ncols() - 1;
    frames
        .indexed_iter()
        .map(|((_, k), v)| if k == 0 || k == last { v * v } else { 2.0 * v * v })
        .sum()
}

/// Reconstructs `(frames - 1) * hop` samples whose STFT magnitude
/// approximates `mag` (`frames × (window_size/2 + 1)`).
///
/// Operates on the unpadded frame grid, where overlap-add followed by
/// analysis is an orthogonal projection; that makes the convergence sequence
/// non-increasing.
pub fn griffin_lim(
    mag: &Array2<f64>,
    iterations: usize,
    window_size: usize,
    hop: usize,
    sample_rate: u32,
) -> Result<GriffinLimOutput> {
    let plan = StftPlan::new(window_size, hop)?;
    griffin_lim_with(&plan, mag, iterations, sample_rate)
}

pub fn griffin_lim_with(
    plan: &StftPlan,
    mag: &Array2<f64>,
    iterations: usize,
    sample_rate: u32,
) -> Result<GriffinLimOutput> {
    if iterations == 0 {
        return Err(Error::InvalidTransform("griffin-lim needs at least one iteration".into()));
    }
    if mag.ncols() != plan.num_bins() || mag.nrows() < 2 {
        return Err(Error::InvalidTransform(format!(
            "magnitude is {:?}, expected at least 2 frames of {} bins",
            mag.dim(),
            plan.num_bins()
        )));
    }
    if mag.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidTransform("magnitude must be finite and nonnegative".into()));
    }
    let frames_n = mag.nrows();
    let out_len = (frames_n - 1) * plan.hop();
    let pad = plan.window_size() / 2;
    let mag_norm = two_sided_norm_sq(mag).sqrt();
    if mag_norm == 0.0 {
        return Ok(GriffinLimOutput {
            waveform: Waveform::zeros(out_len, sample_rate)?,
            convergence: vec![0.0; iterations],
        });
    }

    // bin-centre phase advance per hop
    let n_fft = plan.window_size() as f64;
    let hop = plan.hop() as f64;
    let mut spec: Array2<Complex64> = Array2::from_shape_fn(mag.dim(), |(n, k)| {
        let phase = 2.0 * PI * k as f64 * n as f64 * hop / n_fft;
        Complex64::from_polar(mag[[n, k]], phase)
    });
    let mut convergence = Vec::with_capacity(iterations);
    let mut signal = Vec::new();
    for _ in 0..iterations {
        signal = plan.overlap_add(&spec);
        let rebuilt = plan.stft_unpadded(&signal, frames_n);
        let diff = &rebuilt.mapv(|c| c.norm()) - mag;
        convergence.push(two_sided_norm_sq(&diff).sqrt() / mag_norm);
        ndarray::Zip::from(&mut spec)
            .and(&rebuilt)
            .and(mag)
            .for_each(|s, &r, &m| {
                let n = r.norm();
                *s = if n > 0.0 {
                    r * (m / n)
                } else {
                    Complex64::new(m, 0.0)
                };
            });
    }
    let samples = signal[pad..pad + out_len].to_vec();
    Ok(GriffinLimOutput {
        waveform: Waveform::new(samples, sample_rate)?,
        convergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(len: usize, freq: f64) -> Vec<f64> {
        (0..len)
            .map(|t| 0.5 * (2.0 * PI * freq * t as f64 / 8000.0).sin())
            .collect()
    }

    #[test]
    fn reconstructs_a_sine() {
        let x = sine(8000, 440.0);
        let plan = StftPlan::new(256, 64).unwrap();
        let frames = 8000 / 64 + 1;
        let mag = plan.stft_unpadded(&x, frames).mapv(|c| c.norm());
        let out = griffin_lim(&mag, DEFAULT_ITERATIONS, 256, 64, 8000).unwrap();
        assert!(*out.convergence.last().unwrap() < 0.1, "{:?}", out.convergence);
        for pair in out.convergence.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-12), "{pair:?}");
        }
    }

    #[test]
    fn zero_magnitude_gives_silence() {
        let out = griffin_lim(&Array2::zeros((10, 65)), 5, 128, 32, 8000).unwrap();
        assert_eq!(out.waveform.len(), 9 * 32);
        assert!(out.waveform.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_negative_magnitude() {
        let mut m = Array2::ones((4, 65));
        m[[1, 1]] = -1.0;
        assert!(griffin_lim(&m, 3, 128, 32, 8000).is_err());
        assert!(griffin_lim(&Array2::ones((4, 65)), 0, 128, 32, 8000).is_err());
    }
}
