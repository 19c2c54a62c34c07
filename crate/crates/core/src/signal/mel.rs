//! Mel filterbank, log-mel features and nonnegative mel inversion.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};

use super::stft::ComplexSpectrogram;
use super::FeatureSequence;
use crate::error::{Error, Result};

/// Floor added before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the mel scale with area normalization, so white
/// noise produces a flat mel profile.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    weights: Array2<f64>,
    pinv: Array2<f64>,
    lipschitz: f64,
    pub sample_rate: u32,
    pub window_size: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl MelFilterbank {
    pub fn new(
        sample_rate: u32,
        window_size: usize,
        num_mels: usize,
        fmin: f64,
        fmax: f64,
    ) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if num_mels == 0 {
            return Err(Error::DegenerateFilterbank("zero mel bands".into()));
        }
        if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
            return Err(Error::DegenerateFilterbank(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got {fmin}..{fmax}"
            )));
        }
        let bins = window_size / 2 + 1;
        let bin_hz: Vec<f64> = (0..bins)
            .map(|k| k as f64 * sample_rate as f64 / window_size as f64)
            .collect();
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..num_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (num_mels + 1) as f64))
            .collect();
        let mut weights = Array2::zeros((num_mels, bins));
        for m in 0..num_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (right - left);
            for (k, &f) in bin_hz.iter().enumerate() {
                let rise = (f - left) / (center - left);
                let fall = (right - f) / (right - center);
                let w = rise.min(fall).max(0.0);
                weights[[m, k]] = w * norm;
            }
            if weights.row(m).iter().all(|&w| w == 0.0) {
                return Err(Error::DegenerateFilterbank(format!(
                    "mel band {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; \
                     {num_mels} bands is too many for a {window_size}-point window"
                )));
            }
        }
        let dm = DMatrix::from_fn(num_mels, bins, |r, c| weights[[r, c]]);
        let svd = dm.svd(true, true);
        let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let pinv_dm = svd
            .pseudo_inverse(smax * 1e-10)
            .map_err(|e| Error::DegenerateFilterbank(e.to_string()))?;
        let pinv = Array2::from_shape_fn((bins, num_mels), |(r, c)| pinv_dm[(r, c)]);
        Ok(Self {
            weights,
            pinv,
            lipschitz: smax * smax,
            sample_rate,
            window_size,
            fmin,
            fmax,
        })
    }

    pub fn num_mels(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// `power` is `frames × bins`; returns `frames × mels`.
    pub fn apply(&self, power: &Array2<f64>) -> Array2<f64> {
        power.dot(&self.weights.t())
    }

    /// Nonnegative least-squares estimate of linear power spectra from mel
    /// power: clipped pseudo-inverse, refined by projected gradient steps.
    pub fn invert_power(&self, mel_power: &Array2<f64>, refine_steps: usize) -> Array2<f64> {
        let mut p = mel_power.dot(&self.pinv.t()).mapv(|v| v.max(0.0));
        let step = 1.0 / self.lipschitz;
        for _ in 0..refine_steps {
            let resid = self.apply(&p) - mel_power;
            let grad = resid.dot(&self.weights);
            p.zip_mut_with(&grad, |v, g| *v = (*v - step * g).max(0.0));
        }
        p
    }
}

/// `log(mel · |S|² + 1e-10)`, one row per STFT frame.
pub fn log_mel(s: &ComplexSpectrogram, num_mels: usize, fmin: f64, fmax: f64) -> Result<FeatureSequence> {
    let fb = MelFilterbank::new(s.sample_rate, s.window_size, num_mels, fmin, fmax)?;
    Ok(log_mel_with(&fb, s))
}

pub fn log_mel_with(fb: &MelFilterbank, s: &ComplexSpectrogram) -> FeatureSequence {
    let mel = fb.apply(&s.power());
    FeatureSequence {
        frames: mel.mapv(|v| (v + LOG_FLOOR).ln()),
        hop: s.hop,
        downsample: 1,
        sample_rate: s.sample_rate,
    }
}

/// Mean over time of each mel band.
pub fn mean_profile(f: &FeatureSequence) -> Array1<f64> {
    f.frames.mean_axis(Axis(0)).expect("nonempty feature sequence")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{stft, Waveform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn silence_hits_the_floor() {
        let s = stft(&Waveform::zeros(800, 8000).unwrap(), 256, 80).unwrap();
        let f = log_mel(&s, 40, 0.0, 4000.0).unwrap();
        assert_eq!(f.dim(), 40);
        assert!(f.frames.iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn doubling_amplitude_adds_log4() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..4000).map(|_| rng.gen_range(-0.4..0.4)).collect();
        let w = Waveform::new(x, 8000).unwrap();
        let a = log_mel(&stft(&w, 256, 80).unwrap(), 40, 0.0, 4000.0).unwrap();
        let b = log_mel(&stft(&w.scaled(2.0), 256, 80).unwrap(), 40, 0.0, 4000.0).unwrap();
        for (x, y) in a.frames.iter().zip(b.frames.iter()) {
            assert!((y - x - 4f64.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn white_noise_profile_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..100 * 80).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let s = stft(&Waveform::new(x, 8000).unwrap(), 256, 80).unwrap();
        let f = log_mel(&s, 40, 0.0, 4000.0).unwrap();
        let prof = mean_profile(&f);
        let mean = prof.mean().unwrap();
        // every band within ~1.5 dB (0.35 nats) of the mean power, excluding
        // the half-width edge bands
        for &v in prof.iter().skip(1).take(38) {
            assert!((v - mean).abs() < 0.35, "{v} vs {mean}");
        }
    }

    #[test]
    fn too_many_bands_is_degenerate() {
        let s = stft(&Waveform::zeros(800, 8000).unwrap(), 64, 16).unwrap();
        assert!(matches!(
            log_mel(&s, 80, 0.0, 4000.0),
            Err(Error::DegenerateFilterbank(_))
        ));
        assert!(log_mel(&s, 10, 3000.0, 2000.0).is_err());
    }

    #[test]
    fn inversion_reproduces_mel_power() {
        let fb = MelFilterbank::new(8000, 256, 40, 0.0, 4000.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let power = Array2::from_shape_fn((5, 129), |_| rng.gen_range(0.0..1.0));
        let mel = fb.apply(&power);
        let est = fb.invert_power(&mel, 50);
        assert!(est.iter().all(|&v| v >= 0.0));
        let back = fb.apply(&est);
        let rel = (&back - &mel).mapv(|v| v * v).sum().sqrt() / mel.mapv(|v| v * v).sum().sqrt();
        assert!(rel < 0.05, "{rel}");
    }
}
