//! Audio I/O and time–frequency transforms shared by every other module.

pub mod griffin_lim;
pub mod mel;
pub mod stft;
pub mod wav;
mod waveform;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

pub use griffin_lim::{griffin_lim, GriffinLimOutput};
pub use mel::{log_mel, MelFilterbank, LOG_FLOOR};
pub use stft::{istft, stft, ComplexSpectrogram, StftPlan};
pub use wav::{load_wav, save_wav};
pub use waveform::Waveform;

use crate::error::{Error, Result};

/// Number of unit frames for a signal of `len` samples:
/// `ceil(len / (hop · downsample_factor))`.
///
/// Every module that needs a target length calls this.
pub fn frame_count(len: usize, hop: usize, downsample_factor: usize) -> usize {
    let stride = hop.max(1) * downsample_factor.max(1);
    len.div_ceil(stride)
}

/// Frame-synchronous features, one row per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub frames: Array2<f64>,
    /// Analysis hop in samples before downsampling.
    pub hop: usize,
    /// Frames pooled per output row.
    pub downsample: usize,
    pub sample_rate: u32,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Samples between consecutive rows.
    pub fn frame_hop(&self) -> usize {
        self.hop * self.downsample
    }
}

/// Identity of a feature configuration; codebooks and unit sequences carry
/// it so mismatched pairings are caught.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureFingerprint {
    pub hop: usize,
    pub downsample: usize,
    pub dim: usize,
    pub sample_rate: u32,
}

impl FeatureFingerprint {
    pub fn frame_hop(&self) -> usize {
        self.hop * self.downsample
    }
}

impl std::fmt::Display for FeatureFingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "hop{}x{}-d{}-{}hz",
            self.hop, self.downsample, self.dim, self.sample_rate
        )
    }
}

/// Frame-synchronous feature extractor (the `F` in `Z = F(X)`).
///
/// Implementations must return exactly
/// `frame_count(len, hop, downsample)` rows for a waveform of `len` samples.
/// A pretrained self-supervised encoder plugs in here.
pub trait FeatureExtractor: Send + Sync {
    fn fingerprint(&self) -> FeatureFingerprint;
    fn extract(&self, w: &Waveform) -> Result<FeatureSequence>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogMelConfig {
    pub sample_rate: u32,
    pub window_size: usize,
    pub hop: usize,
    pub num_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    /// Consecutive analysis frames averaged into one unit frame.
    pub downsample: usize,
}

impl LogMelConfig {
    /// 32 ms window, 10 ms hop, 40 bands, pooled by 2 to a 20 ms unit rate.
    pub fn for_rate(sample_rate: u32) -> Self {
        let window_size = if sample_rate >= 16000 { 512 } else { 256 };
        Self {
            sample_rate,
            window_size,
            hop: sample_rate as usize / 100,
            num_mels: 40,
            fmin: 0.0,
            fmax: sample_rate as f64 / 2.0,
            downsample: 2,
        }
    }

    pub fn frame_hop(&self) -> usize {
        self.hop * self.downsample
    }
}

/// Default extractor: pooled log-mel filterbank energies.
#[derive(Clone, Debug)]
pub struct LogMelExtractor {
    config: LogMelConfig,
    plan: StftPlan,
    filterbank: MelFilterbank,
}

impl LogMelExtractor {
    pub fn new(config: LogMelConfig) -> Result<Self> {
        if config.downsample == 0 {
            return Err(Error::InvalidTransform("downsample factor must be >= 1".into()));
        }
        let plan = StftPlan::new(config.window_size, config.hop)?;
        let filterbank = MelFilterbank::new(
            config.sample_rate,
            config.window_size,
            config.num_mels,
            config.fmin,
            config.fmax,
        )?;
        Ok(Self {
            config,
            plan,
            filterbank,
        })
    }

    pub fn config(&self) -> &LogMelConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn plan(&self) -> &StftPlan {
        &self.plan
    }

    /// Log-mel at the analysis rate, before pooling.
    pub fn analysis_frames(&self, w: &Waveform) -> Result<FeatureSequence> {
        if w.sample_rate() != self.config.sample_rate {
            return Err(Error::InvalidWaveform(format!(
                "extractor expects {} Hz, got {} Hz",
                self.config.sample_rate,
                w.sample_rate()
            )));
        }
        Ok(mel::log_mel_with(&self.filterbank, &self.plan.stft(w)))
    }
}

/// Averages groups of `factor` consecutive rows, keeping the first `rows`.
pub fn pool_rows(frames: &Array2<f64>, factor: usize, rows: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, frames.ncols()));
    for n in 0..rows {
        let lo = (n * factor).min(frames.nrows() - 1);
        let hi = ((n + 1) * factor).min(frames.nrows()).max(lo + 1);
        let mean = frames
            .slice(s![lo..hi, ..])
            .mean_axis(Axis(0))
            .expect("nonempty group");
        out.row_mut(n).assign(&mean);
    }
    out
}

impl FeatureExtractor for LogMelExtractor {
    fn fingerprint(&self) -> FeatureFingerprint {
        FeatureFingerprint {
            hop: self.config.hop,
            downsample: self.config.downsample,
            dim: self.config.num_mels,
            sample_rate: self.config.sample_rate,
        }
    }

    fn extract(&self, w: &Waveform) -> Result<FeatureSequence> {
        let analysis = self.analysis_frames(w)?;
        let rows = frame_count(w.len(), self.config.hop, self.config.downsample);
        Ok(FeatureSequence {
            frames: pool_rows(&analysis.frames, self.config.downsample, rows),
            hop: self.config.hop,
            downsample: self.config.downsample,
            sample_rate: self.config.sample_rate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frame_count_examples() {
        assert_eq!(frame_count(8000, 160, 1), 50);
        assert_eq!(frame_count(16000, 160, 1), 100);
        assert_eq!(frame_count(1, 160, 1), 1);
        assert_eq!(frame_count(1, 7, 3), 1);
        assert_eq!(frame_count(16000, 80, 2), 100);
        assert_eq!(frame_count(16001, 80, 2), 101);
    }

    proptest! {
        #[test]
        fn frame_count_is_monotone(t in 1usize..100_000, hop in 1usize..400, f in 1usize..4) {
            prop_assert!(frame_count(t, hop, f) <= frame_count(t + 1, hop, f));
        }

        #[test]
        fn extractor_rows_match_frame_count(t in 1usize..6000) {
            let ex = LogMelExtractor::new(LogMelConfig::for_rate(8000)).unwrap();
            let w = Waveform::new((0..t).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect(), 8000).unwrap();
            let f = ex.extract(&w).unwrap();
            prop_assert_eq!(f.len(), frame_count(t, 80, 2));
            prop_assert_eq!(f.dim(), 40);
        }
    }
}
