//! Unit sequences back to waveforms.
//!
//! Centroid features are interpolated to the analysis frame rate, optionally
//! corrected by a trained decoder, turned into linear magnitudes by
//! nonnegative least squares against the mel filterbank, and given phase by
//! Griffin-Lim. An external plug-in can replace the whole chain.

mod decoder;

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use unitsep_nn::Adam;

pub use decoder::{Decoder, DecoderConfig, DecoderExample};

use crate::discretizer::{lookup, Codebook, UnitSequence};
use crate::error::{Error, Result};
use crate::signal::griffin_lim::{griffin_lim_with, DEFAULT_ITERATIONS};
use crate::signal::{LogMelConfig, LogMelExtractor, Waveform, LOG_FLOOR};
use crate::train::{load_model, save_model, ProgressLog, TrainConfig};

/// Projected-gradient refinements after the clipped pseudo-inverse.
const NNLS_STEPS: usize = 30;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocoderMode {
    #[default]
    LookupGl,
    TrainedDecoder,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocoderConfig {
    /// Feature front end the codebook was trained on.
    pub mel: LogMelConfig,
    pub sample_rate: u32,
    /// Output samples per unit frame.
    pub downsample_factor: usize,
    /// 0 disables speaker conditioning.
    pub num_speakers: usize,
    pub mode: VocoderMode,
    pub gl_iterations: usize,
    #[serde(default)]
    pub decoder: DecoderConfig,
}

impl VocoderConfig {
    /// Lookup and Griffin-Lim configuration matching a codebook's front end.
    pub fn for_codebook(cb: &Codebook) -> Self {
        let fp = cb.features();
        let mut mel = LogMelConfig::for_rate(fp.sample_rate);
        mel.hop = fp.hop;
        mel.downsample = fp.downsample;
        mel.num_mels = fp.dim;
        Self {
            mel,
            sample_rate: fp.sample_rate,
            downsample_factor: fp.frame_hop(),
            num_speakers: 0,
            mode: VocoderMode::LookupGl,
            gl_iterations: DEFAULT_ITERATIONS,
            decoder: DecoderConfig::default(),
        }
    }

    pub fn validate(&self, cb: &Codebook) -> Result<()> {
        let fp = cb.features();
        if self.downsample_factor == 0 {
            return Err(Error::InvalidConfig("downsample_factor must be >= 1".into()));
        }
        if self.mel.hop != fp.hop
            || self.mel.downsample != fp.downsample
            || self.mel.num_mels != fp.dim
            || self.mel.sample_rate != fp.sample_rate
            || self.sample_rate != fp.sample_rate
        {
            return Err(Error::FingerprintMismatch {
                expected: fp.to_string(),
                found: format!(
                    "hop{}x{}-d{}-{}hz",
                    self.mel.hop, self.mel.downsample, self.mel.num_mels, self.sample_rate
                ),
            });
        }
        if self.downsample_factor != fp.frame_hop() {
            return Err(Error::InvalidConfig(format!(
                "downsample_factor {} does not match the codebook frame hop {}",
                self.downsample_factor,
                fp.frame_hop()
            )));
        }
        if !self.downsample_factor.is_multiple_of(self.mel.hop) {
            return Err(Error::InvalidConfig(
                "downsample_factor must be a multiple of the analysis hop".into(),
            ));
        }
        if self.gl_iterations == 0 {
            return Err(Error::InvalidConfig("gl_iterations must be >= 1".into()));
        }
        Ok(())
    }

    /// Analysis frames per unit frame.
    pub fn upsample_ratio(&self) -> usize {
        self.downsample_factor / self.mel.hop
    }

    /// Analysis frames spanning `units` unit frames (both end points).
    pub fn mel_frames(&self, units: usize) -> usize {
        units * self.upsample_ratio() + 1
    }
}

/// Stable call contract for an external neural vocoder: unit ids, their
/// centroid features (`N × D`), an optional speaker id and the output rate in;
/// samples out.
pub trait VocoderPlugin: Send + Sync {
    fn synthesize(
        &self,
        ids: &[usize],
        features: &Array2<f64>,
        speaker: Option<usize>,
        sample_rate: u32,
    ) -> Result<Vec<f64>>;
}

/// Linear interpolation from `units` unit-rate rows to `frames` analysis-rate
/// rows.
///
/// A unit frame pools analysis frames `r·n … r·n + r − 1`, so it sits at
/// analysis position `r·n + (r − 1)/2`, with `r = (frames − 1) / units`.
pub(crate) fn upsample_matrix(units: usize, frames: usize) -> Array2<f64> {
    let mut m = Array2::zeros((frames, units));
    if units == 0 {
        return m;
    }
    let ratio = ((frames - 1) as f64 / units as f64).max(1.0);
    for f in 0..frames {
        let pos = ((f as f64 - (ratio - 1.0) / 2.0) / ratio).clamp(0.0, (units - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(units - 1);
        let w = pos - lo as f64;
        m[[f, lo]] += 1.0 - w;
        m[[f, hi]] += w;
    }
    m
}

/// A configured synthesizer bound to one codebook.
#[derive(Clone)]
pub struct Vocoder {
    config: VocoderConfig,
    codebook: Codebook,
    extractor: LogMelExtractor,
    decoder: Option<Decoder>,
    plugin: Option<Arc<dyn VocoderPlugin>>,
}

impl std::fmt::Debug for Vocoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Vocoder")
            .field("config", &self.config)
            .field("codebook", &self.codebook.id())
            .field("decoder", &self.decoder.is_some())
            .field("plugin", &self.plugin.is_some())
            .finish()
    }
}

impl Vocoder {
    pub fn new(codebook: Codebook, config: VocoderConfig) -> Result<Self> {
        config.validate(&codebook)?;
        let extractor = LogMelExtractor::new(config.mel.clone())?;
        Ok(Self {
            config,
            codebook,
            extractor,
            decoder: None,
            plugin: None,
        })
    }

    pub fn with_decoder(mut self, decoder: Decoder) -> Result<Self> {
        if decoder.num_speakers() != self.config.num_speakers {
            return Err(Error::InvalidConfig(format!(
                "decoder knows {} speakers, config says {}",
                decoder.num_speakers(),
                self.config.num_speakers
            )));
        }
        self.decoder = Some(decoder);
        Ok(self)
    }

    pub fn with_plugin(mut self, plugin: Arc<dyn VocoderPlugin>) -> Self {
        self.plugin = Some(plugin);
        self
    }

    pub fn config(&self) -> &VocoderConfig {
        &self.config
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn decoder(&self) -> Option<&Decoder> {
        self.decoder.as_ref()
    }

    pub fn extractor(&self) -> &LogMelExtractor {
        &self.extractor
    }

    fn check_speaker(&self, speaker: Option<usize>) -> Result<()> {
        match (self.config.num_speakers, speaker) {
            (0, None) => Ok(()),
            (n, Some(id)) if id >= n => Err(Error::UnknownSpeaker { id, count: n }),
            (_, Some(_)) => Ok(()),
            (n, None) => Err(Error::InvalidConfig(format!(
                "vocoder is conditioned on {n} speakers; a speaker id is required"
            ))),
        }
    }

    /// Log-mel frames at the analysis rate for `y`.
    pub fn mel_frames(&self, y: &UnitSequence, speaker: Option<usize>) -> Result<Array2<f64>> {
        let centroids = lookup(y, &self.codebook)?.frames;
        let frames = self.config.mel_frames(y.len());
        match self.config.mode {
            VocoderMode::LookupGl => Ok(upsample_matrix(y.len(), frames).dot(&centroids)),
            VocoderMode::TrainedDecoder => {
                let dec = self.decoder.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("trained_decoder mode needs a trained decoder".into())
                })?;
                dec.predict(&centroids, speaker, frames)
            }
            VocoderMode::External => Err(Error::InvalidConfig(
                "external mode produces samples, not mel frames".into(),
            )),
        }
    }

    /// Log-mel → linear magnitude → Griffin-Lim; output is
    /// `(frames − 1) · hop` samples.
    pub fn invert_log_mel(&self, log_mel: &Array2<f64>) -> Result<Waveform> {
        let power = log_mel.mapv(|v| (v.exp() - LOG_FLOOR).max(0.0));
        let linear = self.extractor.filterbank().invert_power(&power, NNLS_STEPS);
        let mag = linear.mapv(f64::sqrt);
        Ok(griffin_lim_with(self.extractor.plan(), &mag, self.config.gl_iterations, self.config.sample_rate)?.waveform)
    }

    /// Waveform of `N · downsample_factor` samples for an `N`-unit sequence.
    pub fn synthesize(&self, y: &UnitSequence, speaker: Option<usize>) -> Result<Waveform> {
        if y.is_empty() {
            return Err(Error::InvalidUnits("cannot synthesize an empty unit sequence".into()));
        }
        y.validate(&self.codebook)?;
        self.check_speaker(speaker)?;
        let target_len = y.len() * self.config.downsample_factor;
        if self.config.mode == VocoderMode::External {
            let plugin = self.plugin.as_ref().ok_or_else(|| {
                Error::InvalidConfig("external mode requires a registered plug-in".into())
            })?;
            let feats = lookup(y, &self.codebook)?.frames;
            let samples = plugin.synthesize(&y.ids, &feats, speaker, self.config.sample_rate)?;
            return Waveform::new(samples, self.config.sample_rate)?.fit_to_len(target_len);
        }
        let mel = self.mel_frames(y, speaker)?;
        self.invert_log_mel(&mel)?.fit_to_len(target_len)
    }

    /// Writes the trained decoder in the checkpoint container.
    pub fn save_decoder(&self, path: impl AsRef<Path>, optimizer: Option<&Adam>) -> Result<()> {
        let dec = self
            .decoder
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("no decoder to save".into()))?;
        save_model(path, "vocoder", &self.config, Some(&self.codebook.id()), &dec.store, optimizer)
    }

    /// Restores a vocoder saved with [`Vocoder::save_decoder`].
    pub fn load_decoder(path: impl AsRef<Path>, codebook: Codebook) -> Result<(Self, Option<Adam>)> {
        let state = load_model(path, "vocoder")?;
        if state.codebook_id() != Some(codebook.id().as_str()) {
            return Err(Error::FingerprintMismatch {
                expected: codebook.id(),
                found: state.codebook_id().unwrap_or("none").to_string(),
            });
        }
        let config: VocoderConfig = state.config()?;
        let mut dec = Decoder::new(config.decoder.clone(), codebook.dim(), config.num_speakers, 0)?;
        dec.store.load_values(state.params)?;
        let adam = match state.optimizer {
            Some((step, arrays)) => Some(Adam::restore(Default::default(), step, &dec.store, arrays)?),
            None => None,
        };
        Ok((Self::new(codebook, config)?.with_decoder(dec)?, adam))
    }
}

/// Lookup-mode synthesis without building a [`Vocoder`] first.
pub fn synthesize(
    y: &UnitSequence,
    cb: &Codebook,
    vc: &VocoderConfig,
    speaker: Option<usize>,
) -> Result<Waveform> {
    if vc.mode != VocoderMode::LookupGl {
        return Err(Error::InvalidConfig(
            "free-standing synthesis supports lookup_gl only; build a Vocoder for other modes".into(),
        ));
    }
    Vocoder::new(cb.clone(), vc.clone())?.synthesize(y, speaker)
}

/// One decoder training item: units, clean target waveform, speaker.
pub struct DecoderTarget<'a> {
    pub units: &'a UnitSequence,
    pub target: &'a Waveform,
    pub speaker: Option<usize>,
}

/// Trains the decoder on `(units, target waveform, speaker)` triples and
/// returns the vocoder in `trained_decoder` mode with its loss curve.
pub fn train_decoder(
    codebook: &Codebook,
    mut config: VocoderConfig,
    corpus: &[DecoderTarget<'_>],
    train: &TrainConfig,
    log: &mut ProgressLog,
) -> Result<(Vocoder, Vec<f64>, Adam)> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    config.mode = VocoderMode::TrainedDecoder;
    let vocoder = Vocoder::new(codebook.clone(), config.clone())?;
    let cb_id = codebook.id();
    let mut examples = Vec::with_capacity(corpus.len());
    for item in corpus {
        if item.units.codebook_id != cb_id {
            return Err(Error::FingerprintMismatch {
                expected: cb_id.clone(),
                found: item.units.codebook_id.clone(),
            });
        }
        vocoder.check_speaker(item.speaker)?;
        let n = item.units.len();
        let wave = item.target.fit_to_len(n * config.downsample_factor)?;
        let target = vocoder.extractor.analysis_frames(&wave)?.frames;
        debug_assert_eq!(target.nrows(), config.mel_frames(n));
        examples.push(DecoderExample {
            centroids: lookup(item.units, codebook)?.frames,
            target,
            speaker: item.speaker,
        });
    }
    let mut dec = Decoder::new(config.decoder.clone(), codebook.dim(), config.num_speakers, train.seed)?;
    let mut adam = Adam::new(train.adam(), &dec.store);
    let curve = decoder::fit(&mut dec, &examples, train, &mut adam, 0, log)?;
    Ok((vocoder.with_decoder(dec)?, curve, adam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretizer::quantize;
    use crate::signal::{FeatureExtractor, FeatureFingerprint};

    fn toy_codebook() -> Codebook {
        let c = Array2::from_shape_fn((4, 40), |(j, d)| -6.0 + (j as f64 + 1.0) * ((d as f64) * 0.3 + j as f64).sin());
        Codebook::new(
            c,
            FeatureFingerprint {
                hop: 80,
                downsample: 2,
                dim: 40,
                sample_rate: 8000,
            },
        )
        .unwrap()
    }

    fn units(cb: &Codebook, ids: Vec<usize>) -> UnitSequence {
        UnitSequence {
            ids,
            frame_hop: 160,
            codebook_id: cb.id(),
            speaker_id: None,
        }
    }

    #[test]
    fn upsampling_rows_sum_to_one_and_hit_unit_centres() {
        let m = upsample_matrix(5, 11);
        for r in m.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        // analysis frame 2n + 0.5 is unit n's centre; frames 2n and 2n+1 straddle it
        assert!((m[[2, 1]] - 0.75).abs() < 1e-12);
        assert!((m[[3, 1]] - 0.75).abs() < 1e-12);
        assert_eq!(m[[0, 0]], 1.0);
    }

    #[test]
    fn length_contract_and_determinism() {
        let cb = toy_codebook();
        let vc = VocoderConfig::for_codebook(&cb);
        let y = units(&cb, vec![0, 1, 1, 2, 3, 3, 0]);
        let a = synthesize(&y, &cb, &vc, None).unwrap();
        assert_eq!(a.len(), 7 * 160);
        let b = synthesize(&y, &cb, &vc, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_requests() {
        let cb = toy_codebook();
        let vc = VocoderConfig::for_codebook(&cb);
        assert!(synthesize(&units(&cb, vec![]), &cb, &vc, None).is_err());
        assert!(matches!(
            synthesize(&units(&cb, vec![0]), &cb, &vc, Some(0)),
            Err(Error::UnknownSpeaker { .. })
        ));
        let mut other = units(&cb, vec![0]);
        other.codebook_id = "nope".into();
        assert!(matches!(synthesize(&other, &cb, &vc, None), Err(Error::FingerprintMismatch { .. })));
        let bad = VocoderConfig {
            downsample_factor: 64,
            ..vc.clone()
        };
        assert!(synthesize(&units(&cb, vec![0]), &cb, &bad, None).is_err());
        let ext = VocoderConfig {
            mode: VocoderMode::External,
            ..vc
        };
        assert!(Vocoder::new(cb.clone(), ext).unwrap().synthesize(&units(&cb, vec![0]), None).is_err());
    }

    struct Clicks;

    impl VocoderPlugin for Clicks {
        fn synthesize(&self, ids: &[usize], _f: &Array2<f64>, _s: Option<usize>, _sr: u32) -> Result<Vec<f64>> {
            Ok(ids.iter().flat_map(|&i| std::iter::once(i as f64 * 0.1).chain(std::iter::repeat_n(0.0, 150))).collect())
        }
    }

    #[test]
    fn external_plugin_output_is_fitted_to_length() {
        let cb = toy_codebook();
        let vc = VocoderConfig {
            mode: VocoderMode::External,
            ..VocoderConfig::for_codebook(&cb)
        };
        let v = Vocoder::new(cb.clone(), vc).unwrap().with_plugin(Arc::new(Clicks));
        let w = v.synthesize(&units(&cb, vec![1, 2, 3]), None).unwrap();
        assert_eq!(w.len(), 480);
        assert_eq!(w.samples()[151], 0.2);
    }

    #[test]
    fn resynthesis_requantizes_to_the_same_units() {
        // centroids taken from real tones so they are reachable log-mel frames
        let ex = LogMelExtractor::new(LogMelConfig::for_rate(8000)).unwrap();
        let tones: Vec<Waveform> = [200.0, 450.0, 900.0, 1500.0]
            .iter()
            .map(|&f| {
                Waveform::new(
                    (0..1600)
                        .map(|i| (1..6).map(|h| 0.05 * (2.0 * std::f64::consts::PI * f * h as f64 * i as f64 / 8000.0).sin() / h as f64).sum())
                        .collect(),
                    8000,
                )
                .unwrap()
            })
            .collect();
        let rows: Vec<Array2<f64>> = tones.iter().map(|t| ex.extract(t).unwrap().frames).collect();
        let c = Array2::from_shape_fn((4, 40), |(j, d)| rows[j][[5, d]]);
        let cb = Codebook::new(c, ex.fingerprint()).unwrap();
        let y = units(&cb, [0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 3, 3, 3, 3, 0, 0].to_vec());
        let w = synthesize(&y, &cb, &VocoderConfig::for_codebook(&cb), None).unwrap();
        let back = quantize(&ex.extract(&w).unwrap(), &cb).unwrap();
        let agree = back.ids.iter().zip(&y.ids).filter(|(a, b)| a == b).count();
        assert!(agree as f64 >= 0.8 * y.len() as f64, "{:?} vs {:?}", back.ids, y.ids);
    }

    #[test]
    fn decoder_training_reduces_loss_and_round_trips() {
        let cb = toy_codebook();
        let y = units(&cb, vec![0, 1, 2, 3, 2, 1, 0, 0]);
        let target = synthesize(&y, &cb, &VocoderConfig::for_codebook(&cb), None).unwrap().scaled(0.5);
        let train = TrainConfig {
            steps: 60,
            batch_size: 1,
            learning_rate: 3e-3,
            log_every: 0,
            ..TrainConfig::default()
        };
        let corpus = [DecoderTarget {
            units: &y,
            target: &target,
            speaker: None,
        }];
        let (voc, curve, adam) =
            train_decoder(&cb, VocoderConfig::for_codebook(&cb), &corpus, &train, &mut ProgressLog::disabled()).unwrap();
        assert!(curve.last().unwrap() < &(0.5 * curve[0]), "{curve:?}");
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("voc.ckpt");
        voc.save_decoder(&path, Some(&adam)).unwrap();
        let (back, opt) = Vocoder::load_decoder(&path, cb.clone()).unwrap();
        assert_eq!(opt.unwrap().step, 60);
        assert_eq!(back.mel_frames(&y, None).unwrap(), voc.mel_frames(&y, None).unwrap());
        assert_eq!(back.synthesize(&y, None).unwrap().len(), 8 * 160);
    }
}
