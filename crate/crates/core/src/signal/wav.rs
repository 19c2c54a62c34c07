//! 16-bit PCM mono RIFF/WAVE I/O.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

pub const SUPPORTED_RATES: [u32; 2] = [8000, 16000];
const PCM_SCALE: f64 = 32768.0;

pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| Error::Unreadable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::MultiChannel {
            path: path.to_path_buf(),
            channels: spec.channels,
        });
    }
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: format!("{:?} {}-bit", spec.sample_format, spec.bits_per_sample),
        });
    }
    if !SUPPORTED_RATES.contains(&spec.sample_rate) {
        return Err(Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            detail: format!("sample rate {} Hz", spec.sample_rate),
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / PCM_SCALE))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::Unreadable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    Waveform::new(samples, spec.sample_rate)
}

/// Maps a sample to its PCM code: clipped to `[-1, 1 - 2^-15]`, then
/// rounded to the nearest multiple of `2^-15`.
pub fn to_pcm(sample: f64) -> i16 {
    let ceiling = 1.0 - 1.0 / PCM_SCALE;
    let clipped = sample.clamp(-1.0, ceiling);
    (clipped * PCM_SCALE).round() as i16
}

pub fn save_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let unwritable = |e: hound::Error| Error::Unwritable {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(unwritable)?;
    for &s in w.samples() {
        writer.write_sample(to_pcm(s)).map_err(unwritable)?;
    }
    writer.finalize().map_err(unwritable)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silence_loads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        save_wav(&Waveform::zeros(8000, 8000).unwrap(), &p).unwrap();
        let w = load_wav(&p).unwrap();
        assert_eq!(w.len(), 8000);
        assert_eq!(w.sample_rate(), 8000);
        assert!(w.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn max_code_and_clipping() {
        assert_eq!(to_pcm(2.0), i16::MAX);
        assert_eq!(to_pcm(-3.0), i16::MIN);
        assert_eq!(to_pcm(1.0), i16::MAX);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.wav");
        save_wav(&Waveform::new(vec![2.0, 0.0], 16000).unwrap(), &p).unwrap();
        let w = load_wav(&p).unwrap();
        assert_eq!(w.samples()[0], 32767.0 / 32768.0);
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = load_wav(dir.path().join("nope.wav")).unwrap_err();
        assert!(matches!(missing, Error::Unreadable { .. }));

        let stereo = dir.path().join("st.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut wr = WavWriter::create(&stereo, spec).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.write_sample(0i16).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(load_wav(&stereo).unwrap_err(), Error::MultiChannel { channels: 2, .. }));

        let float = dir.path().join("f.wav");
        let spec = WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut wr = WavWriter::create(&float, spec).unwrap();
        wr.write_sample(0.0f32).unwrap();
        wr.finalize().unwrap();
        assert!(matches!(load_wav(&float).unwrap_err(), Error::UnsupportedEncoding { .. }));

        let odd_rate = dir.path().join("r.wav");
        save_wav(&Waveform::zeros(10, 44100).unwrap(), &odd_rate).unwrap();
        assert!(matches!(load_wav(&odd_rate).unwrap_err(), Error::UnsupportedEncoding { .. }));

        let bad = save_wav(&Waveform::zeros(10, 8000).unwrap(), dir.path().join("no/such/dir.wav"));
        assert!(matches!(bad.unwrap_err(), Error::Unwritable { .. }));
    }
}
