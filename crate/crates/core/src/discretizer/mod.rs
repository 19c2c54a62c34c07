//! Continuous features → discrete unit ids and back.

mod codebook;
pub mod kmeans;

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use codebook::Codebook;
pub use kmeans::{train_codebook, train_codebook_with, KMeansLog};

use crate::error::{Error, Result};
use crate::parallel::Execution;
use crate::signal::{FeatureExtractor, FeatureSequence, Waveform};

/// Default codebook size.
pub const DEFAULT_UNITS: usize = 100;

/// One unit id per frame, tied to the codebook that produced it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSequence {
    pub ids: Vec<usize>,
    /// Samples per unit frame (analysis hop × downsample factor).
    pub frame_hop: usize,
    pub codebook_id: String,
    pub speaker_id: Option<usize>,
}

impl UnitSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn with_speaker(mut self, speaker: Option<usize>) -> Self {
        self.speaker_id = speaker;
        self
    }

    /// Header line then one id per line.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# units frame_hop={} codebook={}",
            self.frame_hop, self.codebook_id
        );
        if let Some(s) = self.speaker_id {
            let _ = write!(out, " speaker={s}");
        }
        out.push('\n');
        for id in &self.ids {
            let _ = writeln!(out, "{id}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidUnits("missing header".into()))?;
        let rest = header
            .strip_prefix("# units ")
            .ok_or_else(|| Error::InvalidUnits(format!("bad header `{header}`")))?;
        let (mut frame_hop, mut codebook_id, mut speaker_id) = (None, None, None);
        for field in rest.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::InvalidUnits(format!("bad header field `{field}`")))?;
            let bad = || Error::InvalidUnits(format!("bad value in `{field}`"));
            match k {
                "frame_hop" => frame_hop = Some(v.parse().map_err(|_| bad())?),
                "codebook" => codebook_id = Some(v.to_string()),
                "speaker" => speaker_id = Some(v.parse().map_err(|_| bad())?),
                _ => return Err(Error::InvalidUnits(format!("unknown header key `{k}`"))),
            }
        }
        let ids = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse()
                    .map_err(|_| Error::InvalidUnits(format!("bad unit id `{l}`")))
            })
            .collect::<Result<Vec<usize>>>()?;
        Ok(Self {
            ids,
            frame_hop: frame_hop.ok_or_else(|| Error::InvalidUnits("missing frame_hop".into()))?,
            codebook_id: codebook_id.ok_or_else(|| Error::InvalidUnits("missing codebook".into()))?,
            speaker_id,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Checks ids against a codebook.
    pub fn validate(&self, cb: &Codebook) -> Result<()> {
        let cb_id = cb.id();
        if self.codebook_id != cb_id {
            return Err(Error::FingerprintMismatch {
                expected: cb_id,
                found: self.codebook_id.clone(),
            });
        }
        if let Some(&bad) = self.ids.iter().find(|&&id| id >= cb.size()) {
            return Err(Error::InvalidUnits(format!(
                "unit id {bad} out of range for {} centroids",
                cb.size()
            )));
        }
        Ok(())
    }
}

/// `y_n = argmin_j ‖z_n − e_j‖²`, lowest index on ties.
pub fn quantize(z: &FeatureSequence, cb: &Codebook) -> Result<UnitSequence> {
    if z.dim() != cb.dim() {
        return Err(Error::DimensionMismatch {
            expected: cb.dim(),
            found: z.dim(),
        });
    }
    let ids = z
        .frames
        .rows()
        .into_iter()
        .map(|r| kmeans::nearest(r, cb.centroids()).0)
        .collect();
    Ok(UnitSequence {
        ids,
        frame_hop: cb.frame_hop(),
        codebook_id: cb.id(),
        speaker_id: None,
    })
}

/// Centroid features for a unit sequence: frame `n` is `e_{y_n}`.
pub fn lookup(y: &UnitSequence, cb: &Codebook) -> Result<FeatureSequence> {
    y.validate(cb)?;
    let mut frames = Array2::zeros((y.len(), cb.dim()));
    for (n, &id) in y.ids.iter().enumerate() {
        frames.row_mut(n).assign(&cb.centroid(id));
    }
    let fp = cb.features();
    Ok(FeatureSequence {
        frames,
        hop: fp.hop,
        downsample: fp.downsample,
        sample_rate: fp.sample_rate,
    })
}

/// Extracts features and quantizes a batch of waveforms.
pub fn discretize_batch(
    waves: &[Waveform],
    extractor: &dyn FeatureExtractor,
    cb: &Codebook,
    exec: Execution,
) -> Result<Vec<UnitSequence>> {
    exec.try_map(waves, |w| quantize(&extractor.extract(w)?, cb))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitStatistics {
    pub counts: Vec<usize>,
    pub total: usize,
    /// Entropy of the empirical unit distribution, nats.
    pub entropy: f64,
    /// `exp(entropy)`, in `[1, J]`.
    pub perplexity: f64,
}

pub fn unit_statistics<'a, I>(ys: I, num_units: usize) -> Result<UnitStatistics>
where
    I: IntoIterator<Item = &'a UnitSequence>,
{
    let mut counts = vec![0usize; num_units];
    let mut total = 0;
    for y in ys {
        for &id in &y.ids {
            let slot = counts.get_mut(id).ok_or_else(|| {
                Error::InvalidUnits(format!("unit id {id} out of range for {num_units}"))
            })?;
            *slot += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidUnits("no units to summarize".into()));
    }
    let entropy = -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            p * p.ln()
        })
        .sum::<f64>();
    Ok(UnitStatistics {
        counts,
        total,
        entropy,
        perplexity: entropy.exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::FeatureFingerprint;
    use proptest::prelude::*;

    fn cb(rows: &[[f64; 2]]) -> Codebook {
        let c = Array2::from_shape_fn((rows.len(), 2), |(i, j)| rows[i][j]);
        Codebook::new(
            c,
            FeatureFingerprint {
                hop: 80,
                downsample: 2,
                dim: 2,
                sample_rate: 8000,
            },
        )
        .unwrap()
    }

    fn feats(rows: &[[f64; 2]]) -> FeatureSequence {
        FeatureSequence {
            frames: Array2::from_shape_fn((rows.len(), 2), |(i, j)| rows[i][j]),
            hop: 80,
            downsample: 2,
            sample_rate: 8000,
        }
    }

    #[test]
    fn quantize_examples() {
        let book = cb(&[[0.0, 0.0], [1.0, 1.0]]);
        let y = quantize(&feats(&[[0.2, 0.1], [1.0, 1.0], [0.5, 0.5]]), &book).unwrap();
        // (0.5, 0.5) is equidistant: lowest index wins
        assert_eq!(y.ids, vec![0, 1, 0]);
        assert_eq!(y.frame_hop, 160);
        let wrong_dim = FeatureSequence {
            frames: Array2::zeros((1, 3)),
            hop: 80,
            downsample: 2,
            sample_rate: 8000,
        };
        assert!(matches!(quantize(&wrong_dim, &book), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn lookup_and_fingerprint_check() {
        let rows: Vec<[f64; 2]> = (0..8).map(|i| [i as f64, -(i as f64)]).collect();
        let book = cb(&rows);
        let y = UnitSequence {
            ids: vec![3, 3, 7],
            frame_hop: 160,
            codebook_id: book.id(),
            speaker_id: None,
        };
        let z = lookup(&y, &book).unwrap();
        assert_eq!(z.frames.row(0).to_vec(), vec![3.0, -3.0]);
        assert_eq!(z.frames.row(2).to_vec(), vec![7.0, -7.0]);
        assert_eq!(quantize(&z, &book).unwrap().ids, y.ids);
        let other = cb(&[[0.0, 0.0], [2.0, 2.0]]);
        assert!(matches!(lookup(&y, &other), Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn statistics_examples() {
        let mk = |ids: Vec<usize>| UnitSequence {
            ids,
            frame_hop: 160,
            codebook_id: "x".into(),
            speaker_id: None,
        };
        let same = unit_statistics([&mk(vec![4; 50])], 100).unwrap();
        assert_eq!(same.perplexity, 1.0);
        let uniform = unit_statistics([&mk((0..100).collect())], 100).unwrap();
        assert!((uniform.perplexity - 100.0).abs() < 1e-9);
        assert!(unit_statistics(std::iter::empty(), 10).is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip(ids in proptest::collection::vec(0usize..100, 0..50), spk in proptest::option::of(0usize..10)) {
            let y = UnitSequence { ids, frame_hop: 160, codebook_id: "abc123".into(), speaker_id: spk };
            prop_assert_eq!(UnitSequence::from_text(&y.to_text()).unwrap(), y);
        }
    }
}
