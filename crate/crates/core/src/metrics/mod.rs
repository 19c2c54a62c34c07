//! Objective evaluation: BSS-eval ratios, STOI, SI-SNR, overlap ratio, and
//! permutation-aligned scoring.

mod bss;
pub mod overlap;
mod stoi;

use std::io::{BufRead, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use bss::{bss_decompose, BssDecomposition};
pub use overlap::{
    overlap_ratio, overlap_ratio_against, overlap_ratio_multi, OverlapStats, OVERLAP_THRESHOLDS,
};
pub use stoi::{stoi, STOI_RATE};

use crate::assignment::best_permutation;
use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Every dB figure is clamped to `±DB_CAP`.
pub const DB_CAP: f64 = 60.0;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn check_lengths(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::LengthMismatch {
            left,
            right,
            tolerance: 0,
        });
    }
    Ok(())
}

/// `10 log10(num / den)` clamped to `±DB_CAP`; a zero denominator gives the
/// upper cap and a zero numerator the lower one.
pub fn capped_ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return if num > 0.0 { DB_CAP } else { -DB_CAP };
    }
    if num <= 0.0 {
        return -DB_CAP;
    }
    (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
}

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

/// Scale-invariant SNR in dB, capped at `±DB_CAP`.
pub fn si_snr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    check_lengths(estimate.len(), reference.len())?;
    let e = zero_mean(estimate.samples());
    let r = zero_mean(reference.samples());
    let rr = dot(&r, &r);
    if rr == 0.0 {
        return Err(Error::Degenerate("SI-SNR reference is all zero".into()));
    }
    let alpha = dot(&e, &r) / rr;
    let (mut target, mut noise) = (0.0, 0.0);
    for (ei, ri) in e.iter().zip(&r) {
        let s = alpha * ri;
        target += s * s;
        noise += (ei - s) * (ei - s);
    }
    Ok(capped_ratio_db(target, noise))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamMetrics {
    /// Reference index this estimate was paired with.
    pub reference: usize,
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
    pub stoi: f64,
    pub si_snr: f64,
}

/// Metrics for one utterance under one system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub utterance: String,
    pub system: String,
    /// `permutation[i]` is the reference paired with estimate `i`.
    pub permutation: Vec<usize>,
    pub streams: Vec<StreamMetrics>,
    /// Overlap statistics pooled over the estimates, one per threshold.
    pub overlap: Vec<OverlapStats>,
    /// Frame-level unit accuracy against oracle units, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_accuracy: Option<f64>,
}

impl MetricReport {
    pub fn with_labels(mut self, utterance: impl Into<String>, system: impl Into<String>) -> Self {
        self.utterance = utterance.into();
        self.system = system.into();
        self
    }

    pub fn mean_stream(&self, f: impl Fn(&StreamMetrics) -> f64) -> f64 {
        self.streams.iter().map(f).sum::<f64>() / self.streams.len().max(1) as f64
    }

    pub fn overlap_at(&self, threshold: f64) -> Option<&OverlapStats> {
        self.overlap.iter().find(|o| o.threshold == threshold)
    }
}

/// Pairs estimates with references to maximize mean SI-SNR, then scores.
pub fn evaluate_pairing(estimates: &[Waveform], references: &[Waveform]) -> Result<MetricReport> {
    let k = references.len();
    if estimates.len() != k {
        return Err(Error::StreamCountMismatch {
            expected: k,
            found: estimates.len(),
        });
    }
    if k == 0 {
        return Err(Error::StreamCountMismatch {
            expected: 1,
            found: 0,
        });
    }
    let mut cost = Array2::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            cost[[i, j]] = -si_snr(&estimates[i], &references[j])?;
        }
    }
    let permutation = best_permutation(&cost);
    let mut streams = Vec::with_capacity(k);
    let mut overlaps: Vec<Vec<OverlapStats>> = vec![Vec::new(); OVERLAP_THRESHOLDS.len()];
    for (i, est) in estimates.iter().enumerate() {
        let j = permutation[i];
        let d = bss_decompose(est, references, j)?;
        streams.push(StreamMetrics {
            reference: j,
            sdr: d.sdr(),
            sir: d.sir(),
            sar: d.sar(),
            stoi: stoi(est, &references[j])?,
            si_snr: -cost[[i, j]],
        });
        for (slot, o) in overlaps
            .iter_mut()
            .zip(overlap_ratio_against(est, references, &OVERLAP_THRESHOLDS)?)
        {
            slot.push(o);
        }
    }
    Ok(MetricReport {
        utterance: String::new(),
        system: String::new(),
        permutation,
        streams,
        overlap: overlaps
            .iter()
            .filter_map(|o| OverlapStats::pooled(o))
            .collect(),
        unit_accuracy: None,
    })
}

/// One JSON object per line.
pub fn write_jsonl<W: Write>(mut w: W, reports: &[MetricReport]) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<MetricReport>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
