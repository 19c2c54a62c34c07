//! Utterance-level permutation-invariant cross-entropy.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::assignment::{best_permutation, permutation_cost};
use crate::discretizer::UnitSequence;
use crate::error::{Error, Result};

use super::SeparationOutput;

/// Largest frame-count difference absorbed by trimming.
pub const LENGTH_TOLERANCE: usize = 2;

/// Default weight of the speaker cross-entropy.
pub const DEFAULT_SPEAKER_WEIGHT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitResult {
    /// Mean unit cross-entropy (nats per frame) plus the weighted speaker
    /// term when speaker targets were given.
    pub loss: f64,
    /// `permutation[k]` is the target stream assigned to output stream `k`.
    pub permutation: Vec<usize>,
    /// Unit cross-entropy of each output stream under `permutation`.
    pub per_stream_loss: Vec<f64>,
}

/// Gradients of [`PitResult::loss`] with respect to the logits.
#[derive(Clone, Debug)]
pub struct PitGradients {
    /// `K × N × J`, zero beyond the trimmed length.
    pub unit_logits: Array3<f64>,
    /// `K × num_speakers`.
    pub speaker_logits: Array2<f64>,
}

/// `ln Σ exp(row)` per row, shifted by the row maximum.
fn log_sum_exp(row: ndarray::ArrayView1<f64>) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy of the first `n` rows against `ids`.
pub fn cross_entropy(logits: ArrayView2<f64>, ids: &[usize], n: usize) -> f64 {
    let mut total = 0.0;
    for (row, &id) in logits.outer_iter().zip(ids).take(n) {
        total += log_sum_exp(row) - row[id];
    }
    total / n as f64
}

fn softmax_minus_onehot(row: ndarray::ArrayView1<f64>, id: usize, scale: f64) -> ndarray::Array1<f64> {
    let lse = log_sum_exp(row);
    let mut g = row.mapv(|v| (v - lse).exp() * scale);
    g[id] -= scale;
    g
}

/// Frames scored after the trim policy.
fn scored_frames(out: &SeparationOutput, targets: &[UnitSequence]) -> Result<usize> {
    let k = out.num_streams();
    if targets.len() != k {
        return Err(Error::StreamCountMismatch {
            expected: k,
            found: targets.len(),
        });
    }
    let n = out.num_frames();
    let j = out.num_units();
    let mut min = n;
    for t in targets {
        if t.len().abs_diff(n) > LENGTH_TOLERANCE {
            return Err(Error::LengthMismatch {
                left: t.len(),
                right: n,
                tolerance: LENGTH_TOLERANCE,
            });
        }
        if let Some(&bad) = t.ids.iter().find(|&&id| id >= j) {
            return Err(Error::InvalidUnits(format!("unit id {bad} outside vocabulary of {j}")));
        }
        min = min.min(t.len());
    }
    if min == 0 {
        return Err(Error::TooShort("no frames to score".into()));
    }
    Ok(min)
}

/// `cost[[i, j]]`: mean cross-entropy of output stream `i` against target `j`.
fn pair_costs(out: &SeparationOutput, targets: &[UnitSequence], n: usize) -> Array2<f64> {
    let k = targets.len();
    Array2::from_shape_fn((k, k), |(i, j)| {
        cross_entropy(out.unit_logits.index_axis(Axis(0), i), &targets[j].ids, n)
    })
}

fn check_speakers(out: &SeparationOutput, speakers: &[usize]) -> Result<()> {
    let s = out.speaker_logits.ncols();
    if speakers.len() != out.num_streams() {
        return Err(Error::StreamCountMismatch {
            expected: out.num_streams(),
            found: speakers.len(),
        });
    }
    if let Some(&id) = speakers.iter().find(|&&id| id >= s) {
        return Err(Error::UnknownSpeaker { id, count: s });
    }
    Ok(())
}

/// Picks the assignment of target streams to output streams with the lowest
/// total unit cross-entropy; speaker cross-entropy, if targets are given, is
/// added under that assignment with weight `speaker_weight`.
pub fn upit_loss(
    out: &SeparationOutput,
    targets: &[UnitSequence],
    speaker_targets: Option<&[usize]>,
    speaker_weight: f64,
) -> Result<PitResult> {
    let n = scored_frames(out, targets)?;
    let costs = pair_costs(out, targets, n);
    let permutation = best_permutation(&costs);
    let k = targets.len();
    let per_stream_loss: Vec<f64> = (0..k).map(|i| costs[[i, permutation[i]]]).collect();
    let mut loss = permutation_cost(&costs, &permutation) / k as f64;
    if let Some(spk) = speaker_targets {
        check_speakers(out, spk)?;
        let mut total = 0.0;
        for (i, &p) in permutation.iter().enumerate() {
            let row = out.speaker_logits.row(i);
            total += log_sum_exp(row) - row[spk[p]];
        }
        loss += speaker_weight * total / k as f64;
    }
    Ok(PitResult {
        loss,
        permutation,
        per_stream_loss,
    })
}

/// [`upit_loss`] together with its gradient (the permutation is held fixed).
pub fn upit_loss_grad(
    out: &SeparationOutput,
    targets: &[UnitSequence],
    speaker_targets: Option<&[usize]>,
    speaker_weight: f64,
) -> Result<(PitResult, PitGradients)> {
    let result = upit_loss(out, targets, speaker_targets, speaker_weight)?;
    let n = scored_frames(out, targets)?;
    let k = targets.len();
    let mut du = Array3::zeros(out.unit_logits.dim());
    let scale = 1.0 / (k * n) as f64;
    for (i, &p) in result.permutation.iter().enumerate() {
        let logits = out.unit_logits.index_axis(Axis(0), i);
        for (t, &id) in targets[p].ids.iter().enumerate().take(n) {
            let g = softmax_minus_onehot(logits.row(t), id, scale);
            du.index_axis_mut(Axis(0), i).row_mut(t).assign(&g);
        }
    }
    let mut ds = Array2::zeros(out.speaker_logits.dim());
    if let Some(spk) = speaker_targets {
        let scale = speaker_weight / k as f64;
        for (i, &p) in result.permutation.iter().enumerate() {
            let g = softmax_minus_onehot(out.speaker_logits.row(i), spk[p], scale);
            ds.row_mut(i).assign(&g);
        }
    }
    Ok((
        result,
        PitGradients {
            unit_logits: du,
            speaker_logits: ds,
        },
    ))
}
