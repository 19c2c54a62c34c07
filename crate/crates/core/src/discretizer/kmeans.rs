//! Lloyd's k-means with k-means++ seeding.

use std::collections::HashSet;

use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Codebook;
use crate::error::{Error, Result};
use crate::parallel::Execution;
use crate::signal::{FeatureFingerprint, FeatureSequence};

/// Relative inertia change below which training stops.
pub const CONVERGENCE_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansLog {
    /// Inertia (sum of squared distances) after each assignment step.
    pub inertia: Vec<f64>,
    pub converged: bool,
}

pub(crate) fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared Euclidean distance; ties go to the lowest index.
pub(crate) fn nearest(frame: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = squared_distance(frame, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(data: &Array2<f64>, centroids: &Array2<f64>, exec: Execution) -> Vec<(usize, f64)> {
    // chunked so the parallel path amortizes scheduling
    const CHUNK: usize = 512;
    let n = data.nrows();
    let chunks = n.div_ceil(CHUNK);
    exec.map_range(chunks, |c| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(n);
        (lo..hi)
            .map(|i| nearest(data.row(i), centroids))
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

fn kmeans_plus_plus(data: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = data.nrows();
    let mut centroids = Array2::zeros((k, data.ncols()));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut d2: Vec<f64> = data
        .rows()
        .into_iter()
        .map(|r| squared_distance(r, centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            // guard against landing on a duplicate through rounding
            if d2[chosen] == 0.0 {
                chosen = d2
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |b, (i, &d)| if d > b.1 { (i, d) } else { b })
                    .0;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, r) in data.rows().into_iter().enumerate() {
            let d = squared_distance(r, centroids.row(c));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// Trains a `J`-centroid codebook on every frame of the corpus.
pub fn train_codebook<'a, I>(
    corpus: I,
    num_units: usize,
    max_iters: usize,
    seed: u64,
) -> Result<(Codebook, KMeansLog)>
where
    I: IntoIterator<Item = &'a FeatureSequence>,
{
    train_codebook_with(corpus, num_units, max_iters, seed, Execution::default())
}

pub fn train_codebook_with<'a, I>(
    corpus: I,
    num_units: usize,
    max_iters: usize,
    seed: u64,
    exec: Execution,
) -> Result<(Codebook, KMeansLog)>
where
    I: IntoIterator<Item = &'a FeatureSequence>,
{
    if num_units < 2 {
        return Err(Error::InvalidCodebook(format!(
            "need at least 2 clusters, got {num_units}"
        )));
    }
    let mut fingerprint: Option<FeatureFingerprint> = None;
    let mut rows = Vec::new();
    for seq in corpus {
        let fp = FeatureFingerprint {
            hop: seq.hop,
            downsample: seq.downsample,
            dim: seq.dim(),
            sample_rate: seq.sample_rate,
        };
        match &fingerprint {
            None => fingerprint = Some(fp),
            Some(existing) if *existing != fp => {
                return Err(Error::FingerprintMismatch {
                    expected: existing.to_string(),
                    found: fp.to_string(),
                })
            }
            _ => {}
        }
        rows.push(seq.frames.view());
    }
    let fingerprint = fingerprint.ok_or(Error::EmptyCorpus)?;
    let data = ndarray::concatenate(Axis(0), &rows).map_err(|_| Error::EmptyCorpus)?;
    if data.nrows() == 0 {
        return Err(Error::EmptyCorpus);
    }
    let distinct: HashSet<Vec<u64>> = data
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    if distinct.len() < num_units {
        return Err(Error::TooFewDistinctFrames {
            distinct: distinct.len(),
            requested: num_units,
        });
    }
    drop(distinct);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(&data, num_units, &mut rng);
    let mut inertia_log = Vec::new();
    let mut converged = false;
    let mut previous: Option<Vec<usize>> = None;
    for _ in 0..max_iters.max(1) {
        let assigned = assign(&data, &centroids, exec);
        let inertia: f64 = assigned.iter().map(|a| a.1).sum();
        let labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        if let Some(&last) = inertia_log.last() {
            let rel = (last - inertia) / f64::max(last, f64::MIN_POSITIVE);
            inertia_log.push(inertia);
            if rel.abs() < CONVERGENCE_TOL || previous.as_ref() == Some(&labels) {
                converged = true;
                break;
            }
        } else {
            inertia_log.push(inertia);
        }

        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; num_units];
        for (i, &l) in labels.iter().enumerate() {
            let mut row = sums.row_mut(l);
            row += &data.row(i);
            counts[l] += 1;
        }
        let mut taken: HashSet<usize> = HashSet::new();
        for j in 0..num_units {
            if counts[j] > 0 {
                let mean = sums.row(j).mapv(|v| v / counts[j] as f64);
                centroids.row_mut(j).assign(&mean);
            } else {
                // reseed an empty cluster at the worst-served frame
                let far = assigned
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken.contains(i))
                    .fold((0, -1.0), |b, (i, a)| if a.1 > b.1 { (i, a.1) } else { b })
                    .0;
                taken.insert(far);
                centroids.row_mut(j).assign(&data.row(far));
            }
        }
        previous = Some(labels);
    }

    let codebook = Codebook::new(centroids, fingerprint)?;
    if let Some((a, b)) = codebook.duplicate_pair() {
        return Err(Error::InvalidCodebook(format!(
            "centroids {a} and {b} coincide after training"
        )));
    }
    Ok((
        codebook,
        KMeansLog {
            inertia: inertia_log,
            converged,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn seq(frames: Array2<f64>) -> FeatureSequence {
        FeatureSequence {
            frames,
            hop: 80,
            downsample: 2,
            sample_rate: 8000,
        }
    }

    #[test]
    fn separates_two_blobs() {
        let mut data = Array2::zeros((200, 2));
        for i in 100..200 {
            data.row_mut(i).fill(10.0);
        }
        // one extra distinct point so there are at least J distinct frames
        let s = seq(data);
        let (cb, _) = train_codebook([&s], 2, 20, 1).unwrap();
        let mut rows: Vec<Vec<f64>> = cb.centroids().rows().into_iter().map(|r| r.to_vec()).collect();
        rows.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        assert_eq!(rows, vec![vec![0.0, 0.0], vec![10.0, 10.0]]);
    }

    #[test]
    fn inertia_never_increases_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Array2::from_shape_simple_fn((600, 5), || StandardNormal.sample(&mut rng));
        let s = seq(data);
        let (a, log) = train_codebook([&s], 16, 100, 42).unwrap();
        for w in log.inertia.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{w:?}");
        }
        let (b, log_b) = train_codebook_with([&s], 16, 100, 42, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(log, log_b);
    }

    #[test]
    fn error_cases() {
        let s = seq(Array2::zeros((50, 3)));
        assert!(matches!(
            train_codebook([&s], 2, 10, 0),
            Err(Error::TooFewDistinctFrames { distinct: 1, requested: 2 })
        ));
        assert!(matches!(
            train_codebook(std::iter::empty(), 2, 10, 0),
            Err(Error::EmptyCorpus)
        ));
    }
}
