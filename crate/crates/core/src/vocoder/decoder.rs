//! Convolutional unit-to-mel regressor with an additive speaker embedding.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unitsep_nn::{Adam, Graph, Linear, ParamId, ParamStore, Var};

use super::upsample_matrix;
use crate::error::{Error, Result};
use crate::train::{batch_at, ProgressLog, ProgressRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Speaker embedding width.
    pub embedding_dim: usize,
    pub hidden: usize,
    pub kernel: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 32,
            hidden: 64,
            kernel: 5,
        }
    }
}

/// Maps centroid features at the unit rate to log-mel frames at the
/// analysis rate, as a residual correction on the interpolated centroids.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub store: ParamStore,
    input: Linear,
    speakers: Option<ParamId>,
    conv1: Linear,
    conv2: Linear,
    output: Linear,
    num_speakers: usize,
}

impl Decoder {
    pub fn new(config: DecoderConfig, dim: usize, num_speakers: usize, seed: u64) -> Result<Self> {
        if config.embedding_dim == 0 || config.hidden == 0 || config.kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(
                "decoder needs positive widths and an odd kernel".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let e = config.embedding_dim;
        let h = config.hidden;
        let k = config.kernel;
        let input = Linear::new(&mut store, "input", dim, e, &mut rng);
        let speakers = (num_speakers > 0).then(|| store.add_uniform("speaker", num_speakers, e, 0.1, &mut rng));
        let conv1 = Linear::new(&mut store, "conv1", k * e, h, &mut rng);
        let conv2 = Linear::new(&mut store, "conv2", k * h, h, &mut rng);
        let output = Linear::new(&mut store, "output", h, dim, &mut rng);
        // start from the plain interpolation
        store.get_mut(output.weight).fill(0.0);
        store.get_mut(output.bias).fill(0.0);
        Ok(Self {
            config,
            store,
            input,
            speakers,
            conv1,
            conv2,
            output,
            num_speakers,
        })
    }

    pub fn num_speakers(&self) -> usize {
        self.num_speakers
    }

    /// The learned embedding table (`num_speakers × E`), if conditioned.
    pub fn speaker_table(&self) -> Option<&Array2<f64>> {
        self.speakers.map(|id| self.store.get(id))
    }

    fn check_speaker(&self, speaker: Option<usize>) -> Result<()> {
        match (self.num_speakers, speaker) {
            (0, None) => Ok(()),
            (0, Some(id)) => Err(Error::UnknownSpeaker { id, count: 0 }),
            (n, Some(id)) if id >= n => Err(Error::UnknownSpeaker { id, count: n }),
            (_, Some(_)) => Ok(()),
            (n, None) => Err(Error::InvalidConfig(format!(
                "decoder is conditioned on {n} speakers; a speaker id is required"
            ))),
        }
    }

    pub(crate) fn graph_forward(
        &self,
        g: &mut Graph,
        centroids: &Array2<f64>,
        speaker: Option<usize>,
        mel_frames: usize,
    ) -> Result<Var> {
        self.check_speaker(speaker)?;
        let up = upsample_matrix(centroids.nrows(), mel_frames);
        let base = up.dot(centroids);
        let x = g.input(centroids.clone());
        let mut h = self.input.forward(g, x);
        if let (Some(table), Some(s)) = (self.speakers, speaker) {
            let t = g.param(table);
            let row = g.gather_rows(t, vec![s]);
            h = g.add_row(h, row);
        }
        let u = g.input(up);
        let h = g.matmul(u, h);
        let half = (self.config.kernel / 2) as isize;
        let c = g.unfold_rows(h, self.config.kernel, 1, -half, mel_frames);
        let c = self.conv1.forward(g, c);
        let c = g.relu(c);
        let c = g.unfold_rows(c, self.config.kernel, 1, -half, mel_frames);
        let c = self.conv2.forward(g, c);
        let c = g.relu(c);
        let delta = self.output.forward(g, c);
        let base = g.input(base);
        Ok(g.add(base, delta))
    }

    /// Predicted log-mel frames (`mel_frames × D`).
    pub fn predict(&self, centroids: &Array2<f64>, speaker: Option<usize>, mel_frames: usize) -> Result<Array2<f64>> {
        let mut g = Graph::new(&self.store);
        let out = self.graph_forward(&mut g, centroids, speaker, mel_frames)?;
        Ok(g.value(out).clone())
    }
}

/// One training item: centroid features, target log-mel, speaker.
pub struct DecoderExample {
    pub centroids: Array2<f64>,
    pub target: Array2<f64>,
    pub speaker: Option<usize>,
}

/// Mean absolute error and its gradient with respect to `pred`.
fn l1(pred: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = pred.len() as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|d| d.abs()).sum::<f64>() / n;
    (loss, diff.mapv(|d| d.signum() / n))
}

/// Minimizes mean L1 between predicted and target log-mel frames.
/// Returns the per-step mean batch loss.
pub fn fit(
    decoder: &mut Decoder,
    examples: &[DecoderExample],
    train: &TrainConfig,
    optimizer: &mut Adam,
    start_step: usize,
    log: &mut ProgressLog,
) -> Result<Vec<f64>> {
    train.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut curve = Vec::with_capacity(train.steps.saturating_sub(start_step));
    for step in start_step..train.steps {
        let batch = batch_at(train.seed, step, examples.len(), train.batch_size);
        let mut grads = unitsep_nn::Gradients::zeros_like(&decoder.store);
        let mut total = 0.0;
        for &i in &batch {
            let ex = &examples[i];
            let g_store = &decoder.store;
            let mut g = Graph::new(g_store);
            let out = decoder.graph_forward(&mut g, &ex.centroids, ex.speaker, ex.target.nrows())?;
            let (loss, seed) = l1(g.value(out), &ex.target);
            total += loss;
            grads.accumulate(&g.backward(&[(out, seed)]));
        }
        grads.scale(1.0 / batch.len() as f64);
        let norm = optimizer.update(&mut decoder.store, &grads);
        let loss = total / batch.len() as f64;
        curve.push(loss);
        if train.log_every > 0 && (step + 1) % train.log_every == 0 {
            log.record(&ProgressRecord {
                step: step + 1,
                loss,
                swap_rate: None,
                grad_norm: norm,
            })?;
        }
    }
    Ok(curve)
}
