//! Mixture waveform → `K` streams of per-frame unit posteriors plus
//! per-stream speaker posteriors.

pub mod dualpath;
mod pit;
pub mod transformer;

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unitsep_nn::{Adam, AdamConfig, Gradients, Graph, LayerNorm, Linear, ParamStore, Var};

pub use dualpath::{DualPathConfig, DualPathStack, LogMagnitudeFrontEnd};
pub use pit::{
    cross_entropy, upit_loss, upit_loss_grad, PitGradients, PitResult, DEFAULT_SPEAKER_WEIGHT,
    LENGTH_TOLERANCE,
};
pub use transformer::{TransformerConfig, TransformerEncoder};

use crate::assignment::best_permutation;
use crate::discretizer::{Codebook, UnitSequence};
use crate::error::{Error, Result};
use crate::signal::{frame_count, LogMelConfig, LogMelExtractor, Waveform};
use crate::train::{batch_at, load_model, save_model, ProgressRecord, TrainConfig, TrainSession};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Transformer,
    #[default]
    Dualpath,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparatorConfig {
    pub architecture: Architecture,
    /// Output streams `K`.
    pub streams: usize,
    /// Unit vocabulary `J`.
    pub units: usize,
    /// Training speakers; 0 disables the speaker head.
    pub num_speakers: usize,
    pub sample_rate: u32,
    /// Samples per output frame; equals the codebook frame hop.
    pub frame_hop: usize,
    /// Filterbank front end of the transformer variant.
    pub mel: LogMelConfig,
    #[serde(default)]
    pub dualpath: DualPathConfig,
    #[serde(default)]
    pub transformer: TransformerConfig,
    pub speaker_weight: f64,
}

impl SeparatorConfig {
    /// Desk-scale configuration producing frames at the codebook's rate.
    pub fn for_codebook(cb: &Codebook, architecture: Architecture, streams: usize, num_speakers: usize) -> Self {
        let fp = cb.features();
        let mut mel = LogMelConfig::for_rate(fp.sample_rate);
        mel.hop = fp.hop;
        mel.downsample = fp.downsample;
        Self {
            architecture,
            streams,
            units: cb.size(),
            num_speakers,
            sample_rate: fp.sample_rate,
            frame_hop: fp.frame_hop(),
            mel,
            dualpath: DualPathConfig::desk(),
            transformer: TransformerConfig::desk(),
            speaker_weight: DEFAULT_SPEAKER_WEIGHT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.streams == 0 {
            return Err(Error::InvalidConfig("K must be >= 1".into()));
        }
        if self.units < 2 {
            return Err(Error::InvalidConfig("J must be >= 2".into()));
        }
        if self.frame_hop == 0 || self.mel.frame_hop() != self.frame_hop {
            return Err(Error::InvalidConfig(format!(
                "frame hop {} does not match the filterbank front end ({} × {})",
                self.frame_hop, self.mel.hop, self.mel.downsample
            )));
        }
        if self.mel.downsample != 2 && self.architecture == Architecture::Transformer {
            return Err(Error::InvalidConfig(
                "the transformer subsampler reduces the frame rate by exactly 2".into(),
            ));
        }
        if !(self.speaker_weight >= 0.0) {
            return Err(Error::InvalidConfig("speaker_weight must be nonnegative".into()));
        }
        self.dualpath.validate()?;
        self.transformer.validate()
    }

    /// Width of the per-stream latent features.
    pub fn latent_dim(&self) -> usize {
        match self.architecture {
            Architecture::Dualpath => self.dualpath.channels,
            Architecture::Transformer => self.transformer.model_dim(),
        }
    }
}

/// Network outputs for one mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparationOutput {
    /// `K × N × J`.
    pub unit_logits: Array3<f64>,
    /// `K × num_speakers`.
    pub speaker_logits: Array2<f64>,
    /// `K × N × H`, the per-stream features the speaker head averages.
    pub latent: Array3<f64>,
}

impl SeparationOutput {
    pub fn num_streams(&self) -> usize {
        self.unit_logits.dim().0
    }

    pub fn num_frames(&self) -> usize {
        self.unit_logits.dim().1
    }

    pub fn num_units(&self) -> usize {
        self.unit_logits.dim().2
    }
}

/// Temporal mean of each stream's latent features through `x · W + b`.
pub fn speaker_head(latent: &Array3<f64>, weight: ArrayView2<f64>, bias: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (k, n, h) = latent.dim();
    if n == 0 {
        return Err(Error::TooShort("speaker head needs at least one frame".into()));
    }
    if weight.nrows() != h || bias.dim() != (1, weight.ncols()) {
        return Err(Error::DimensionMismatch {
            expected: h,
            found: weight.nrows(),
        });
    }
    let mut means = Array2::zeros((k, h));
    for (i, stream) in latent.outer_iter().enumerate() {
        means.row_mut(i).assign(&stream.mean_axis(Axis(0)).expect("n >= 1"));
    }
    Ok(means.dot(&weight) + bias)
}

/// Index of the largest entry; the lowest index wins ties.
fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Per-frame argmax units and per-stream argmax speakers.
pub fn decode_units(out: &SeparationOutput, frame_hop: usize, codebook_id: &str) -> (Vec<UnitSequence>, Vec<Option<usize>>) {
    let speakers: Vec<Option<usize>> = out
        .speaker_logits
        .outer_iter()
        .map(|row| (!row.is_empty()).then(|| argmax(row)))
        .collect();
    let units = out
        .unit_logits
        .outer_iter()
        .zip(&speakers)
        .map(|(stream, &speaker)| UnitSequence {
            ids: stream.outer_iter().map(argmax).collect(),
            frame_hop,
            codebook_id: codebook_id.to_string(),
            speaker_id: speaker,
        })
        .collect();
    (units, speakers)
}

/// Fraction of frames whose unit matches the target, under the stream
/// assignment with the most matches.
pub fn unit_accuracy(predicted: &[UnitSequence], targets: &[UnitSequence]) -> Result<f64> {
    if predicted.len() != targets.len() || predicted.is_empty() {
        return Err(Error::StreamCountMismatch {
            expected: targets.len(),
            found: predicted.len(),
        });
    }
    let k = targets.len();
    let n = predicted.iter().chain(targets).map(UnitSequence::len).min().unwrap_or(0);
    if n == 0 {
        return Err(Error::TooShort("no frames to compare".into()));
    }
    let hits = Array2::from_shape_fn((k, k), |(i, j)| {
        predicted[i].ids[..n]
            .iter()
            .zip(&targets[j].ids[..n])
            .filter(|(a, b)| a == b)
            .count() as f64
    });
    let perm = best_permutation(&hits.mapv(|h| -h));
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| hits[[i, j]]).sum();
    Ok(total / (k * n) as f64)
}

#[derive(Clone, Debug)]
enum Body {
    Dualpath {
        front: LogMagnitudeFrontEnd,
        encoder: Linear,
        norm: LayerNorm,
        stack: DualPathStack,
    },
    Transformer {
        extractor: LogMelExtractor,
        encoder: TransformerEncoder,
    },
}

/// Graph handles for one forward pass.
pub struct StreamVars {
    pub unit_logits: Vec<Var>,
    pub speaker_logits: Vec<Var>,
    pub latent: Vec<Var>,
}

/// One training item.
#[derive(Clone, Copy, Debug)]
pub struct SeparatorExample<'a> {
    pub mixture: &'a Waveform,
    pub targets: &'a [UnitSequence],
    pub speakers: Option<&'a [usize]>,
}

/// The pseudo-ASR network: encoder, separator, `K` projection heads, a shared
/// frame classifier and a speaker head.
#[derive(Clone, Debug)]
pub struct Separator {
    config: SeparatorConfig,
    codebook_id: String,
    pub store: ParamStore,
    body: Body,
    heads: Linear,
    classifier: Linear,
    speaker: Option<Linear>,
}

impl Separator {
    pub fn new(config: SeparatorConfig, codebook_id: &str, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = config.latent_dim();
        let body = match config.architecture {
            Architecture::Dualpath => {
                let dp = &config.dualpath;
                let front = LogMagnitudeFrontEnd::centred(dp.kernel, config.frame_hop);
                let encoder = Linear::new(&mut store, "encoder", front.bins(), dp.channels, &mut rng);
                let norm = LayerNorm::new(&mut store, "encoder.norm", dp.channels);
                let stack = DualPathStack::new(&mut store, "dualpath", dp.channels, dp.hidden, dp.blocks, dp.segment, &mut rng);
                Body::Dualpath {
                    front,
                    encoder,
                    norm,
                    stack,
                }
            }
            Architecture::Transformer => {
                let extractor = LogMelExtractor::new(config.mel.clone())?;
                let encoder = TransformerEncoder::new(&mut store, "transformer", &config.transformer, config.mel.num_mels, &mut rng);
                Body::Transformer { extractor, encoder }
            }
        };
        let heads = Linear::new(&mut store, "heads", h, config.streams * h, &mut rng);
        let classifier = Linear::new(&mut store, "classifier", h, config.units, &mut rng);
        let speaker = (config.num_speakers > 0).then(|| Linear::new(&mut store, "speaker", h, config.num_speakers, &mut rng));
        Ok(Self {
            config,
            codebook_id: codebook_id.to_string(),
            store,
            body,
            heads,
            classifier,
            speaker,
        })
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.config
    }

    pub fn codebook_id(&self) -> &str {
        &self.codebook_id
    }

    /// Output frames for an input of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        frame_count(len, self.config.frame_hop, 1)
    }

    /// Network input for a waveform, plus its frame count.
    pub fn prepare(&self, m: &Waveform) -> Result<(Array2<f64>, usize)> {
        if m.sample_rate() != self.config.sample_rate {
            return Err(Error::InvalidWaveform(format!(
                "separator expects {} Hz, got {} Hz",
                self.config.sample_rate,
                m.sample_rate()
            )));
        }
        let n = self.frames_for(m.len());
        if n == 0 {
            return Err(Error::TooShort("input yields no frames".into()));
        }
        let input = match &self.body {
            Body::Dualpath { front, .. } => front.frames(m.samples(), n),
            Body::Transformer { extractor, .. } => extractor.analysis_frames(m)?.frames,
        };
        Ok((input, n))
    }

    /// Builds the forward pass on a prepared input.
    pub fn graph_forward(&self, g: &mut Graph, input: &Array2<f64>, n: usize) -> StreamVars {
        let x = g.input(input.clone());
        let hidden = match &self.body {
            Body::Dualpath {
                encoder, norm, stack, ..
            } => {
                let e = encoder.forward(g, x);
                let e = norm.forward(g, e);
                stack.forward(g, e)
            }
            Body::Transformer { encoder, .. } => encoder.forward(g, x, n),
        };
        let h = self.config.latent_dim();
        let all = self.heads.forward(g, hidden);
        let mut vars = StreamVars {
            unit_logits: Vec::new(),
            speaker_logits: Vec::new(),
            latent: Vec::new(),
        };
        for k in 0..self.config.streams {
            let z = g.slice_cols(all, k * h, (k + 1) * h);
            let z = g.relu(z);
            vars.unit_logits.push(self.classifier.forward(g, z));
            if let Some(head) = &self.speaker {
                let mean = g.segment_mean(z, vec![(0, n)]);
                vars.speaker_logits.push(head.forward(g, mean));
            }
            vars.latent.push(z);
        }
        vars
    }

    fn collect(&self, g: &Graph, vars: &StreamVars) -> SeparationOutput {
        let k = self.config.streams;
        let stack3 = |vs: &[Var]| {
            let (n, c) = g.shape(vs[0]);
            let mut out = Array3::zeros((k, n, c));
            for (i, &v) in vs.iter().enumerate() {
                out.slice_mut(s![i, .., ..]).assign(g.value(v));
            }
            out
        };
        let mut speaker_logits = Array2::zeros((k, self.config.num_speakers));
        for (i, &v) in vars.speaker_logits.iter().enumerate() {
            speaker_logits.row_mut(i).assign(&g.value(v).row(0));
        }
        SeparationOutput {
            unit_logits: stack3(&vars.unit_logits),
            speaker_logits,
            latent: stack3(&vars.latent),
        }
    }

    /// Evaluation-mode forward pass.
    pub fn forward(&self, m: &Waveform) -> Result<SeparationOutput> {
        let (input, n) = self.prepare(m)?;
        let mut g = Graph::new(&self.store);
        let vars = self.graph_forward(&mut g, &input, n);
        Ok(self.collect(&g, &vars))
    }

    /// Decoded unit sequences and speaker ids for a mixture.
    pub fn separate(&self, m: &Waveform) -> Result<(Vec<UnitSequence>, Vec<Option<usize>>)> {
        let out = self.forward(m)?;
        Ok(decode_units(&out, self.config.frame_hop, &self.codebook_id))
    }

    fn check_targets(&self, targets: &[UnitSequence]) -> Result<()> {
        for t in targets {
            if t.codebook_id != self.codebook_id {
                return Err(Error::FingerprintMismatch {
                    expected: self.codebook_id.clone(),
                    found: t.codebook_id.clone(),
                });
            }
        }
        Ok(())
    }

    fn speaker_targets<'a>(&self, speakers: Option<&'a [usize]>) -> Option<&'a [usize]> {
        speakers.filter(|s| self.speaker.is_some() && !s.is_empty())
    }

    /// PIT loss on a prepared input and the parameter gradients.
    pub fn loss_and_gradients(
        &self,
        input: &Array2<f64>,
        n: usize,
        targets: &[UnitSequence],
        speakers: Option<&[usize]>,
    ) -> Result<(PitResult, Gradients)> {
        let mut g = Graph::new(&self.store);
        let vars = self.graph_forward(&mut g, input, n);
        let out = self.collect(&g, &vars);
        let (result, grads) = upit_loss_grad(&out, targets, self.speaker_targets(speakers), self.config.speaker_weight)?;
        let mut seeds = Vec::new();
        for (i, &v) in vars.unit_logits.iter().enumerate() {
            seeds.push((v, grads.unit_logits.index_axis(Axis(0), i).to_owned()));
        }
        for (i, &v) in vars.speaker_logits.iter().enumerate() {
            seeds.push((v, grads.speaker_logits.slice(s![i..i + 1, ..]).to_owned()));
        }
        Ok((result, g.backward(&seeds)))
    }

    /// PIT loss of one example without gradients.
    pub fn loss(&self, m: &Waveform, targets: &[UnitSequence], speakers: Option<&[usize]>) -> Result<PitResult> {
        self.check_targets(targets)?;
        let out = self.forward(m)?;
        upit_loss(&out, targets, self.speaker_targets(speakers), self.config.speaker_weight)
    }

    /// Runs optimizer steps `optimizer.step .. train.steps`, returning the mean
    /// batch loss of each step. The batch schedule depends only on
    /// `(train.seed, step)`, so a resumed run repeats the uninterrupted one.
    pub fn fit(
        &mut self,
        data: &[SeparatorExample<'_>],
        train: &TrainConfig,
        optimizer: &mut Adam,
        session: &mut TrainSession,
    ) -> Result<Vec<f64>> {
        train.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for ex in data {
            self.check_targets(ex.targets)?;
        }
        optimizer.config = train.adam();
        let inputs = session.exec.try_map(data, |ex| self.prepare(ex.mixture))?;
        let start = optimizer.step as usize;
        let mut curve = Vec::with_capacity(train.steps.saturating_sub(start));
        for step in start..train.steps {
            let batch = batch_at(train.seed, step, data.len(), train.batch_size);
            let results = session.exec.try_map(&batch, |&i| {
                let (input, n) = &inputs[i];
                self.loss_and_gradients(input, *n, data[i].targets, data[i].speakers)
            })?;
            let mut grads = Gradients::zeros_like(&self.store);
            let mut loss = 0.0;
            let mut swaps = 0usize;
            for (r, g) in &results {
                grads.accumulate(g);
                loss += r.loss;
                swaps += usize::from(r.permutation.iter().enumerate().any(|(i, &p)| i != p));
            }
            let b = results.len() as f64;
            grads.scale(1.0 / b);
            let grad_norm = optimizer.update(&mut self.store, &grads);
            loss /= b;
            curve.push(loss);
            let done = step + 1;
            if train.log_every > 0 && (done % train.log_every == 0 || done == train.steps) {
                session.log.record(&ProgressRecord {
                    step: done,
                    loss,
                    swap_rate: Some(swaps as f64 / b),
                    grad_norm,
                })?;
            }
            if session.checkpoint_due(train, done) {
                if let Some(path) = &session.checkpoint {
                    self.save(path, Some(optimizer))?;
                }
            }
        }
        Ok(curve)
    }

    pub fn save(&self, path: impl AsRef<Path>, optimizer: Option<&Adam>) -> Result<()> {
        save_model(path, "separator", &self.config, Some(&self.codebook_id), &self.store, optimizer)
    }

    /// Restores a separator and, if present, its optimizer state.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Option<Adam>)> {
        let state = load_model(path, "separator")?;
        let config: SeparatorConfig = state.config()?;
        let cb = state
            .codebook_id()
            .ok_or_else(|| Error::InvalidConfig("separator checkpoint lacks a codebook id".into()))?
            .to_string();
        let mut model = Self::new(config, &cb, 0)?;
        model.store.load_values(state.params)?;
        let adam = match state.optimizer {
            Some((step, arrays)) => Some(Adam::restore(AdamConfig::default(), step, &model.store, arrays)?),
            None => None,
        };
        Ok((model, adam))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::FeatureFingerprint;
    use ndarray::array;
    use proptest::prelude::*;

    fn tiny_codebook(j: usize) -> Codebook {
        Codebook::new(
            Array2::from_shape_fn((j, 40), |(a, b)| (a * 40 + b) as f64 * 0.01),
            FeatureFingerprint {
                hop: 80,
                downsample: 2,
                dim: 40,
                sample_rate: 8000,
            },
        )
        .unwrap()
    }

    fn tiny(arch: Architecture, k: usize, speakers: usize) -> Separator {
        let cb = tiny_codebook(7);
        let mut c = SeparatorConfig::for_codebook(&cb, arch, k, speakers);
        c.dualpath = DualPathConfig {
            channels: 6,
            kernel: 320,
            blocks: 1,
            hidden: 3,
            segment: 4,
        };
        c.transformer = TransformerConfig {
            blocks: 1,
            heads: 2,
            head_dim: 3,
            ff_dim: 8,
        };
        Separator::new(c, &cb.id(), 3).unwrap()
    }

    fn wave(len: usize, seed: u64) -> Waveform {
        let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        Waveform::new(
            (0..len)
                .map(|i| {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    0.1 * (i as f64 * 0.07).sin() + 0.02 * ((x >> 33) as f64 / (1u64 << 31) as f64 - 0.5)
                })
                .collect(),
            8000,
        )
        .unwrap()
    }

    #[test]
    fn output_shapes_follow_frame_count() {
        for arch in [Architecture::Dualpath, Architecture::Transformer] {
            let m = tiny(arch, 2, 3);
            let out = m.forward(&wave(16000, 1)).unwrap();
            assert_eq!(out.unit_logits.dim(), (2, 100, 7));
            assert_eq!(out.speaker_logits.dim(), (2, 3));
            assert_eq!(out.latent.dim().1, 100);
            assert!(out.unit_logits.iter().all(|v| v.is_finite()));
            let single = tiny(arch, 1, 0).forward(&wave(1234, 2)).unwrap();
            assert_eq!(single.unit_logits.dim(), (1, 8, 7));
            assert_eq!(single.speaker_logits.dim(), (1, 0));
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_rejects_bad_input() {
        let m = tiny(Architecture::Dualpath, 2, 0);
        let w = wave(4000, 5);
        assert_eq!(m.forward(&w).unwrap(), m.forward(&w).unwrap());
        assert!(m.forward(&Waveform::new(vec![0.0; 320], 16000).unwrap()).is_err());
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let m = tiny(Architecture::Dualpath, 1, 0);
        let w = wave(8000, 9);
        let t = UnitSequence {
            ids: (0..50).map(|i| i % 7).collect(),
            frame_hop: 160,
            codebook_id: m.codebook_id().to_string(),
            speaker_id: None,
        };
        let r = m.loss(&w, std::slice::from_ref(&t), None).unwrap();
        assert!((r.loss - 7f64.ln()).abs() < 0.5, "{}", r.loss);
        let mut other = t;
        other.codebook_id = "x".into();
        assert!(matches!(m.loss(&w, &[other], None), Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn speaker_head_examples() {
        let w = array![[1.0, 0.0, 2.0], [0.5, -1.0, 0.0]];
        let b = array![[0.1, 0.2, 0.3]];
        // constant over time equals the single-frame case
        let one = Array3::from_shape_fn((1, 1, 2), |(_, _, h)| [0.4, -0.2][h]);
        let many = Array3::from_shape_fn((1, 5, 2), |(_, _, h)| [0.4, -0.2][h]);
        assert_eq!(speaker_head(&one, w.view(), b.view()).unwrap(), speaker_head(&many, w.view(), b.view()).unwrap());
        // two frames by hand: mean (1, 2) → (1·1 + 2·0.5, 1·0 + 2·−1, 1·2 + 0) + b
        let two = Array3::from_shape_vec((1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let got = speaker_head(&two, w.view(), b.view()).unwrap();
        let want = array![[2.1, -1.8, 2.3]];
        assert!((got - want).iter().all(|d| d.abs() < 1e-12));
        assert!(speaker_head(&Array3::zeros((1, 0, 2)), w.view(), b.view()).is_err());
    }

    #[test]
    fn decode_examples() {
        let mut logits = Array3::zeros((1, 3, 4));
        for (t, id) in [2usize, 0, 3].iter().enumerate() {
            logits[[0, t, *id]] = 1.0;
        }
        let out = SeparationOutput {
            unit_logits: logits,
            speaker_logits: array![[0.3, 0.3, 0.1]],
            latent: Array3::zeros((1, 3, 1)),
        };
        let (units, speakers) = decode_units(&out, 160, "cb");
        assert_eq!(units[0].ids, vec![2, 0, 3]);
        assert_eq!(speakers, vec![Some(0)]);
        assert_eq!(units[0].speaker_id, Some(0));
    }

    #[test]
    fn unit_accuracy_uses_best_assignment() {
        let s = |ids: Vec<usize>| UnitSequence {
            ids,
            frame_hop: 160,
            codebook_id: "cb".into(),
            speaker_id: None,
        };
        let pred = [s(vec![1, 1, 1, 1]), s(vec![2, 2, 0, 0])];
        let truth = [s(vec![2, 2, 2, 2]), s(vec![1, 1, 1, 0])];
        assert!((unit_accuracy(&pred, &truth).unwrap() - 5.0 / 8.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn speaker_head_ignores_frame_order(
            v in proptest::collection::vec(-2.0f64..2.0, 12),
            rot in 0usize..4,
        ) {
            let latent = Array3::from_shape_vec((1, 4, 3), v.clone()).unwrap();
            let mut rows: Vec<Vec<f64>> = v.chunks(3).map(<[f64]>::to_vec).collect();
            rows.rotate_left(rot);
            rows.swap(0, 3);
            let shuffled = Array3::from_shape_vec((1, 4, 3), rows.concat()).unwrap();
            let w = Array2::from_shape_fn((3, 2), |(i, j)| (i + 2 * j) as f64 * 0.3 - 0.5);
            let b = Array2::zeros((1, 2));
            let a = speaker_head(&latent, w.view(), b.view()).unwrap();
            let c = speaker_head(&shuffled, w.view(), b.view()).unwrap();
            prop_assert!((a - c).iter().all(|d| d.abs() < 1e-12));
        }

        #[test]
        fn argmax_is_shift_invariant(
            v in proptest::collection::vec(-5.0f64..5.0, 15),
            shifts in proptest::collection::vec(-100.0f64..100.0, 3),
        ) {
            let logits = Array3::from_shape_vec((1, 3, 5), v).unwrap();
            let mut shifted = logits.clone();
            for (t, c) in shifts.iter().enumerate() {
                shifted.slice_mut(s![0, t, ..]).mapv_inplace(|x| x + c);
            }
            let mk = |l: Array3<f64>| SeparationOutput {
                unit_logits: l,
                speaker_logits: Array2::zeros((1, 0)),
                latent: Array3::zeros((1, 3, 1)),
            };
            let (a, _) = decode_units(&mk(logits.clone()), 160, "cb");
            let (b, _) = decode_units(&mk(shifted), 160, "cb");
            prop_assert_eq!(&a[0].ids, &b[0].ids);
            // exhaustive scan with lowest-index tie-break
            for t in 0..3 {
                let row: Vec<f64> = (0..5).map(|j| logits[[0, t, j]]).collect();
                let mut best = 0;
                for j in 1..5 {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                prop_assert_eq!(a[0].ids[t], best);
            }
        }
    }
}
