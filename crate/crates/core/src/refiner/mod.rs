//! Second-stage refinement: a masking network that reads the mixture and the
//! aligned stage-1 estimate and regresses the clean waveform under negative
//! SI-SNR.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unitsep_nn::{Adam, AdamConfig, Gradients, Graph, LayerNorm, Linear, ParamStore, Var, PAD_ROW};

pub use crate::metrics::si_snr;

use crate::error::{Error, Result};
use crate::pseudo_asr::DualPathStack;
use crate::signal::Waveform;
use crate::train::{batch_at, load_model, save_model, ProgressRecord, TrainConfig, TrainSession};

/// Input channels: mixture and stage-1 estimate.
pub const INPUT_CHANNELS: usize = 2;

/// Keeps the residual energy away from zero in the training loss.
const SI_SNR_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Stacked dilated 1-D convolutions.
    ConvTasnetLike,
    /// The pseudo-ASR dual-path blocks.
    #[default]
    DualpathLike,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    pub backbone: Backbone,
    pub channels: usize,
    pub sample_rate: u32,
    /// Encoder basis length in samples; the stride is half of it.
    pub kernel: usize,
    /// Encoder basis functions.
    pub filters: usize,
    /// Width inside the backbone.
    pub bottleneck: usize,
    pub blocks: usize,
    /// Dual-path: LSTM units per direction.
    pub hidden: usize,
    /// Dual-path: frames per chunk.
    pub segment: usize,
    /// Conv backbone: kernel of each dilated convolution.
    pub conv_kernel: usize,
    /// Alignment search window in samples (one vocoder frame hop).
    pub max_shift: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::DualpathLike,
            channels: INPUT_CHANNELS,
            sample_rate: 8000,
            kernel: 16,
            filters: 64,
            bottleneck: 32,
            blocks: 2,
            hidden: 32,
            segment: 50,
            conv_kernel: 3,
            max_shift: 160,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels != INPUT_CHANNELS {
            return Err(Error::InvalidConfig(format!(
                "the refiner reads exactly {INPUT_CHANNELS} channels, got {}",
                self.channels
            )));
        }
        if self.kernel < 2 || !self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig("encoder kernel must be even and >= 2".into()));
        }
        if self.filters == 0 || self.bottleneck == 0 || self.hidden == 0 || self.segment == 0 {
            return Err(Error::InvalidConfig("refiner sizes must be positive".into()));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig("conv_kernel must be odd".into()));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.kernel / 2
    }
}

/// Shifts `estimate` by the lag in `[−max_shift, max_shift]` that maximizes
/// its cross-correlation with `mixture` and fits it to the mixture length.
///
/// A lag `l` means `estimate[t + l]` lines up with `mixture[t]`; ties go to
/// the smallest `|l|`, then to the negative lag.
pub fn align(estimate: &Waveform, mixture: &Waveform, max_shift: usize) -> Result<(Waveform, isize)> {
    if estimate.sample_rate() != mixture.sample_rate() {
        return Err(Error::InvalidWaveform(format!(
            "cannot align {} Hz against {} Hz",
            estimate.sample_rate(),
            mixture.sample_rate()
        )));
    }
    let e = estimate.samples();
    let m = mixture.samples();
    let corr = |lag: isize| -> f64 {
        let mut acc = 0.0;
        for (t, &mv) in m.iter().enumerate() {
            let i = t as isize + lag;
            if i >= 0 && (i as usize) < e.len() {
                acc += mv * e[i as usize];
            }
        }
        acc
    };
    let max = max_shift as isize;
    let mut best = (corr(0), 0isize);
    for d in 1..=max {
        for lag in [-d, d] {
            let c = corr(lag);
            if c > best.0 {
                best = (c, lag);
            }
        }
    }
    let lag = best.1;
    let shifted = (0..m.len())
        .map(|t| {
            let i = t as isize + lag;
            if i >= 0 && (i as usize) < e.len() {
                e[i as usize]
            } else {
                0.0
            }
        })
        .collect();
    Ok((Waveform::new(shifted, mixture.sample_rate())?, lag))
}

/// Uncapped SI-SNR (dB) and its gradient with respect to `estimate`.
pub fn si_snr_with_grad(estimate: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
    if estimate.len() != reference.len() {
        return Err(Error::LengthMismatch {
            left: estimate.len(),
            right: reference.len(),
            tolerance: 0,
        });
    }
    let len = estimate.len() as f64;
    let em = estimate.iter().sum::<f64>() / len;
    let rm = reference.iter().sum::<f64>() / len;
    let e: Vec<f64> = estimate.iter().map(|v| v - em).collect();
    let r: Vec<f64> = reference.iter().map(|v| v - rm).collect();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(Error::Degenerate("SI-SNR reference is all zero".into()));
    }
    let er: f64 = e.iter().zip(&r).map(|(a, b)| a * b).sum();
    let ee: f64 = e.iter().map(|v| v * v).sum();
    let alpha = er / rr;
    let p = er * alpha + SI_SNR_EPS;
    let q = (ee - er * alpha).max(0.0) + SI_SNR_EPS;
    let db = 10.0 / std::f64::consts::LN_10;
    let value = db * (p.ln() - q.ln());
    let mut grad: Vec<f64> = e
        .iter()
        .zip(&r)
        .map(|(&ei, &ri)| db * (2.0 * alpha * ri / p - (2.0 * ei - 2.0 * alpha * ri) / q))
        .collect();
    // centering is linear: project the gradient onto zero-mean signals
    let gm = grad.iter().sum::<f64>() / len;
    grad.iter_mut().for_each(|g| *g -= gm);
    Ok((value, grad))
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Linear,
    norm: LayerNorm,
    dilation: usize,
}

#[derive(Clone, Debug)]
enum BackboneNet {
    Dualpath(DualPathStack),
    Conv { blocks: Vec<ConvBlock>, kernel: usize },
}

/// One training item.
#[derive(Clone, Copy, Debug)]
pub struct RefinerExample<'a> {
    pub mixture: &'a Waveform,
    /// Stage-1 estimate, already aligned to the mixture.
    pub estimate: &'a Waveform,
    pub target: &'a Waveform,
}

/// Learned-basis masking network over `(mixture, estimate)` frames.
#[derive(Clone, Debug)]
pub struct Refiner {
    config: RefinerConfig,
    pub store: ParamStore,
    mix_encoder: Linear,
    joint_encoder: Linear,
    norm: LayerNorm,
    bottleneck: Linear,
    backbone: BackboneNet,
    mask: Linear,
    decoder: Linear,
}

impl Refiner {
    pub fn new(config: RefinerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (l, f, b) = (config.kernel, config.filters, config.bottleneck);
        let mix_encoder = Linear::new(&mut store, "encoder.mix", l, f, &mut rng);
        let joint_encoder = Linear::new(&mut store, "encoder.joint", INPUT_CHANNELS * l, f, &mut rng);
        let norm = LayerNorm::new(&mut store, "encoder.norm", f);
        let bottleneck = Linear::new(&mut store, "bottleneck", f, b, &mut rng);
        let backbone = match config.backbone {
            Backbone::DualpathLike => BackboneNet::Dualpath(DualPathStack::new(
                &mut store,
                "dualpath",
                b,
                config.hidden,
                config.blocks,
                config.segment,
                &mut rng,
            )),
            Backbone::ConvTasnetLike => BackboneNet::Conv {
                blocks: (0..config.blocks)
                    .map(|i| ConvBlock {
                        conv: Linear::new(&mut store, &format!("tcn.{i}.conv"), config.conv_kernel * b, b, &mut rng),
                        norm: LayerNorm::new(&mut store, &format!("tcn.{i}.norm"), b),
                        dilation: 1 << i,
                    })
                    .collect(),
                kernel: config.conv_kernel,
            },
        };
        let mask = Linear::new(&mut store, "mask", b, f, &mut rng);
        let decoder = Linear::new(&mut store, "decoder", f, l, &mut rng);
        Ok(Self {
            config,
            store,
            mix_encoder,
            joint_encoder,
            norm,
            bottleneck,
            backbone,
            mask,
            decoder,
        })
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.config
    }

    /// Frames covering `len` samples with stride `kernel / 2`, starting half
    /// a kernel early so every sample is covered twice.
    fn frames_for(&self, len: usize) -> usize {
        len.div_ceil(self.config.stride()) + 1
    }

    fn offset(&self) -> isize {
        -(self.config.stride() as isize)
    }

    fn backbone_forward(&self, g: &mut Graph, x: Var) -> Var {
        match &self.backbone {
            BackboneNet::Dualpath(stack) => stack.forward(g, x),
            BackboneNet::Conv { blocks, kernel } => {
                let rows = g.shape(x).0;
                let half = (*kernel / 2) as isize;
                let mut h = x;
                for blk in blocks {
                    let taps: Vec<Var> = (0..*kernel as isize)
                        .map(|k| {
                            let shift = (k - half) * blk.dilation as isize;
                            let idx = (0..rows as isize)
                                .map(|r| {
                                    let s = r + shift;
                                    if s >= 0 && s < rows as isize {
                                        s as usize
                                    } else {
                                        PAD_ROW
                                    }
                                })
                                .collect();
                            g.gather_rows(h, idx)
                        })
                        .collect();
                    let c = g.concat_cols(&taps);
                    let c = blk.conv.forward(g, c);
                    let c = g.relu(c);
                    let c = blk.norm.forward(g, c);
                    h = g.add(h, c);
                }
                h
            }
        }
    }

    /// Builds the network on a `len × 1` mixture and estimate; returns the
    /// `len × 1` output.
    pub fn graph_forward(&self, g: &mut Graph, mixture: &[f64], estimate: &[f64]) -> Var {
        let len = mixture.len();
        let n = self.frames_for(len);
        let (l, stride, off) = (self.config.kernel, self.config.stride(), self.offset());
        let mix = g.input(Array2::from_shape_vec((len, 1), mixture.to_vec()).expect("column"));
        let est = g.input(Array2::from_shape_vec((len, 1), estimate.to_vec()).expect("column"));
        let mix_frames = g.unfold_rows(mix, l, stride, off, n);
        let est_frames = g.unfold_rows(est, l, stride, off, n);
        let basis = self.mix_encoder.forward(g, mix_frames);
        let basis = g.relu(basis);
        let joint = g.concat_cols(&[mix_frames, est_frames]);
        let joint = self.joint_encoder.forward(g, joint);
        let joint = g.relu(joint);
        let h = self.norm.forward(g, joint);
        let h = self.bottleneck.forward(g, h);
        let h = self.backbone_forward(g, h);
        let h = g.relu(h);
        let m = self.mask.forward(g, h);
        let m = g.sigmoid(m);
        let masked = g.mul(basis, m);
        let frames = self.decoder.forward(g, masked);
        g.overlap_add(frames, stride, off, len)
    }

    fn check(&self, mixture: &Waveform, estimate: &Waveform) -> Result<()> {
        if mixture.len() != estimate.len() {
            return Err(Error::LengthMismatch {
                left: mixture.len(),
                right: estimate.len(),
                tolerance: 0,
            });
        }
        for w in [mixture, estimate] {
            if w.sample_rate() != self.config.sample_rate {
                return Err(Error::InvalidWaveform(format!(
                    "refiner expects {} Hz, got {} Hz",
                    self.config.sample_rate,
                    w.sample_rate()
                )));
            }
        }
        Ok(())
    }

    /// Refined waveform, same length as the mixture.
    pub fn refine(&self, mixture: &Waveform, estimate: &Waveform) -> Result<Waveform> {
        self.check(mixture, estimate)?;
        let mut g = Graph::new(&self.store);
        let out = self.graph_forward(&mut g, mixture.samples(), estimate.samples());
        Waveform::new(g.value(out).column(0).to_vec(), mixture.sample_rate())
    }

    /// Negative SI-SNR of one example and its parameter gradients.
    pub fn loss_and_gradients(&self, ex: &RefinerExample<'_>) -> Result<(f64, Gradients)> {
        self.check(ex.mixture, ex.estimate)?;
        let mut g = Graph::new(&self.store);
        let out = self.graph_forward(&mut g, ex.mixture.samples(), ex.estimate.samples());
        let y = g.value(out).column(0).to_vec();
        let (value, grad) = si_snr_with_grad(&y, ex.target.samples())?;
        let seed = Array2::from_shape_vec((grad.len(), 1), grad.iter().map(|v| -v).collect()).expect("column");
        Ok((-value, g.backward(&[(out, seed)])))
    }

    /// Runs optimizer steps `optimizer.step .. train.steps`; returns the mean
    /// batch loss (negative SI-SNR, dB) per step.
    pub fn fit(
        &mut self,
        data: &[RefinerExample<'_>],
        train: &TrainConfig,
        optimizer: &mut Adam,
        session: &mut TrainSession,
    ) -> Result<Vec<f64>> {
        train.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        optimizer.config = train.adam();
        let start = optimizer.step as usize;
        let mut curve = Vec::with_capacity(train.steps.saturating_sub(start));
        for step in start..train.steps {
            let batch = batch_at(train.seed, step, data.len(), train.batch_size);
            let results = session.exec.try_map(&batch, |&i| self.loss_and_gradients(&data[i]))?;
            let mut grads = Gradients::zeros_like(&self.store);
            let mut loss = 0.0;
            for (l, g) in &results {
                grads.accumulate(g);
                loss += l;
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
                    swap_rate: None,
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
        save_model(path, "refiner", &self.config, None, &self.store, optimizer)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Option<Adam>)> {
        let state = load_model(path, "refiner")?;
        let mut model = Self::new(state.config()?, 0)?;
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
    use proptest::prelude::{prop_assert, prop_assume, proptest};
    use rand::Rng;

    fn noise(len: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn w(x: Vec<f64>) -> Waveform {
        Waveform::new(x, 8000).unwrap()
    }

    fn delayed(x: &[f64], lag: isize) -> Vec<f64> {
        (0..x.len() as isize)
            .map(|t| {
                let s = t - lag;
                if s >= 0 && (s as usize) < x.len() {
                    x[s as usize]
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn align_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = noise(2000, &mut rng);
        let (shifted, lag) = align(&w(delayed(&m, 40)), &w(m.clone()), 160).unwrap();
        assert_eq!(lag, 40);
        assert_eq!(&shifted.samples()[..1900], &m[..1900]);
        let (_, zero) = align(&w(vec![0.0; 2000]), &w(m), 160).unwrap();
        assert_eq!(zero, 0);
    }

    #[test]
    fn align_recovers_random_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let m = noise(1200, &mut rng);
            let lag: isize = rng.gen_range(-160..=160);
            let (_, got) = align(&w(delayed(&m, lag)), &w(m), 160).unwrap();
            assert_eq!(got, lag);
        }
    }

    #[test]
    fn si_snr_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = noise(1000, &mut rng);
        assert_eq!(si_snr(&w(r.clone()), &w(r.clone())).unwrap(), 60.0);
        let twice: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_snr(&w(twice), &w(r.clone())).unwrap(), 60.0);
        assert!(si_snr(&w(r.clone()), &w(vec![0.0; 1000])).is_err());
    }

    #[test]
    fn si_snr_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = noise(64, &mut rng);
        let e: Vec<f64> = r.iter().zip(noise(64, &mut rng)).map(|(a, b)| a + 0.5 * b).collect();
        let (_, g) = si_snr_with_grad(&e, &r).unwrap();
        for i in [0, 17, 63] {
            let h = 1e-6;
            let mut p = e.clone();
            p[i] += h;
            let mut m = e.clone();
            m[i] -= h;
            let fd = (si_snr_with_grad(&p, &r).unwrap().0 - si_snr_with_grad(&m, &r).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * g[i].abs().max(1.0), "{fd} vs {}", g[i]);
        }
    }

    fn tiny(backbone: Backbone) -> Refiner {
        Refiner::new(
            RefinerConfig {
                backbone,
                filters: 8,
                bottleneck: 6,
                hidden: 4,
                segment: 8,
                blocks: 2,
                ..RefinerConfig::default()
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn refine_preserves_length_and_finiteness() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for backbone in [Backbone::DualpathLike, Backbone::ConvTasnetLike] {
            let r = tiny(backbone);
            for len in [1, 37, 400] {
                let m = w(noise(len, &mut rng));
                let out = r.refine(&m, &m).unwrap();
                assert_eq!(out.len(), len);
                assert!(out.samples().iter().all(|v| v.is_finite()));
            }
            assert!(r.refine(&w(vec![0.1; 10]), &w(vec![0.1; 11])).is_err());
        }
    }

    #[test]
    fn config_requires_two_channels() {
        let bad = RefinerConfig {
            channels: 1,
            ..RefinerConfig::default()
        };
        assert!(Refiner::new(bad, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let r = tiny(Backbone::ConvTasnetLike);
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("r.ckpt");
        r.save(&p, None).unwrap();
        let (back, opt) = Refiner::load(&p).unwrap();
        assert!(opt.is_none());
        let m = w((0..300).map(|i| (i as f64 * 0.1).sin()).collect());
        assert_eq!(back.refine(&m, &m).unwrap(), r.refine(&m, &m).unwrap());
    }

    proptest! {
        #[test]
        fn si_snr_is_scale_invariant(
            r in proptest::collection::vec(-1.0f64..1.0, 50..200),
            seed in 0u64..1000,
            alpha in 0.01f64..100.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e: Vec<f64> = r.iter().map(|v| v + 0.3 * rng.gen_range(-1.0..1.0)).collect();
            prop_assume!(r.iter().any(|v| v.abs() > 1e-3));
            let scaled: Vec<f64> = e.iter().map(|v| alpha * v).collect();
            let a = si_snr(&w(e), &w(r.clone())).unwrap();
            let b = si_snr(&w(scaled), &w(r)).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
