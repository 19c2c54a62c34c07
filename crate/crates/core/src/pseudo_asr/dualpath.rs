//! Dual-path recurrent separator blocks.
//!
//! The frame sequence is cut into non-overlapping chunks of `segment`
//! frames. Each block runs a bidirectional LSTM inside every chunk, then one
//! across chunks at each in-chunk position, each followed by a projection,
//! layer normalization and a residual connection.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use unitsep_nn::{BiLstm, Graph, LayerNorm, Linear, ParamStore, Var, PAD_ROW};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualPathConfig {
    /// Encoder output channels.
    pub channels: usize,
    /// Encoder window in samples; the stride is the unit frame hop.
    pub kernel: usize,
    pub blocks: usize,
    /// LSTM hidden units per direction.
    pub hidden: usize,
    /// Frames per chunk.
    pub segment: usize,
}

impl Default for DualPathConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DualPathConfig {
    /// Full-size hyperparameters.
    pub fn paper() -> Self {
        Self {
            channels: 1024,
            kernel: 320,
            blocks: 6,
            hidden: 256,
            segment: 4,
        }
    }

    /// Reduced preset for CPU runs.
    pub fn desk() -> Self {
        Self {
            channels: 128,
            kernel: 320,
            blocks: 2,
            hidden: 64,
            segment: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden == 0 || self.segment == 0 || self.kernel < 2 {
            return Err(Error::InvalidConfig(
                "dual-path sizes must be positive and the kernel at least 2".into(),
            ));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.kernel / 2 + 1
    }
}

/// Hann-windowed log-magnitude analysis with a fixed Fourier basis: frame `n`
/// covers samples `n·hop + offset .. n·hop + offset + kernel`, zeros outside.
#[derive(Clone)]
pub struct LogMagnitudeFrontEnd {
    kernel: usize,
    hop: usize,
    offset: isize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for LogMagnitudeFrontEnd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMagnitudeFrontEnd")
            .field("kernel", &self.kernel)
            .field("hop", &self.hop)
            .field("offset", &self.offset)
            .finish()
    }
}

/// Magnitude floor inside the logarithm.
const MAG_FLOOR: f64 = 1e-3;

impl LogMagnitudeFrontEnd {
    /// Frames centred on the unit frames of a pooled-by-two analysis with
    /// hop `hop / 2` (centre at `n·hop + hop/4`).
    pub fn centred(kernel: usize, hop: usize) -> Self {
        let offset = (hop / 4) as isize - (kernel / 2) as isize;
        let window = (0..kernel)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / kernel as f64).cos())
            .collect();
        Self {
            kernel,
            hop,
            offset,
            window,
            fft: FftPlanner::new().plan_fft_forward(kernel),
        }
    }

    pub fn bins(&self) -> usize {
        self.kernel / 2 + 1
    }

    /// `frames × bins` log magnitudes.
    pub fn frames(&self, x: &[f64], frames: usize) -> Array2<f64> {
        let bins = self.bins();
        let mut out = Array2::zeros((frames, bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); self.kernel];
        for n in 0..frames {
            let start = (n * self.hop) as isize + self.offset;
            for (k, c) in buf.iter_mut().enumerate() {
                let t = start + k as isize;
                let v = if t >= 0 && (t as usize) < x.len() { x[t as usize] } else { 0.0 };
                *c = Complex64::new(v * self.window[k], 0.0);
            }
            self.fft.process(&mut buf);
            for (b, c) in buf[..bins].iter().enumerate() {
                out[[n, b]] = (c.norm() + MAG_FLOOR).ln();
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
struct Path {
    rnn: BiLstm,
    proj: Linear,
    norm: LayerNorm,
}

impl Path {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, hidden: usize, rng: &mut R) -> Self {
        let rnn = BiLstm::new(store, &format!("{name}.rnn"), channels, hidden, rng);
        let proj = Linear::new(store, &format!("{name}.proj"), rnn.out_dim(), channels, rng);
        let norm = LayerNorm::new(store, &format!("{name}.norm"), channels);
        Self { rnn, proj, norm }
    }

    fn forward(&self, g: &mut Graph, x: Var, batch: usize) -> Var {
        let h = self.rnn.forward(g, x, batch);
        let h = self.proj.forward(g, h);
        let h = self.norm.forward(g, h);
        g.add(x, h)
    }
}

/// Stack of dual-path blocks operating on `N × channels` rows.
#[derive(Clone, Debug)]
pub struct DualPathStack {
    blocks: Vec<(Path, Path)>,
    segment: usize,
}

impl DualPathStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        blocks: usize,
        segment: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..blocks)
            .map(|b| {
                (
                    Path::new(store, &format!("{name}.{b}.intra"), channels, hidden, rng),
                    Path::new(store, &format!("{name}.{b}.inter"), channels, hidden, rng),
                )
            })
            .collect();
        Self { blocks, segment }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.shape(x).0;
        let seg = self.segment;
        let chunks = n.div_ceil(seg);
        let padded = chunks * seg;
        // frame order (chunk-major) is already time-major for the inter-chunk pass
        let pad: Vec<usize> = (0..padded).map(|r| if r < n { r } else { PAD_ROW }).collect();
        // intra-chunk pass wants position-major rows: row p·chunks + s ← frame s·seg + p
        let to_intra: Vec<usize> = (0..padded).map(|r| (r % chunks) * seg + r / chunks).collect();
        let from_intra: Vec<usize> = (0..padded).map(|f| (f % seg) * chunks + f / seg).collect();
        let mut h = g.gather_rows(x, pad);
        for (intra, inter) in &self.blocks {
            let t = g.gather_rows(h, to_intra.clone());
            let t = intra.forward(g, t, chunks);
            h = g.gather_rows(t, from_intra.clone());
            h = inter.forward(g, h, seg);
        }
        g.slice_rows(h, 0, n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn chunk_reordering_round_trips() {
        let chunks = 3;
        let seg = 4;
        let padded = chunks * seg;
        let to: Vec<usize> = (0..padded).map(|r| (r % chunks) * seg + r / chunks).collect();
        let from: Vec<usize> = (0..padded).map(|f| (f % seg) * chunks + f / seg).collect();
        for f in 0..padded {
            assert_eq!(to[from[f]], f);
        }
        // position 1 of chunk 2 lands at row 1·3 + 2
        assert_eq!(to[5], 2 * seg + 1);
    }

    #[test]
    fn stack_preserves_shape_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let stack = DualPathStack::new(&mut store, "dp", 6, 3, 2, 4, &mut rng);
        let x = Array2::from_shape_fn((10, 6), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let run = || {
            let mut g = Graph::new(&store);
            let v = g.input(x.clone());
            let y = stack.forward(&mut g, v);
            g.value(y).clone()
        };
        let a = run();
        assert_eq!(a.dim(), (10, 6));
        assert_eq!(a, run());
    }

    #[test]
    fn front_end_centres_frames() {
        let fe = LogMagnitudeFrontEnd::centred(320, 160);
        // an impulse at the centre of frame 3 (sample 3·160 + 40)
        let mut x = vec![0.0; 1600];
        x[520] = 1.0;
        let f = fe.frames(&x, 10);
        assert_eq!(f.dim(), (10, 161));
        let energy = |n: usize| f.row(n).iter().map(|v| v.exp()).sum::<f64>();
        assert!(energy(3) > energy(2) && energy(3) > energy(4));
        assert!((f[[3, 0]] - (1.0 + MAG_FLOOR).ln()).abs() < 1e-12);
    }
}
