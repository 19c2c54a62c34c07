//! Self-attention encoder over filterbank frames.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use unitsep_nn::{Graph, LayerNorm, Linear, ParamStore, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub blocks: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ff_dim: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TransformerConfig {
    pub fn paper() -> Self {
        Self {
            blocks: 12,
            heads: 4,
            head_dim: 64,
            ff_dim: 2048,
        }
    }

    pub fn desk() -> Self {
        Self {
            blocks: 4,
            heads: 4,
            head_dim: 64,
            ff_dim: 512,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 || self.ff_dim == 0 {
            return Err(Error::InvalidConfig("transformer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Sinusoidal position table, `rows × dim`.
pub fn positions(rows: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, dim), |(t, i)| {
        let rate = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
        let a = t as f64 * rate;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Two-layer convolutional subsampler (rate 2) followed by pre-norm
/// attention blocks.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    config: TransformerConfig,
    sub1: Linear,
    sub2: Linear,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
}

impl TransformerEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: &TransformerConfig,
        input_dim: usize,
        rng: &mut R,
    ) -> Self {
        let d = config.model_dim();
        let sub1 = Linear::new(store, &format!("{name}.sub1"), 3 * input_dim, d, rng);
        let sub2 = Linear::new(store, &format!("{name}.sub2"), 4 * d, d, rng);
        let blocks = (0..config.blocks)
            .map(|b| {
                let p = format!("{name}.{b}");
                Block {
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d),
                    query: Linear::new(store, &format!("{p}.query"), d, d, rng),
                    key: Linear::new(store, &format!("{p}.key"), d, d, rng),
                    value: Linear::new(store, &format!("{p}.value"), d, d, rng),
                    out: Linear::new(store, &format!("{p}.out"), d, d, rng),
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d),
                    ff1: Linear::new(store, &format!("{p}.ff1"), d, config.ff_dim, rng),
                    ff2: Linear::new(store, &format!("{p}.ff2"), config.ff_dim, d, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(store, &format!("{name}.norm"), d);
        Self {
            config: config.clone(),
            sub1,
            sub2,
            blocks,
            final_norm,
        }
    }

    fn attention(&self, g: &mut Graph, b: &Block, x: Var) -> Var {
        let q = b.query.forward(g, x);
        let k = b.key.forward(g, x);
        let v = b.value.forward(g, x);
        let hd = self.config.head_dim;
        let scale = 1.0 / (hd as f64).sqrt();
        let heads: Vec<Var> = (0..self.config.heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * hd, (h + 1) * hd);
                let kh = g.slice_cols(k, h * hd, (h + 1) * hd);
                let vh = g.slice_cols(v, h * hd, (h + 1) * hd);
                let kt = g.transpose(kh);
                let scores = g.matmul(qh, kt);
                let scores = g.scale(scores, scale);
                let attn = g.softmax_rows(scores);
                g.matmul(attn, vh)
            })
            .collect();
        let cat = g.concat_cols(&heads);
        b.out.forward(g, cat)
    }

    /// Analysis-rate frames (`≈ 2N × input_dim`) to `N × model_dim`.
    pub fn forward(&self, g: &mut Graph, frames: Var, out_rows: usize) -> Var {
        let rows = g.shape(frames).0;
        let c = g.unfold_rows(frames, 3, 1, -1, rows);
        let c = self.sub1.forward(g, c);
        let c = g.relu(c);
        // output row n spans analysis frames 2n − 1 … 2n + 2
        let c = g.unfold_rows(c, 4, 2, -1, out_rows);
        let c = self.sub2.forward(g, c);
        let c = g.relu(c);
        let pos = g.input(positions(out_rows, self.config.model_dim()));
        let mut x = g.add(c, pos);
        for b in &self.blocks {
            let h = b.norm1.forward(g, x);
            let h = self.attention(g, b, h);
            x = g.add(x, h);
            let h = b.norm2.forward(g, x);
            let h = b.ff1.forward(g, h);
            let h = g.relu(h);
            let h = b.ff2.forward(g, h);
            x = g.add(x, h);
        }
        self.final_norm.forward(g, x)
    }
}
