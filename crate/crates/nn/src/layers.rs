//! Parameter bundles for the standard layers, built on [`Graph`] ops.

use ndarray::Array2;
use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Affine map `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), in_dim, out_dim, bound, rng);
        let bias = store.add_uniform(format!("{name}.bias"), 1, out_dim, bound, rng);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array2::ones((1, dim)));
        let beta = store.add(format!("{name}.beta"), Array2::zeros((1, dim)));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// One direction of an LSTM layer.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add_uniform(format!("{name}.w_ih"), in_dim, 4 * hidden, bound, rng);
        let w_hh = store.add_uniform(format!("{name}.w_hh"), hidden, 4 * hidden, bound, rng);
        let bias = store.add_uniform(format!("{name}.bias"), 1, 4 * hidden, bound, rng);
        // forget gate starts open
        for j in hidden..2 * hidden {
            store.get_mut(bias)[[0, j]] += 1.0;
        }
        Self {
            w_ih,
            w_hh,
            bias,
            hidden,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, batch: usize, reverse: bool) -> Var {
        let w_ih = g.param(self.w_ih);
        let w_hh = g.param(self.w_hh);
        let bias = g.param(self.bias);
        g.lstm(x, w_ih, w_hh, bias, batch, reverse)
    }
}

/// Forward and backward LSTMs with concatenated outputs (`2 · hidden` wide).
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fwd: Lstm::new(store, &format!("{name}.fwd"), in_dim, hidden, rng),
            bwd: Lstm::new(store, &format!("{name}.bwd"), in_dim, hidden, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.fwd.hidden
    }

    pub fn forward(&self, g: &mut Graph, x: Var, batch: usize) -> Var {
        let f = self.fwd.forward(g, x, batch, false);
        let b = self.bwd.forward(g, x, batch, true);
        g.concat_cols(&[f, b])
    }
}
