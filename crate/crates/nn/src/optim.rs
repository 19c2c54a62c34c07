use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::graph::Gradients;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// Adaptive-moment optimizer with bias correction and global-norm clipping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = store.iter().map(|(_, _, v)| Array2::zeros(v.dim())).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update and returns the pre-clip gradient norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) -> f64 {
        let norm = grads.global_norm();
        let clip = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * clip;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= learning_rate * mhat / (vhat.sqrt() + eps);
                });
        }
        norm
    }

    /// Moment arrays, named after the parameters they track.
    pub fn state_arrays(&self, store: &ParamStore) -> Vec<(String, Array2<f64>)> {
        let mut out = Vec::with_capacity(2 * self.first.len());
        for ((_, name, _), (m, v)) in store.iter().zip(self.first.iter().zip(&self.second)) {
            out.push((format!("adam.m.{name}"), m.clone()));
            out.push((format!("adam.v.{name}"), v.clone()));
        }
        out
    }

    pub fn restore(
        config: AdamConfig,
        step: u64,
        store: &ParamStore,
        arrays: Vec<(String, Array2<f64>)>,
    ) -> Result<Self, crate::NnError> {
        if arrays.len() != 2 * store.len() {
            return Err(crate::NnError::Layout(format!(
                "optimizer state has {} arrays, expected {}",
                arrays.len(),
                2 * store.len()
            )));
        }
        let mut first = Vec::with_capacity(store.len());
        let mut second = Vec::with_capacity(store.len());
        let mut it = arrays.into_iter();
        for (_, name, value) in store.iter() {
            let (mn, m) = it.next().expect("length checked");
            let (vn, v) = it.next().expect("length checked");
            if mn != format!("adam.m.{name}") || vn != format!("adam.v.{name}") {
                return Err(crate::NnError::Layout(format!(
                    "optimizer state out of order at `{name}`"
                )));
            }
            if m.dim() != value.dim() || v.dim() != value.dim() {
                return Err(crate::NnError::Layout(format!(
                    "optimizer state shape mismatch at `{name}`"
                )));
            }
            first.push(m);
            second.push(v);
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }
}
