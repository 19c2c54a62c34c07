use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

/// Handle to a parameter matrix inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    value: Array2<f64>,
}

/// Ordered collection of named trainable matrices.
///
/// Registration order is part of the model definition: two stores built by
/// the same constructor line up index for index, which is what checkpoint
/// restore relies on.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Registers a `rows × cols` matrix drawn from U(-bound, bound).
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> ParamId {
        let value = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound);
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
        } else {
            Array2::zeros((rows, cols))
        };
        self.add(name, value)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn load_values(&mut self, values: Vec<(String, Array2<f64>)>) -> Result<(), crate::NnError> {
        if values.len() != self.entries.len() {
            return Err(crate::NnError::Layout(format!(
                "expected {} parameter arrays, found {}",
                self.entries.len(),
                values.len()
            )));
        }
        for (entry, (name, value)) in self.entries.iter_mut().zip(values) {
            if entry.name != name || entry.value.dim() != value.dim() {
                return Err(crate::NnError::Layout(format!(
                    "parameter `{}` {:?} does not match stored `{}` {:?}",
                    entry.name,
                    entry.value.dim(),
                    name,
                    value.dim()
                )));
            }
            entry.value = value;
        }
        Ok(())
    }

    pub fn to_named_arrays(&self) -> Vec<(String, Array2<f64>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }
}
