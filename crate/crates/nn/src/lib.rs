//! Small dense autodiff engine used by the separator, vocoder decoder and
//! refiner models.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub use checkpoint::Checkpoint;
pub use graph::{Gradients, Graph, Var, PAD_ROW};
pub use layers::{BiLstm, LayerNorm, Linear, Lstm};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("parameter layout: {0}")]
    Layout(String),
}
