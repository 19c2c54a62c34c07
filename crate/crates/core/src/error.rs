use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read `{path}`: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("`{path}` has {channels} channels; only mono is supported")]
    MultiChannel { path: PathBuf, channels: u16 },
    #[error("`{path}` uses unsupported encoding: {detail}")]
    UnsupportedEncoding { path: PathBuf, detail: String },
    #[error("cannot write `{path}`: {reason}")]
    Unwritable { path: PathBuf, reason: String },

    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("invalid transform parameters: {0}")]
    InvalidTransform(String),
    #[error("inconsistent spectrogram metadata: {0}")]
    InconsistentSpectrogram(String),
    #[error("degenerate mel filterbank: {0}")]
    DegenerateFilterbank(String),

    #[error("empty corpus")]
    EmptyCorpus,
    #[error("corpus has {distinct} distinct frames but {requested} clusters were requested")]
    TooFewDistinctFrames { distinct: usize, requested: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("codebook fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),
    #[error("invalid unit sequence: {0}")]
    InvalidUnits(String),

    #[error("stream count mismatch: expected {expected}, found {found}")]
    StreamCountMismatch { expected: usize, found: usize },
    #[error("length mismatch: {left} vs {right} frames exceeds tolerance {tolerance}")]
    LengthMismatch {
        left: usize,
        right: usize,
        tolerance: usize,
    },
    #[error("input too short: {0}")]
    TooShort(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown speaker id {id} (model knows {count})")]
    UnknownSpeaker { id: usize, count: usize },
    #[error("{0}")]
    Degenerate(String),

    #[error("missing stem `{0}`")]
    MissingStem(PathBuf),
    #[error("sample rate mismatch in `{path}`: expected {expected}, found {found}")]
    SampleRateMismatch {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("stage `{stage}` failed: {cause}")]
    Stage { stage: String, cause: Box<Error> },
    #[error("experiment directory `{0}` is locked by another writer")]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Nn(#[from] unitsep_nn::NnError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
}
