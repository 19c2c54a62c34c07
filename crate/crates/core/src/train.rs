//! Shared training plumbing: configuration, deterministic batch order,
//! checkpoint container round trips, and the newline-delimited progress log.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use unitsep_nn::{Adam, AdamConfig, Checkpoint, ParamStore};

use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::parallel::Execution;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Emit a progress record every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            seed: 0,
            checkpoint_every: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Indices of the batch used at `step`: epochs are seeded shuffles of
/// `0..n`, so the schedule is a pure function of `(seed, step)` and a resumed
/// run sees the same batches.
pub fn batch_at(seed: u64, step: usize, n: usize, batch_size: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size).max(1);
    let epoch = step / per_epoch;
    let slot = step % per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch{epoch}"))));
    order
        .into_iter()
        .skip(slot * batch_size)
        .take(batch_size)
        .collect()
}

/// Groups of indices sharing a key, in first-seen order.
pub fn group_by_key<K: PartialEq + Copy>(indices: &[usize], key: impl Fn(usize) -> K) -> Vec<Vec<usize>> {
    let mut groups: Vec<(K, Vec<usize>)> = Vec::new();
    for &i in indices {
        let k = key(i);
        match groups.iter_mut().find(|(g, _)| *g == k) {
            Some((_, v)) => v.push(i),
            None => groups.push((k, vec![i])),
        }
    }
    groups.into_iter().map(|(_, v)| v).collect()
}

/// One line of the progress log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressRecord {
    pub step: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swap_rate: Option<f64>,
    pub grad_norm: f64,
}

/// Appends progress records to a newline-delimited JSON file.
pub struct ProgressLog {
    out: Option<BufWriter<File>>,
}

impl ProgressLog {
    pub fn disabled() -> Self {
        Self { out: None }
    }

    pub fn open(path: impl AsRef<Path>, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)?;
        Ok(Self {
            out: Some(BufWriter::new(file)),
        })
    }

    pub fn record(&mut self, r: &ProgressRecord) -> Result<()> {
        if let Some(out) = &mut self.out {
            serde_json::to_writer(&mut *out, r)?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
        Ok(())
    }
}

/// Side channels of a training run: progress records, the checkpoint path
/// (written every `checkpoint_every` steps and at the end) and how
/// per-example gradients within a batch are scheduled.
pub struct TrainSession {
    pub log: ProgressLog,
    pub checkpoint: Option<PathBuf>,
    pub exec: Execution,
}

impl TrainSession {
    /// No log, no checkpoints, default execution.
    pub fn quiet() -> Self {
        Self {
            log: ProgressLog::disabled(),
            checkpoint: None,
            exec: Execution::default(),
        }
    }

    /// Whether a checkpoint is due after `step` steps have completed.
    pub fn checkpoint_due(&self, train: &TrainConfig, step: usize) -> bool {
        self.checkpoint.is_some()
            && (step == train.steps || (train.checkpoint_every > 0 && step.is_multiple_of(train.checkpoint_every)))
    }
}

/// Parameters plus optimizer state as stored in a checkpoint.
pub struct ModelState {
    pub meta: Value,
    pub params: Vec<(String, ndarray::Array2<f64>)>,
    pub optimizer: Option<(u64, Vec<(String, ndarray::Array2<f64>)>)>,
}

/// Writes `kind`, `config`, `codebook` and the step counter into the header.
pub fn save_model(
    path: impl AsRef<Path>,
    kind: &str,
    config: &impl Serialize,
    codebook_id: Option<&str>,
    store: &ParamStore,
    adam: Option<&Adam>,
) -> Result<()> {
    let meta = json!({
        "kind": kind,
        "config": serde_json::to_value(config)?,
        "codebook": codebook_id,
        "step": adam.map(|a| a.step),
    });
    let mut ck = Checkpoint::new(meta);
    ck.push_arrays(
        store
            .to_named_arrays()
            .into_iter()
            .map(|(n, a)| (format!("param.{n}"), a)),
    );
    if let Some(a) = adam {
        ck.push_arrays(a.state_arrays(store));
    }
    // write then rename so a crash never leaves a torn checkpoint
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    ck.save(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>, kind: &str) -> Result<ModelState> {
    let mut ck = Checkpoint::load(path)?;
    let found = ck.meta.get("kind").and_then(Value::as_str).unwrap_or("");
    if found != kind {
        return Err(Error::InvalidConfig(format!(
            "checkpoint holds a `{found}` model, expected `{kind}`"
        )));
    }
    let params = ck.take_prefixed("param.");
    let adam = ck.take_prefixed("adam.");
    let optimizer = match ck.meta.get("step").and_then(Value::as_u64) {
        Some(step) if !adam.is_empty() => Some((
            step,
            adam.into_iter().map(|(n, a)| (format!("adam.{n}"), a)).collect(),
        )),
        _ => None,
    };
    Ok(ModelState {
        meta: ck.meta,
        params,
        optimizer,
    })
}

impl ModelState {
    pub fn config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta["config"].clone())?)
    }

    pub fn codebook_id(&self) -> Option<&str> {
        self.meta.get("codebook").and_then(Value::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<usize> = (0..4).flat_map(|s| batch_at(3, s, 10, 3)).collect();
        assert_eq!(seen.len(), 10);
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_at(3, 7, 10, 3), batch_at(3, 7, 10, 3));
        assert_ne!(batch_at(3, 0, 10, 3), batch_at(3, 4, 10, 3));
    }

    #[test]
    fn grouping_keeps_first_seen_order() {
        let g = group_by_key(&[4, 1, 7, 2], |i| i % 2);
        assert_eq!(g, vec![vec![4, 2], vec![1, 7]]);
    }

    #[test]
    fn model_round_trip_with_optimizer() {
        let tmp = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.add("w", Array2::from_elem((2, 3), 0.5));
        let adam = Adam::new(AdamConfig::default(), &store);
        let path = tmp.path().join("m.ckpt");
        save_model(&path, "demo", &json!({"h": 4}), Some("abc"), &store, Some(&adam)).unwrap();
        let state = load_model(&path, "demo").unwrap();
        assert_eq!(state.params, store.to_named_arrays());
        assert_eq!(state.codebook_id(), Some("abc"));
        let (step, arrays) = state.optimizer.unwrap();
        assert_eq!(step, 0);
        Adam::restore(AdamConfig::default(), step, &store, arrays).unwrap();
        assert!(load_model(&path, "other").is_err());
    }
}
