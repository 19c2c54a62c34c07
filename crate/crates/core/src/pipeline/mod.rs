//! Experiment configuration, stage orchestration and reporting.
//!
//! An experiment is one TOML file (or a bundled preset) describing the
//! corpus, the discretizer, the pseudo-ASR model, the vocoder and the
//! optional refiner. [`run_experiment`] executes the stages in order and
//! records a manifest per stage so reruns skip finished work.

mod report;
mod run;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use report::{aggregate, render_table, report, write_plots, write_table3, write_table4, AggregateRow, Summary};
pub use run::{
    decode_mixture, evaluate_example, lock_dir, pair_by_units, quantize_targets, refiner_examples, run_experiment,
    train_separator, DirLock, EvaluatedExample, ExperimentOutcome, StageManifest, Stages, SYSTEMS,
};

use crate::data::{ingest_corpus, synth_corpus_with, Corpus, SynthSpec, Task};
use crate::error::{Error, Result};
use crate::parallel::Execution;
use crate::pseudo_asr::{Architecture, DualPathConfig, TransformerConfig, DEFAULT_SPEAKER_WEIGHT};
use crate::refiner::RefinerConfig;
use crate::signal::LogMelConfig;
use crate::train::TrainConfig;
use crate::vocoder::{DecoderConfig, VocoderMode};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "UNITSEP_OUTPUT_ROOT";

/// Output root used when neither the config nor the environment sets one.
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

/// Names accepted by [`ExperimentConfig::preset`].
pub const PRESETS: [&str; 3] = ["desk-sep-2spk", "desk-enh", "smoke"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    #[default]
    Synthetic,
    /// `root/{tr,cv,tt}/{mix,s1,…}/*.wav`.
    Directory,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub source: CorpusSource,
    pub root: Option<PathBuf>,
    pub synth: SynthSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscretizerStage {
    pub units: usize,
    pub max_iters: usize,
    pub features: LogMelConfig,
}

impl Default for DiscretizerStage {
    fn default() -> Self {
        Self {
            units: crate::discretizer::DEFAULT_UNITS,
            max_iters: 30,
            features: LogMelConfig::for_rate(8000),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsrStage {
    pub architecture: Architecture,
    pub dualpath: DualPathConfig,
    pub transformer: TransformerConfig,
    /// Train the speaker head when the corpus carries speaker ids.
    pub speaker_head: bool,
    pub speaker_weight: f64,
    pub train: TrainConfig,
}

impl Default for AsrStage {
    fn default() -> Self {
        Self {
            architecture: Architecture::Dualpath,
            dualpath: DualPathConfig::desk(),
            transformer: TransformerConfig::desk(),
            speaker_head: true,
            speaker_weight: DEFAULT_SPEAKER_WEIGHT,
            train: TrainConfig {
                steps: 3000,
                batch_size: 4,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocoderStage {
    /// `lookup_gl` or `trained_decoder`.
    pub mode: VocoderMode,
    pub gl_iterations: usize,
    /// Condition the decoder on speaker ids (trained decoder only).
    pub speaker_conditioned: bool,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
}

impl Default for VocoderStage {
    fn default() -> Self {
        Self {
            mode: VocoderMode::LookupGl,
            gl_iterations: crate::signal::griffin_lim::DEFAULT_ITERATIONS,
            speaker_conditioned: true,
            decoder: DecoderConfig::default(),
            train: TrainConfig {
                steps: 500,
                batch_size: 4,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerStage {
    pub enabled: bool,
    pub model: RefinerConfig,
    /// Training crops in seconds; 0 trains on whole utterances.
    pub crop_secs: f64,
    pub train: TrainConfig,
}

impl Default for RefinerStage {
    fn default() -> Self {
        Self {
            enabled: true,
            model: RefinerConfig::default(),
            crop_secs: 0.5,
            train: TrainConfig {
                steps: 300,
                batch_size: 4,
                learning_rate: 2e-3,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub task: Task,
    /// Root seed; every stage derives its own.
    pub seed: u64,
    /// Defaults to `$UNITSEP_OUTPUT_ROOT/<name>`.
    pub output_dir: Option<PathBuf>,
    /// Decode ground-truth units only, skipping the pseudo-ASR and refiner.
    pub oracle_only: bool,
    /// Write SVG plots next to the tables.
    pub plots: bool,
    /// Write per-utterance audio for each system.
    pub write_audio: bool,
    pub corpus: CorpusConfig,
    pub discretizer: DiscretizerStage,
    pub asr: AsrStage,
    pub vocoder: VocoderStage,
    pub refiner: RefinerStage,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            task: Task::Separation,
            seed: 0,
            output_dir: None,
            oracle_only: false,
            plots: false,
            write_audio: true,
            corpus: CorpusConfig::default(),
            discretizer: DiscretizerStage::default(),
            asr: AsrStage::default(),
            vocoder: VocoderStage::default(),
            refiner: RefinerStage::default(),
        }
    }
}

impl ExperimentConfig {
    /// Bundled configurations.
    ///
    /// `desk-sep-2spk`: 500 train / 50 test two-talker mixtures of 2 s at
    /// 8 kHz, J = 100, dual-path pseudo-ASR, lookup vocoder, refiner on.
    /// `desk-enh`: the same scale for speech-in-noise enhancement.
    /// `smoke`: a seconds-long run for tests.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self {
            name: name.to_string(),
            ..Self::default()
        };
        c.corpus.synth = SynthSpec {
            train: 500,
            valid: 0,
            test: 50,
            ..SynthSpec::default()
        };
        match name {
            "desk-sep-2spk" => {}
            "desk-enh" => {
                c.task = Task::Enhancement;
                c.corpus.synth.task = Task::Enhancement;
                c.corpus.synth.snr_db = (0.0, 10.0);
            }
            "smoke" => {
                c.corpus.synth = SynthSpec {
                    train: 12,
                    valid: 0,
                    test: 3,
                    duration_secs: 1.2,
                    ..SynthSpec::default()
                };
                c.discretizer.units = 16;
                c.discretizer.max_iters = 10;
                c.asr.dualpath = DualPathConfig {
                    channels: 16,
                    hidden: 8,
                    blocks: 1,
                    ..DualPathConfig::desk()
                };
                c.asr.train.steps = 4;
                c.refiner.model.filters = 8;
                c.refiner.model.bottleneck = 8;
                c.refiner.model.hidden = 4;
                c.refiner.model.blocks = 1;
                c.refiner.train.steps = 3;
                c.refiner.crop_secs = 0.25;
                c.vocoder.gl_iterations = 8;
                c.vocoder.train.steps = 3;
                c.write_audio = false;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(c)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Unreadable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies a `section.key=value` override; the value is parsed as a TOML
    /// literal and falls back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        let (last, parents) = keys.split_last().expect("split yields one key");
        let mut node = &mut root;
        for k in parents {
            node = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{path}`: `{k}` is not a section")))?
                .entry(k.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        node.as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{path}` does not name a key")))?
            .insert(last.to_string(), value);
        *self = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("`{path}`: {e}")))?;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        match self.corpus.source {
            CorpusSource::Synthetic => {
                if self.corpus.synth.task != self.task {
                    return Err(Error::Config(format!(
                        "task is {:?} but the synthetic corpus generates {:?}",
                        self.task, self.corpus.synth.task
                    )));
                }
                self.corpus.synth.validate()?;
                if self.corpus.synth.sample_rate != self.discretizer.features.sample_rate {
                    return Err(Error::Config("corpus and feature sample rates differ".into()));
                }
            }
            CorpusSource::Directory => match &self.corpus.root {
                Some(root) if root.is_dir() => {}
                Some(root) => return Err(Error::MissingStem(root.clone())),
                None => return Err(Error::Config("directory corpus needs corpus.root".into())),
            },
        }
        if self.discretizer.units < 2 {
            return Err(Error::Config("discretizer.units must be >= 2".into()));
        }
        if self.refiner.enabled {
            self.refiner.model.validate()?;
        }
        if !(self.refiner.crop_secs >= 0.0) {
            return Err(Error::Config("refiner.crop_secs must be >= 0".into()));
        }
        Ok(())
    }

    /// `output_dir`, else `$UNITSEP_OUTPUT_ROOT/<name>`, else `runs/<name>`.
    pub fn resolve_output_dir(&self) -> PathBuf {
        if let Some(d) = &self.output_dir {
            return d.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
        root.join(&self.name)
    }

    /// Generates or ingests the corpus and checks its stream count.
    pub fn load_corpus(&self, exec: Execution) -> Result<Corpus> {
        let corpus = match self.corpus.source {
            CorpusSource::Synthetic => synth_corpus_with(
                &self.corpus.synth,
                crate::data::derive_seed(self.seed, "corpus"),
                exec,
            )?,
            CorpusSource::Directory => {
                ingest_corpus(self.corpus.root.as_ref().expect("validated"))?
            }
        };
        let k = self.task.streams();
        if let Some(bad) = corpus.all().find(|e| e.targets.len() != k) {
            return Err(Error::StreamCountMismatch {
                expected: k,
                found: bad.targets.len(),
            });
        }
        if corpus.train.is_empty() || corpus.test.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(corpus)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip_through_toml() {
        for name in PRESETS {
            let c = ExperimentConfig::preset(name).unwrap();
            c.validate().unwrap();
            let text = c.to_toml_string().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let mut c = ExperimentConfig::preset("smoke").unwrap();
        c.apply_override("asr.train.steps=17").unwrap();
        c.apply_override("refiner.enabled=false").unwrap();
        c.apply_override("name=other").unwrap();
        c.apply_override("asr.architecture=transformer").unwrap();
        assert_eq!(c.asr.train.steps, 17);
        assert!(!c.refiner.enabled);
        assert_eq!(c.name, "other");
        assert_eq!(c.asr.architecture, Architecture::Transformer);
        assert!(c.apply_override("asr.train.steps=many").is_err());
        assert!(c.apply_override("no-equals").is_err());
    }

    #[test]
    fn task_must_agree_with_the_generator() {
        let mut c = ExperimentConfig::preset("smoke").unwrap();
        c.task = Task::Enhancement;
        assert!(c.validate().is_err());
        let mut d = ExperimentConfig::preset("smoke").unwrap();
        d.corpus.source = CorpusSource::Directory;
        d.corpus.root = Some(PathBuf::from("/definitely/not/here"));
        assert!(d.validate().is_err());
    }

    #[test]
    fn output_dir_prefers_the_explicit_setting() {
        let mut c = ExperimentConfig::preset("smoke").unwrap();
        c.output_dir = Some(PathBuf::from("/tmp/x"));
        assert_eq!(c.resolve_output_dir(), PathBuf::from("/tmp/x"));
    }
}
