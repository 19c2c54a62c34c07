//! Stage execution with hash-checked manifests and a single-writer lock.

use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use unitsep_nn::Adam;

use super::{report, AggregateRow, ExperimentConfig};
use crate::assignment::best_permutation;
use crate::data::{derive_seed, Corpus, MixtureExample};
use crate::discretizer::{quantize, train_codebook_with, Codebook, UnitSequence};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pairing, read_jsonl, write_jsonl, MetricReport};
use crate::parallel::Execution;
use crate::pseudo_asr::{unit_accuracy, Separator, SeparatorConfig, SeparatorExample};
use crate::refiner::{align, Refiner, RefinerExample};
use crate::signal::{save_wav, FeatureExtractor, LogMelExtractor, Waveform};
use crate::train::{ProgressLog, TrainSession};
use crate::vocoder::{train_decoder, DecoderTarget, Vocoder, VocoderConfig, VocoderMode};

/// Systems scored per test utterance, in report order.
pub const SYSTEMS: [&str; 5] = ["mixture", "oracle", "predicted", "aligned", "refined"];

const LOCK_FILE: &str = ".lock";

/// Record of a finished (or in-progress) stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    /// Hash of the stage configuration and every upstream stage hash.
    pub input_hash: String,
    /// Paths relative to the experiment directory.
    pub outputs: Vec<String>,
    pub complete: bool,
    #[serde(default)]
    pub summary: Value,
}

/// Manifest store under `<dir>/stages/`.
pub struct Stages {
    dir: PathBuf,
}

impl Stages {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, stage: &str) -> PathBuf {
        self.dir.join("stages").join(format!("{stage}.json"))
    }

    pub fn read(&self, stage: &str) -> Option<StageManifest> {
        let bytes = fs::read(self.path(stage)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    /// The manifest if it is complete, matches `hash`, and its outputs exist.
    pub fn completed(&self, stage: &str, hash: &str) -> Option<StageManifest> {
        self.read(stage)
            .filter(|m| m.complete && m.input_hash == hash && m.outputs.iter().all(|o| self.dir.join(o).exists()))
    }

    /// Whether an unfinished run with the same inputs left a checkpoint.
    pub fn resumable(&self, stage: &str, hash: &str, checkpoint: &str) -> bool {
        self.read(stage)
            .is_some_and(|m| !m.complete && m.input_hash == hash && self.dir.join(checkpoint).is_file())
    }

    pub fn record(&self, manifest: &StageManifest) -> Result<()> {
        let path = self.path(&manifest.stage);
        fs::create_dir_all(path.parent().expect("stages dir"))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(manifest)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }
}

/// Exclusive hold on an experiment directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn lock_dir(dir: &Path) -> Result<DirLock> {
    fs::create_dir_all(dir)?;
    let path = dir.join(LOCK_FILE);
    match OpenOptions::new().write(true).create_new(true).open(&path) {
        Ok(mut f) => {
            let _ = writeln!(f, "{}", std::process::id());
            Ok(DirLock { path })
        }
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
        Err(e) => Err(e.into()),
    }
}

fn hash_of(parts: &[Value]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(serde_json::to_vec(p).expect("json values serialize"));
        h.update([0u8]);
    }
    hex::encode(&h.finalize()[..16])
}

fn in_stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|cause| Error::Stage {
        stage: name.to_string(),
        cause: Box::new(cause),
    })
}

/// Unit targets for every example: one sequence per stem, tagged with the
/// stem's speaker when known.
pub fn quantize_targets(
    examples: &[MixtureExample],
    extractor: &LogMelExtractor,
    cb: &Codebook,
    exec: Execution,
) -> Result<Vec<Vec<UnitSequence>>> {
    exec.try_map(examples, |ex| {
        ex.targets
            .iter()
            .enumerate()
            .map(|(k, t)| Ok(quantize(&extractor.extract(t)?, cb)?.with_speaker(ex.speakers.get(k).copied())))
            .collect()
    })
}

/// Estimate-to-target assignment maximizing frame agreement of unit ids;
/// `result[i]` is the target paired with estimate `i`.
pub fn pair_by_units(predicted: &[UnitSequence], targets: &[UnitSequence]) -> Vec<usize> {
    let k = predicted.len();
    let cost = Array2::from_shape_fn((k, k), |(i, j)| {
        let (a, b) = (&predicted[i].ids, &targets[j].ids);
        -(a.iter().zip(b).filter(|(x, y)| x == y).count() as f64)
    });
    best_permutation(&cost)
}

fn vocoder_speaker(vocoder: &Vocoder, speaker: Option<usize>) -> Option<usize> {
    (vocoder.config().num_speakers > 0).then_some(speaker).flatten()
}

/// Stage 1 on one mixture: unit sequences and their resynthesis, fitted to
/// the mixture length.
pub fn decode_mixture(
    separator: &Separator,
    vocoder: &Vocoder,
    mixture: &Waveform,
) -> Result<(Vec<UnitSequence>, Vec<Waveform>)> {
    let (units, speakers) = separator.separate(mixture)?;
    let waves = units
        .iter()
        .zip(&speakers)
        .map(|(y, &s)| vocoder.synthesize(y, vocoder_speaker(vocoder, s))?.fit_to_len(mixture.len()))
        .collect::<Result<Vec<_>>>()?;
    Ok((units, waves))
}

/// `(mixture, aligned estimate, target)` crops for refiner training.
pub fn refiner_examples(
    examples: &[MixtureExample],
    units: &[Vec<UnitSequence>],
    separator: &Separator,
    vocoder: &Vocoder,
    crop_secs: f64,
    seed: u64,
    exec: Execution,
) -> Result<Vec<(Waveform, Waveform, Waveform)>> {
    let max_shift = vocoder.config().downsample_factor;
    let idx: Vec<usize> = (0..examples.len()).collect();
    let per_example = exec.try_map(&idx, |&idx| {
        let ex = &examples[idx];
        let (pred, waves) = decode_mixture(separator, vocoder, &ex.mixture)?;
        let perm = pair_by_units(&pred, &units[idx]);
        let sr = ex.mixture.sample_rate();
        let crop = (crop_secs * sr as f64).round() as usize;
        let mut out = Vec::with_capacity(waves.len());
        for (i, w) in waves.iter().enumerate() {
            let (aligned, _) = align(w, &ex.mixture, max_shift)?;
            let target = &ex.targets[perm[i]];
            let len = ex.mixture.len();
            let (start, end) = if crop == 0 || crop >= len {
                (0, len)
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("crop/{}/{i}", ex.id)));
                let s = rng.gen_range(0..=len - crop);
                (s, s + crop)
            };
            let cut = |x: &Waveform| Waveform::new(x.samples()[start..end].to_vec(), sr);
            out.push((cut(&ex.mixture)?, cut(&aligned)?, cut(target)?));
        }
        Ok::<_, Error>(out)
    })?;
    Ok(per_example.into_iter().flatten().collect())
}

/// Scores and audio of one test utterance.
pub struct EvaluatedExample {
    pub reports: Vec<MetricReport>,
    pub audio: Vec<(&'static str, Vec<Waveform>)>,
}

/// Runs every available system on one test mixture and scores it.
pub fn evaluate_example(
    ex: &MixtureExample,
    oracle_units: &[UnitSequence],
    vocoder: &Vocoder,
    separator: Option<&Separator>,
    refiner: Option<&Refiner>,
) -> Result<EvaluatedExample> {
    let len = ex.mixture.len();
    let mut systems: Vec<(&'static str, Vec<Waveform>, Option<f64>)> = Vec::new();
    systems.push(("mixture", vec![ex.mixture.clone(); ex.targets.len()], None));
    let oracle = oracle_units
        .iter()
        .map(|y| vocoder.synthesize(y, vocoder_speaker(vocoder, y.speaker_id))?.fit_to_len(len))
        .collect::<Result<Vec<_>>>()?;
    systems.push(("oracle", oracle, Some(1.0)));
    if let Some(sep) = separator {
        let (pred, waves) = decode_mixture(sep, vocoder, &ex.mixture)?;
        let acc = unit_accuracy(&pred, oracle_units)?;
        let max_shift = vocoder.config().downsample_factor;
        let aligned = waves
            .iter()
            .map(|w| Ok(align(w, &ex.mixture, max_shift)?.0))
            .collect::<Result<Vec<_>>>()?;
        systems.push(("predicted", waves, Some(acc)));
        if let Some(r) = refiner {
            let refined = aligned
                .iter()
                .map(|a| r.refine(&ex.mixture, a))
                .collect::<Result<Vec<_>>>()?;
            systems.push(("aligned", aligned, Some(acc)));
            systems.push(("refined", refined, Some(acc)));
        }
    }
    let mut reports = Vec::with_capacity(systems.len());
    let mut audio = Vec::with_capacity(systems.len());
    for (name, waves, acc) in systems {
        let mut r = evaluate_pairing(&waves, &ex.targets)?.with_labels(&ex.id, name);
        r.unit_accuracy = acc;
        reports.push(r);
        if name != "mixture" {
            audio.push((name, waves));
        }
    }
    Ok(EvaluatedExample { reports, audio })
}

fn speaker_count(corpus: &Corpus) -> usize {
    let all_known = corpus.train.iter().all(|e| e.speakers.len() == e.targets.len());
    if !all_known {
        return 0;
    }
    corpus.all().flat_map(|e| e.speakers.iter()).max().map_or(0, |m| m + 1)
}

/// Trains (or resumes) a separator on quantized targets, checkpointing to
/// `session.checkpoint`.
pub fn train_separator(
    config: &ExperimentConfig,
    cb: &Codebook,
    corpus: &Corpus,
    units: &[Vec<UnitSequence>],
    resume: Option<(Separator, Adam)>,
    session: &mut TrainSession,
) -> Result<(Separator, Adam)> {
    let speakers = if config.asr.speaker_head { speaker_count(corpus) } else { 0 };
    let (mut sep, mut adam) = match resume {
        Some(state) => state,
        None => {
            let mut sc = SeparatorConfig::for_codebook(cb, config.asr.architecture, config.task.streams(), speakers);
            sc.dualpath = config.asr.dualpath.clone();
            sc.transformer = config.asr.transformer.clone();
            sc.speaker_weight = config.asr.speaker_weight;
            let sep = Separator::new(sc, &cb.id(), derive_seed(config.seed, "asr"))?;
            let adam = Adam::new(config.asr.train.adam(), &sep.store);
            (sep, adam)
        }
    };
    let data: Vec<SeparatorExample> = corpus
        .train
        .iter()
        .zip(units)
        .map(|(e, t)| SeparatorExample {
            mixture: &e.mixture,
            targets: t,
            speakers: (speakers > 0).then_some(e.speakers.as_slice()),
        })
        .collect();
    let mut train = config.asr.train.clone();
    train.seed = derive_seed(config.seed, "asr.batches");
    sep.fit(&data, &train, &mut adam, session)?;
    Ok((sep, adam))
}

/// What a finished run produced.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub reports: Vec<MetricReport>,
    pub table: Vec<AggregateRow>,
    /// Stages whose recorded outputs were reused.
    pub reused: Vec<String>,
}

struct Ctx {
    dir: PathBuf,
    stages: Stages,
    exec: Execution,
    reused: Vec<String>,
}

impl Ctx {
    fn session(&self, stage: &str, checkpoint: &str, resume: bool) -> Result<TrainSession> {
        fs::create_dir_all(self.dir.join("logs"))?;
        Ok(TrainSession {
            log: ProgressLog::open(self.dir.join("logs").join(format!("{stage}.jsonl")), resume)?,
            checkpoint: Some(self.dir.join(checkpoint)),
            exec: self.exec,
        })
    }

    fn done(&self, stage: &str, hash: &str, outputs: &[&str], summary: Value) -> Result<()> {
        self.stages.record(&StageManifest {
            stage: stage.into(),
            input_hash: hash.into(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            complete: true,
            summary,
        })
    }

    fn pending(&self, stage: &str, hash: &str) -> Result<()> {
        self.stages.record(&StageManifest {
            stage: stage.into(),
            input_hash: hash.into(),
            outputs: Vec::new(),
            complete: false,
            summary: Value::Null,
        })
    }
}

fn save_units(dir: &Path, examples: &[MixtureExample], units: &[Vec<UnitSequence>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (ex, ys) in examples.iter().zip(units) {
        for (k, y) in ys.iter().enumerate() {
            y.save(dir.join(format!("{}_s{}.units", ex.id, k + 1)))?;
        }
    }
    Ok(())
}

fn load_units(dir: &Path, examples: &[MixtureExample]) -> Result<Vec<Vec<UnitSequence>>> {
    examples
        .iter()
        .map(|ex| {
            (0..ex.targets.len())
                .map(|k| UnitSequence::load(dir.join(format!("{}_s{}.units", ex.id, k + 1))))
                .collect()
        })
        .collect()
}

/// Executes the experiment end to end: codebook, target quantization,
/// pseudo-ASR, vocoder, refiner, then test decoding, synthesis and scoring.
/// Stages whose manifest matches the current inputs are loaded instead of
/// recomputed; interrupted training resumes from its last checkpoint.
pub fn run_experiment(config: &ExperimentConfig, exec: Execution) -> Result<ExperimentOutcome> {
    config.validate()?;
    let dir = config.resolve_output_dir();
    let _lock = lock_dir(&dir)?;
    fs::write(dir.join("config.toml"), config.to_toml_string()?)?;
    let mut ctx = Ctx {
        stages: Stages::new(&dir),
        dir: dir.clone(),
        exec,
        reused: Vec::new(),
    };

    let corpus = in_stage("corpus", || config.load_corpus(exec))?;
    let h_corpus = hash_of(&[json!(config.task), json!(config.corpus), json!(config.seed)]);
    ctx.done(
        "corpus",
        &h_corpus,
        &[],
        json!({"train": corpus.train.len(), "valid": corpus.valid.len(), "test": corpus.test.len()}),
    )?;

    let extractor = LogMelExtractor::new(config.discretizer.features.clone())?;
    let h_cb = hash_of(&[json!(h_corpus), json!(config.discretizer)]);
    let cb = in_stage("codebook", || {
        if ctx.stages.completed("codebook", &h_cb).is_some() {
            ctx.reused.push("codebook".into());
            return Codebook::load(dir.join("codebook.cb"));
        }
        log::info!("training a {}-unit codebook", config.discretizer.units);
        let feats = exec.try_map(
            &corpus.train.iter().flat_map(|e| e.targets.iter()).collect::<Vec<_>>(),
            |t| extractor.extract(t),
        )?;
        let (cb, klog) = train_codebook_with(
            &feats,
            config.discretizer.units,
            config.discretizer.max_iters,
            derive_seed(config.seed, "codebook"),
            exec,
        )?;
        cb.save(dir.join("codebook.cb"))?;
        ctx.done("codebook", &h_cb, &["codebook.cb"], json!({"id": cb.id(), "iterations": klog.inertia.len(), "converged": klog.converged}))?;
        Ok(cb)
    })?;

    let h_q = hash_of(&[json!(h_cb)]);
    let (train_units, test_units) = in_stage("quantize", || {
        let (tr, tt) = (dir.join("units/train"), dir.join("units/test"));
        if ctx.stages.completed("quantize", &h_q).is_some() {
            ctx.reused.push("quantize".into());
            return Ok((load_units(&tr, &corpus.train)?, load_units(&tt, &corpus.test)?));
        }
        let a = quantize_targets(&corpus.train, &extractor, &cb, exec)?;
        let b = quantize_targets(&corpus.test, &extractor, &cb, exec)?;
        save_units(&tr, &corpus.train, &a)?;
        save_units(&tt, &corpus.test, &b)?;
        ctx.done("quantize", &h_q, &["units/train", "units/test"], Value::Null)?;
        Ok((a, b))
    })?;

    let h_asr = hash_of(&[json!(h_q), json!(config.asr), json!(config.seed)]);
    let separator = if config.oracle_only {
        None
    } else {
        Some(in_stage("asr", || {
            let ckpt = "checkpoints/asr.ckpt";
            if ctx.stages.completed("asr", &h_asr).is_some() {
                ctx.reused.push("asr".into());
                return Ok(Separator::load(dir.join(ckpt))?.0);
            }
            fs::create_dir_all(dir.join("checkpoints"))?;
            let resume = if ctx.stages.resumable("asr", &h_asr, ckpt) {
                let (sep, adam) = Separator::load(dir.join(ckpt))?;
                adam.map(|a| (sep, a))
            } else {
                None
            };
            log::info!(
                "training the pseudo-ASR ({} steps{})",
                config.asr.train.steps,
                if resume.is_some() { ", resuming" } else { "" }
            );
            let mut session = ctx.session("asr", ckpt, resume.is_some())?;
            ctx.pending("asr", &h_asr)?;
            let (sep, adam) = train_separator(config, &cb, &corpus, &train_units, resume, &mut session)?;
            sep.save(dir.join(ckpt), Some(&adam))?;
            ctx.done("asr", &h_asr, &[ckpt], json!({"parameters": sep.store.num_scalars()}))?;
            Ok(sep)
        })?)
    };

    let h_voc = hash_of(&[json!(h_q), json!(config.vocoder), json!(config.seed)]);
    let vocoder = in_stage("vocoder", || {
        let mut vc = VocoderConfig::for_codebook(&cb);
        vc.gl_iterations = config.vocoder.gl_iterations;
        vc.decoder = config.vocoder.decoder.clone();
        match config.vocoder.mode {
            VocoderMode::LookupGl => {
                ctx.done("vocoder", &h_voc, &[], json!({"mode": "lookup_gl"}))?;
                Vocoder::new(cb.clone(), vc)
            }
            VocoderMode::TrainedDecoder => {
                let ckpt = "checkpoints/vocoder.ckpt";
                if ctx.stages.completed("vocoder", &h_voc).is_some() {
                    ctx.reused.push("vocoder".into());
                    return Ok(Vocoder::load_decoder(dir.join(ckpt), cb.clone())?.0);
                }
                if config.vocoder.speaker_conditioned {
                    vc.num_speakers = speaker_count(&corpus);
                }
                let items: Vec<DecoderTarget> = corpus
                    .train
                    .iter()
                    .zip(&train_units)
                    .flat_map(|(e, ys)| {
                        e.targets.iter().zip(ys).map(move |(t, y)| DecoderTarget {
                            units: y,
                            target: t,
                            speaker: y.speaker_id,
                        })
                    })
                    .map(|mut d| {
                        if vc.num_speakers == 0 {
                            d.speaker = None;
                        }
                        d
                    })
                    .collect();
                let mut train = config.vocoder.train.clone();
                train.seed = derive_seed(config.seed, "vocoder");
                fs::create_dir_all(dir.join("checkpoints"))?;
                let mut log = ctx.session("vocoder", ckpt, false)?.log;
                let (voc, _, adam) = train_decoder(&cb, vc, &items, &train, &mut log)?;
                voc.save_decoder(dir.join(ckpt), Some(&adam))?;
                ctx.done("vocoder", &h_voc, &[ckpt], json!({"mode": "trained_decoder"}))?;
                Ok(voc)
            }
            VocoderMode::External => Err(Error::Config(
                "external vocoders are registered through the library API, not the experiment runner".into(),
            )),
        }
    })?;

    let h_ref = hash_of(&[json!(h_asr), json!(h_voc), json!(config.refiner), json!(config.seed)]);
    let refiner = match &separator {
        Some(sep) if config.refiner.enabled => Some(in_stage("refiner", || {
            let ckpt = "checkpoints/refiner.ckpt";
            if ctx.stages.completed("refiner", &h_ref).is_some() {
                ctx.reused.push("refiner".into());
                return Ok(Refiner::load(dir.join(ckpt))?.0);
            }
            log::info!("decoding training mixtures for the refiner");
            let triples = refiner_examples(
                &corpus.train,
                &train_units,
                sep,
                &vocoder,
                config.refiner.crop_secs,
                derive_seed(config.seed, "refiner.crops"),
                exec,
            )?;
            let data: Vec<RefinerExample> = triples
                .iter()
                .map(|(m, e, t)| RefinerExample {
                    mixture: m,
                    estimate: e,
                    target: t,
                })
                .collect();
            fs::create_dir_all(dir.join("checkpoints"))?;
            let resumed = if ctx.stages.resumable("refiner", &h_ref, ckpt) {
                match Refiner::load(dir.join(ckpt))? {
                    (r, Some(a)) => Some((r, a)),
                    _ => None,
                }
            } else {
                None
            };
            let mut session = ctx.session("refiner", ckpt, resumed.is_some())?;
            let (mut model, mut adam) = match resumed {
                Some(state) => state,
                None => {
                    let mut rc = config.refiner.model.clone();
                    rc.sample_rate = cb.features().sample_rate;
                    rc.max_shift = vocoder.config().downsample_factor;
                    let m = Refiner::new(rc, derive_seed(config.seed, "refiner"))?;
                    let a = Adam::new(config.refiner.train.adam(), &m.store);
                    (m, a)
                }
            };
            ctx.pending("refiner", &h_ref)?;
            log::info!("training the refiner ({} steps)", config.refiner.train.steps);
            let mut train = config.refiner.train.clone();
            train.seed = derive_seed(config.seed, "refiner.batches");
            model.fit(&data, &train, &mut adam, &mut session)?;
            model.save(dir.join(ckpt), None)?;
            ctx.done("refiner", &h_ref, &[ckpt], json!({"examples": data.len()}))?;
            Ok(model)
        })?),
        _ => None,
    };

    let h_eval = hash_of(&[
        json!(h_q),
        json!(separator.is_some().then_some(&h_asr)),
        json!(h_voc),
        json!(refiner.is_some().then_some(&h_ref)),
        json!(config.write_audio),
    ]);
    let reports = in_stage("evaluate", || {
        let metrics = "metrics/reports.jsonl";
        if ctx.stages.completed("evaluate", &h_eval).is_some() {
            ctx.reused.push("evaluate".into());
            return read_jsonl(BufReader::new(File::open(dir.join(metrics))?));
        }
        log::info!("scoring {} test mixtures", corpus.test.len());
        let idx: Vec<usize> = (0..corpus.test.len()).collect();
        let results = exec.try_map(&idx, |&i| {
            evaluate_example(
                &corpus.test[i],
                &test_units[i],
                &vocoder,
                separator.as_ref(),
                refiner.as_ref(),
            )
        })?;
        if config.write_audio {
            for (ex, r) in corpus.test.iter().zip(&results) {
                for (system, waves) in &r.audio {
                    let d = dir.join("audio").join(system);
                    fs::create_dir_all(&d)?;
                    for (k, w) in waves.iter().enumerate() {
                        save_wav(w, d.join(format!("{}_s{}.wav", ex.id, k + 1)))?;
                    }
                }
            }
        }
        let mut reports: Vec<MetricReport> = Vec::new();
        for system in SYSTEMS {
            reports.extend(results.iter().flat_map(|r| r.reports.iter().filter(|m| m.system == system)).cloned());
        }
        fs::create_dir_all(dir.join("metrics"))?;
        write_jsonl(BufWriter::new(File::create(dir.join(metrics))?), &reports)?;
        ctx.done("evaluate", &h_eval, &[metrics], json!({"reports": reports.len()}))?;
        Ok(reports)
    })?;

    let table = in_stage("report", || report(&reports, &dir.join("report"), config.plots))?;
    Ok(ExperimentOutcome {
        dir,
        reports,
        table,
        reused: ctx.reused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(ids: Vec<usize>) -> UnitSequence {
        UnitSequence {
            ids,
            frame_hop: 160,
            codebook_id: "x".into(),
            speaker_id: None,
        }
    }

    #[test]
    fn pairing_follows_unit_agreement() {
        let a = [seq(vec![1, 1, 2, 2]), seq(vec![3, 3, 4, 4])];
        let t = [seq(vec![3, 3, 4, 0]), seq(vec![1, 1, 2, 0])];
        assert_eq!(pair_by_units(&a, &t), vec![1, 0]);
    }

    #[test]
    fn lock_is_exclusive_and_released_on_drop() {
        let tmp = tempfile::tempdir().unwrap();
        let first = lock_dir(tmp.path()).unwrap();
        assert!(matches!(lock_dir(tmp.path()), Err(Error::Locked(_))));
        drop(first);
        lock_dir(tmp.path()).unwrap();
    }

    #[test]
    fn manifests_need_matching_hash_and_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let stages = Stages::new(tmp.path());
        fs::write(tmp.path().join("out.bin"), b"x").unwrap();
        stages
            .record(&StageManifest {
                stage: "s".into(),
                input_hash: "abc".into(),
                outputs: vec!["out.bin".into()],
                complete: true,
                summary: Value::Null,
            })
            .unwrap();
        assert!(stages.completed("s", "abc").is_some());
        assert!(stages.completed("s", "abd").is_none());
        fs::remove_file(tmp.path().join("out.bin")).unwrap();
        assert!(stages.completed("s", "abc").is_none());
    }

    #[test]
    fn stage_hash_depends_on_every_part() {
        let a = hash_of(&[json!(1), json!("x")]);
        assert_eq!(a, hash_of(&[json!(1), json!("x")]));
        assert_ne!(a, hash_of(&[json!(1), json!("y")]));
        assert_ne!(hash_of(&[json!("ab"), json!("c")]), hash_of(&[json!("a"), json!("bc")]));
    }
}
