//! `unitsep`: corpus preparation, training, inference, scoring and reporting
//! for discrete-unit speech separation.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use unitsep_core::data::{ingest_corpus, write_corpus, Corpus, SPLIT_DIRS};
use unitsep_core::discretizer::{quantize, train_codebook_with, Codebook};
use unitsep_core::metrics::{evaluate_pairing, read_jsonl, write_jsonl};
use unitsep_core::pipeline::{
    decode_mixture, quantize_targets, refiner_examples, render_table, report, run_experiment, train_separator,
    ExperimentConfig,
};
use unitsep_core::pseudo_asr::Separator;
use unitsep_core::refiner::{align, Backbone, Refiner, RefinerExample};
use unitsep_core::signal::{load_wav, save_wav, FeatureExtractor, LogMelExtractor};
use unitsep_core::train::{ProgressLog, TrainSession};
use unitsep_core::vocoder::{train_decoder, DecoderTarget, Vocoder, VocoderConfig};
use unitsep_core::Execution;
use unitsep_nn::Adam;

#[derive(Parser)]
#[command(name = "unitsep", version, about = "Speech separation as discrete-unit classification and resynthesis")]
struct Cli {
    /// Run batch work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bundled preset used when no --config is given.
    #[arg(long, default_value = "desk-sep-2spk")]
    preset: String,
    /// Override a configuration key, e.g. --set asr.train.steps=200.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    /// Config file or preset, then `--set`, then the command's own flags.
    fn resolve(&self, flags: &[(&str, Option<String>)]) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::preset(&self.preset)?,
        };
        for o in &self.overrides {
            c.apply_override(o)?;
        }
        for (key, value) in flags {
            if let Some(v) = value {
                c.apply_override(&format!("{key}={v}"))?;
            }
        }
        Ok(c)
    }
}

fn flag<T: ToString>(key: &'static str, v: &Option<T>) -> (&'static str, Option<String>) {
    (key, v.as_ref().map(ToString::to_string))
}

fn quoted(key: &'static str, v: &Option<impl AsRef<str>>) -> (&'static str, Option<String>) {
    (key, v.as_ref().map(|s| format!("\"{}\"", s.as_ref())))
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus in the `{tr,cv,tt}/{mix,s1,…}` layout.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        valid: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        /// Utterance length in seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        speakers: Option<usize>,
    },
    /// Load a corpus directory and report what it contains.
    IngestCheck {
        #[arg(long)]
        root: PathBuf,
    },
    /// Fit the k-means codebook on the training stems of a corpus.
    TrainCodebook {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        units: Option<usize>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convert WAV files to unit sequences.
    Quantize {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Train the pseudo-ASR separator with utterance-level PIT.
    TrainAsr {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        /// Checkpoint path (also written during training).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// `dualpath` or `transformer`.
        #[arg(long)]
        architecture: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Progress records (newline-delimited JSON).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from the checkpoint at --out.
        #[arg(long)]
        resume: bool,
    },
    /// Train the unit-to-spectrogram decoder of the vocoder.
    TrainVocoder {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Condition on the corpus speaker ids.
        #[arg(long)]
        speakers: Option<bool>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the second-stage refiner on stage-1 outputs of the training set.
    TrainRefiner {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        asr: PathBuf,
        /// Trained decoder checkpoint; lookup synthesis when absent.
        #[arg(long)]
        vocoder: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        crop_secs: Option<f64>,
        /// `dualpath_like` or `conv_tasnet_like`.
        #[arg(long)]
        backbone: Option<String>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Separate mixtures into `<name>_s<k>.wav` plus unit files.
    Separate(InferArgs),
    /// Enhance noisy speech with a single-stream model.
    Enhance(InferArgs),
    /// Score estimates against a corpus split, one JSON line per utterance.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        /// Directory holding `<id>_s<k>.wav` estimates.
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "tt")]
        split: String,
        #[arg(long, default_value = "system")]
        system: String,
    },
    /// Aggregate metric files into the quality and overlap tables.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plots: bool,
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
    /// Run a whole experiment with stage manifests.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        oracle_only: bool,
        #[arg(long)]
        plots: bool,
    },
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    asr: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long)]
    vocoder: Option<PathBuf>,
    #[arg(long)]
    refiner: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    ingest_corpus(dir).with_context(|| format!("loading corpus `{}`", dir.display()))
}

fn load_codebook(path: &Path) -> Result<Codebook> {
    Codebook::load(path).with_context(|| format!("loading codebook `{}`", path.display()))
}

fn load_vocoder(path: Option<&Path>, cb: &Codebook) -> Result<Vocoder> {
    Ok(match path {
        Some(p) => Vocoder::load_decoder(p, cb.clone())?.0,
        None => Vocoder::new(cb.clone(), VocoderConfig::for_codebook(cb))?,
    })
}

fn load_separator(path: &Path, cb: &Codebook) -> Result<Separator> {
    let (sep, _) = Separator::load(path).with_context(|| format!("loading `{}`", path.display()))?;
    let fresh = Separator::new(sep.config().clone(), &cb.id(), 0)?;
    // a separator built for this codebook must reproduce the checkpoint's frame layout
    if sep.config().units != cb.size() || fresh.config().frame_hop != cb.frame_hop() {
        bail!("separator `{}` was not trained with this codebook", path.display());
    }
    Ok(sep)
}

fn extractor_for(cb: &Codebook) -> Result<LogMelExtractor> {
    Ok(LogMelExtractor::new(VocoderConfig::for_codebook(cb).mel)?)
}

fn log_file(path: &Option<PathBuf>, append: bool) -> Result<ProgressLog> {
    Ok(match path {
        Some(p) => ProgressLog::open(p, append)?,
        None => ProgressLog::disabled(),
    })
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("out").to_string()
}

fn infer(args: &InferArgs, single_stream: bool, exec: Execution) -> Result<()> {
    let cb = load_codebook(&args.codebook)?;
    let sep = load_separator(&args.asr, &cb)?;
    let streams = sep.config().streams;
    if single_stream && streams != 1 {
        bail!("enhance needs a single-stream model; `{}` has {streams} streams", args.asr.display());
    }
    let vocoder = load_vocoder(args.vocoder.as_deref(), &cb)?;
    let refiner = match &args.refiner {
        Some(p) => Some(Refiner::load(p)?.0),
        None => None,
    };
    std::fs::create_dir_all(&args.out)?;
    let results = exec.try_map(&args.inputs, |input| -> Result<()> {
        let mixture = load_wav(input)?;
        let (units, waves) = decode_mixture(&sep, &vocoder, &mixture)?;
        let name = stem(input);
        for (k, (y, w)) in units.iter().zip(&waves).enumerate() {
            let out = match &refiner {
                Some(r) => r.refine(&mixture, &align(w, &mixture, cb.frame_hop())?.0)?,
                None => w.clone(),
            };
            save_wav(&out, args.out.join(format!("{name}_s{}.wav", k + 1)))?;
            y.save(args.out.join(format!("{name}_s{}.units", k + 1)))?;
        }
        Ok(())
    });
    results?;
    println!("wrote {} × {streams} streams to {}", args.inputs.len(), args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };

    match cli.command {
        Command::SynthData {
            out,
            cfg,
            seed,
            train,
            valid,
            test,
            duration,
            speakers,
        } => {
            let c = cfg.resolve(&[
                flag("seed", &seed),
                flag("corpus.synth.train", &train),
                flag("corpus.synth.valid", &valid),
                flag("corpus.synth.test", &test),
                flag("corpus.synth.duration_secs", &duration),
                flag("corpus.synth.num_speakers", &speakers),
            ])?;
            let corpus = c.load_corpus(exec)?;
            write_corpus(&out, &corpus)?;
            println!(
                "wrote {} train / {} valid / {} test mixtures to {}",
                corpus.train.len(),
                corpus.valid.len(),
                corpus.test.len(),
                out.display()
            );
        }
        Command::IngestCheck { root } => {
            let corpus = load_corpus(&root)?;
            for (name, split) in SPLIT_DIRS.iter().zip([&corpus.train, &corpus.valid, &corpus.test]) {
                let secs: f64 = split.iter().map(|e| e.mixture.duration_secs()).sum();
                let streams = split.first().map_or(0, |e| e.targets.len());
                let rate = split.first().map_or(0, |e| e.mixture.sample_rate());
                println!("{name}: {} mixtures, {streams} stems, {rate} Hz, {secs:.1} s", split.len());
            }
        }
        Command::TrainCodebook {
            corpus,
            out,
            cfg,
            units,
            max_iters,
            seed,
        } => {
            let c = cfg.resolve(&[
                flag("discretizer.units", &units),
                flag("discretizer.max_iters", &max_iters),
                flag("seed", &seed),
            ])?;
            let corpus = load_corpus(&corpus)?;
            let extractor = LogMelExtractor::new(c.discretizer.features.clone())?;
            let stems: Vec<_> = corpus.train.iter().flat_map(|e| e.targets.iter()).collect();
            let feats = exec.try_map(&stems, |t| extractor.extract(t))?;
            let (cb, log) = train_codebook_with(&feats, c.discretizer.units, c.discretizer.max_iters, c.seed, exec)?;
            cb.save(&out)?;
            println!(
                "codebook {} ({} units, {} iterations, final inertia {:.4e})",
                cb.id(),
                cb.size(),
                log.inertia.len(),
                log.inertia.last().copied().unwrap_or(0.0)
            );
        }
        Command::Quantize { codebook, out, inputs } => {
            let cb = load_codebook(&codebook)?;
            let extractor = extractor_for(&cb)?;
            std::fs::create_dir_all(&out)?;
            for input in &inputs {
                let y = quantize(&extractor.extract(&load_wav(input)?)?, &cb)?;
                y.save(out.join(format!("{}.units", stem(input))))?;
            }
            println!("quantized {} files into {}", inputs.len(), out.display());
        }
        Command::TrainAsr {
            corpus,
            codebook,
            out,
            cfg,
            architecture,
            steps,
            batch_size,
            lr,
            checkpoint_every,
            seed,
            log,
            resume,
        } => {
            let c = cfg.resolve(&[
                quoted("asr.architecture", &architecture),
                flag("asr.train.steps", &steps),
                flag("asr.train.batch_size", &batch_size),
                flag("asr.train.learning_rate", &lr),
                flag("asr.train.checkpoint_every", &checkpoint_every),
                flag("seed", &seed),
            ])?;
            let corpus = load_corpus(&corpus)?;
            let cb = load_codebook(&codebook)?;
            let units = quantize_targets(&corpus.train, &extractor_for(&cb)?, &cb, exec)?;
            let state = if resume && out.is_file() {
                match Separator::load(&out)? {
                    (sep, Some(adam)) => Some((sep, adam)),
                    _ => bail!("`{}` holds no optimizer state to resume from", out.display()),
                }
            } else {
                None
            };
            let mut session = TrainSession {
                log: log_file(&log, state.is_some())?,
                checkpoint: Some(out.clone()),
                exec,
            };
            let (sep, adam) = train_separator(&c, &cb, &corpus, &units, state, &mut session)?;
            sep.save(&out, Some(&adam))?;
            println!("saved separator ({} parameters) to {}", sep.store.num_scalars(), out.display());
        }
        Command::TrainVocoder {
            corpus,
            codebook,
            out,
            cfg,
            steps,
            lr,
            speakers,
            log,
        } => {
            let c = cfg.resolve(&[
                flag("vocoder.train.steps", &steps),
                flag("vocoder.train.learning_rate", &lr),
                flag("vocoder.speaker_conditioned", &speakers),
            ])?;
            let corpus = load_corpus(&corpus)?;
            let cb = load_codebook(&codebook)?;
            let units = quantize_targets(&corpus.train, &extractor_for(&cb)?, &cb, exec)?;
            let mut vc = VocoderConfig::for_codebook(&cb);
            vc.decoder = c.vocoder.decoder.clone();
            vc.gl_iterations = c.vocoder.gl_iterations;
            let known = corpus.train.iter().all(|e| e.speakers.len() == e.targets.len());
            if c.vocoder.speaker_conditioned && known {
                vc.num_speakers = corpus.all().flat_map(|e| e.speakers.iter()).max().map_or(0, |m| m + 1);
            }
            let items: Vec<DecoderTarget> = corpus
                .train
                .iter()
                .zip(&units)
                .flat_map(|(e, ys)| e.targets.iter().zip(ys))
                .map(|(t, y)| DecoderTarget {
                    units: y,
                    target: t,
                    speaker: if vc.num_speakers > 0 { y.speaker_id } else { None },
                })
                .collect();
            let mut train = c.vocoder.train.clone();
            train.seed = c.seed;
            let (voc, curve, adam) = train_decoder(&cb, vc, &items, &train, &mut log_file(&log, false)?)?;
            voc.save_decoder(&out, Some(&adam))?;
            println!(
                "decoder loss {:.4} → {:.4}; saved to {}",
                curve.first().copied().unwrap_or(0.0),
                curve.last().copied().unwrap_or(0.0),
                out.display()
            );
        }
        Command::TrainRefiner {
            corpus,
            codebook,
            asr,
            vocoder,
            out,
            cfg,
            steps,
            lr,
            crop_secs,
            backbone,
            log,
        } => {
            let c = cfg.resolve(&[
                flag("refiner.train.steps", &steps),
                flag("refiner.train.learning_rate", &lr),
                flag("refiner.crop_secs", &crop_secs),
                quoted("refiner.model.backbone", &backbone),
            ])?;
            let corpus = load_corpus(&corpus)?;
            let cb = load_codebook(&codebook)?;
            let sep = load_separator(&asr, &cb)?;
            let voc = load_vocoder(vocoder.as_deref(), &cb)?;
            let units = quantize_targets(&corpus.train, &extractor_for(&cb)?, &cb, exec)?;
            let triples = refiner_examples(&corpus.train, &units, &sep, &voc, c.refiner.crop_secs, c.seed, exec)?;
            let data: Vec<RefinerExample> = triples
                .iter()
                .map(|(m, e, t)| RefinerExample {
                    mixture: m,
                    estimate: e,
                    target: t,
                })
                .collect();
            let mut rc = c.refiner.model.clone();
            rc.sample_rate = cb.features().sample_rate;
            rc.max_shift = cb.frame_hop();
            let mut model = Refiner::new(rc, c.seed)?;
            let mut adam = Adam::new(c.refiner.train.adam(), &model.store);
            let mut session = TrainSession {
                log: log_file(&log, false)?,
                checkpoint: Some(out.clone()),
                exec,
            };
            let curve = model.fit(&data, &c.refiner.train, &mut adam, &mut session)?;
            model.save(&out, None)?;
            let backbone = match model.config().backbone {
                Backbone::DualpathLike => "dual-path",
                Backbone::ConvTasnetLike => "convolutional",
            };
            println!(
                "{backbone} refiner: loss {:.2} → {:.2} dB; saved to {}",
                curve.first().copied().unwrap_or(0.0),
                curve.last().copied().unwrap_or(0.0),
                out.display()
            );
        }
        Command::Separate(args) => infer(&args, false, exec)?,
        Command::Enhance(args) => infer(&args, true, exec)?,
        Command::Evaluate {
            corpus,
            estimates,
            out,
            split,
            system,
        } => {
            let corpus = load_corpus(&corpus)?;
            let examples = match split.as_str() {
                "tr" => &corpus.train,
                "cv" => &corpus.valid,
                "tt" => &corpus.test,
                other => bail!("unknown split `{other}` (expected tr, cv or tt)"),
            };
            let reports = exec.try_map(examples, |ex| -> Result<_> {
                let ests = (1..=ex.targets.len())
                    .map(|k| {
                        let p = estimates.join(format!("{}_s{k}.wav", ex.id));
                        let w = load_wav(&p).with_context(|| format!("missing estimate `{}`", p.display()))?;
                        Ok(w.fit_to_len(ex.mixture.len())?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(evaluate_pairing(&ests, &ex.targets)?.with_labels(&ex.id, &system))
            })?;
            write_jsonl(BufWriter::new(File::create(&out)?), &reports)?;
            println!("scored {} utterances into {}", reports.len(), out.display());
        }
        Command::Report { out, plots, metrics } => {
            let mut reports = Vec::new();
            for m in &metrics {
                let file = File::open(m).with_context(|| format!("opening `{}`", m.display()))?;
                reports.extend(read_jsonl(BufReader::new(file))?);
            }
            let rows = report(&reports, &out, plots)?;
            print!("{}", render_table(&rows));
        }
        Command::Run {
            cfg,
            output_dir,
            oracle_only,
            plots,
        } => {
            let mut c = cfg.resolve(&[quoted("output_dir", &output_dir.map(|p| p.display().to_string()))])?;
            c.oracle_only |= oracle_only;
            c.plots |= plots;
            let outcome = run_experiment(&c, exec)?;
            if !outcome.reused.is_empty() {
                println!("reused stages: {}", outcome.reused.join(", "));
            }
            print!("{}", render_table(&outcome.table));
            println!("artifacts in {}", outcome.dir.display());
        }
    }
    Ok(())
}
