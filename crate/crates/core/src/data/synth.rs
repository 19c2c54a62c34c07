use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, Corpus, MixtureExample, Task};
use crate::error::{Error, Result};
use crate::parallel::Execution;
use crate::signal::Waveform;

/// Shared vowel inventory: first two formant frequencies in Hz.
pub const VOWELS: [(f64, f64); 6] = [
    (730.0, 1090.0),
    (270.0, 2290.0),
    (300.0, 870.0),
    (530.0, 1840.0),
    (570.0, 840.0),
    (660.0, 1720.0),
];

/// Samples per synthesis grid cell; syllable and pause boundaries fall on it.
pub const GRID: usize = 160;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub task: Task,
    pub sample_rate: u32,
    pub duration_secs: f64,
    pub num_speakers: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Mixing level of stream 1 over stream 2 (or speech over noise), drawn
    /// uniformly from this range.
    pub snr_db: (f64, f64),
    /// 0 gives every speaker a disjoint half-octave pitch band; 1 puts all
    /// speakers in the same band.
    pub pitch_overlap: f64,
    /// Pitches per speaker.
    pub pitches_per_speaker: usize,
    /// Syllable length range in grid cells.
    pub syllable_cells: (usize, usize),
    pub pause_cells: (usize, usize),
    pub pause_prob: f64,
    /// RMS of a steady syllable in the unscaled source.
    pub level: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            task: Task::Separation,
            sample_rate: 8000,
            duration_secs: 2.0,
            num_speakers: 4,
            train: 500,
            valid: 20,
            test: 50,
            snr_db: (-2.5, 2.5),
            pitch_overlap: 0.0,
            pitches_per_speaker: 3,
            syllable_cells: (4, 10),
            pause_cells: (2, 6),
            pause_prob: 0.35,
            level: 0.1,
        }
    }
}

/// A synthetic talker: a pitch set and a spectral tilt.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerModel {
    pub pitches: Vec<f64>,
    /// dB per octave above 100 Hz.
    pub tilt_db_per_octave: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.train + self.valid + self.test == 0 {
            return bad("synthetic corpus has 0 utterances");
        }
        if self.task == Task::Separation && self.num_speakers < 2 {
            return bad("separation needs at least 2 speakers");
        }
        if self.num_speakers == 0 || self.pitches_per_speaker == 0 {
            return bad("need at least one speaker and one pitch");
        }
        if self.samples() < GRID {
            return bad("utterances shorter than one grid cell");
        }
        if self.syllable_cells.0 < 2 || self.syllable_cells.0 > self.syllable_cells.1 {
            return bad("syllable length range must be ordered and at least 2 cells");
        }
        if self.pause_cells.0 == 0 || self.pause_cells.0 > self.pause_cells.1 {
            return bad("pause length range must be ordered and positive");
        }
        if self.snr_db.0 > self.snr_db.1 {
            return bad("snr range must be ordered");
        }
        Ok(())
    }

    pub fn samples(&self) -> usize {
        (self.duration_secs * self.sample_rate as f64).round() as usize
    }

    pub fn speaker(&self, s: usize) -> SpeakerModel {
        let spread = 0.5 * (1.0 - self.pitch_overlap.clamp(0.0, 1.0));
        let base = 90.0 * 2f64.powf(s as f64 * spread);
        // pitches span a third of an octave above the base
        let step = 1.0 / (3.0 * (self.pitches_per_speaker.max(2) - 1) as f64);
        SpeakerModel {
            pitches: (0..self.pitches_per_speaker)
                .map(|i| base * 2f64.powf(i as f64 * step))
                .collect(),
            tilt_db_per_octave: -3.0 - 3.0 * (s % 4) as f64,
        }
    }
}

fn formant_gain(f: f64, (f1, f2): (f64, f64)) -> f64 {
    let peak = |fc: f64, bw: f64| 1.0 / (1.0 + ((f - fc) / bw).powi(2));
    peak(f1, 90.0) + 0.6 * peak(f2, 130.0) + 0.02
}

/// One speaker's utterance: syllables of stationary harmonic vowels with
/// raised-cosine ramps, separated by pauses, all on the grid.
pub fn synth_utterance(spec: &SynthSpec, speaker: &SpeakerModel, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let len = spec.samples();
    let sr = spec.sample_rate as f64;
    let cells = len.div_ceil(GRID);
    let mut out = vec![0.0; cells * GRID];
    let ramp = GRID / 2;
    let mut cell = rng.gen_range(0..=spec.pause_cells.1);
    while cell < cells {
        let dur = rng.gen_range(spec.syllable_cells.0..=spec.syllable_cells.1);
        let f0 = speaker.pitches[rng.gen_range(0..speaker.pitches.len())];
        let vowel = VOWELS[rng.gen_range(0..VOWELS.len())];
        let harmonics: Vec<(f64, f64, f64)> = (1..)
            .map(|h| h as f64 * f0)
            .take_while(|&f| f < 0.475 * sr)
            .map(|f| {
                let tilt = 10f64.powf(speaker.tilt_db_per_octave * (f / 100.0).log2().max(0.0) / 20.0);
                (f, tilt * formant_gain(f, vowel), rng.gen_range(0.0..2.0 * PI))
            })
            .collect();
        let rms = (harmonics.iter().map(|h| h.1 * h.1).sum::<f64>() / 2.0).sqrt();
        let start = cell * GRID;
        let n = (dur * GRID).min(out.len() - start);
        for i in 0..n {
            let t = i as f64 / sr;
            let env = if i < ramp {
                0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
            } else if dur * GRID - i <= ramp {
                0.5 - 0.5 * (PI * (dur * GRID - i) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let v: f64 = harmonics
                .iter()
                .map(|&(f, a, phi)| a * (2.0 * PI * f * t + phi).sin())
                .sum();
            out[start + i] = spec.level * env * v / rms;
        }
        cell += dur;
        if rng.gen_bool(spec.pause_prob) {
            cell += rng.gen_range(spec.pause_cells.0..=spec.pause_cells.1);
        }
    }
    out.truncate(len);
    out
}

/// Band-limited noise: white Gaussian noise through a random two-pole
/// resonator, scaled to `level` RMS.
fn synth_noise(len: usize, sr: f64, level: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fc: f64 = rng.gen_range(200.0..0.4 * sr);
    let r: f64 = rng.gen_range(0.5..0.95);
    let (a1, a2) = (2.0 * r * (2.0 * PI * fc / sr).cos(), -r * r);
    let (mut y1, mut y2) = (0.0, 0.0);
    let mut out: Vec<f64> = (0..len)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            let y = x + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            y
        })
        .collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    out.iter_mut().for_each(|v| *v *= level / rms.max(f64::MIN_POSITIVE));
    out
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE)
}

fn synth_example(spec: &SynthSpec, split: &str, index: usize, seed: u64) -> Result<MixtureExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = spec.sample_rate;
    let snr: f64 = if spec.snr_db.0 == spec.snr_db.1 {
        spec.snr_db.0
    } else {
        rng.gen_range(spec.snr_db.0..=spec.snr_db.1)
    };
    let (targets, speakers, noise, gains) = match spec.task {
        Task::Separation => {
            let a = rng.gen_range(0..spec.num_speakers);
            let mut b = rng.gen_range(0..spec.num_speakers - 1);
            if b >= a {
                b += 1;
            }
            let s1 = synth_utterance(spec, &spec.speaker(a), &mut rng);
            let s2 = synth_utterance(spec, &spec.speaker(b), &mut rng);
            let (e1, e2) = (energy(&s1), energy(&s2));
            // g1²·e1 / (g2²·e2) = 10^(snr/10) with g1·g2 = 1
            let g = (10f64.powf(snr / 10.0) * e2 / e1).powf(0.25);
            (
                vec![Waveform::new(s1, sr)?, Waveform::new(s2, sr)?],
                vec![a, b],
                None,
                vec![g, 1.0 / g],
            )
        }
        Task::Enhancement => {
            let a = rng.gen_range(0..spec.num_speakers);
            let s = synth_utterance(spec, &spec.speaker(a), &mut rng);
            let n = synth_noise(s.len(), sr as f64, spec.level, &mut rng);
            let gn = (energy(&s) / (energy(&n) * 10f64.powf(snr / 10.0))).sqrt();
            (
                vec![Waveform::new(s, sr)?],
                vec![a],
                Some(Waveform::new(n, sr)?),
                vec![1.0, gn],
            )
        }
    };
    let mut mix = vec![0.0; spec.samples()];
    for (t, g) in targets.iter().chain(noise.iter()).zip(&gains) {
        for (m, v) in mix.iter_mut().zip(t.samples()) {
            *m += g * v;
        }
    }
    Ok(MixtureExample {
        id: format!("{split}_{index:05}"),
        mixture: Waveform::new(mix, sr)?,
        targets,
        speakers,
        gains,
        snr_db: Some(snr),
        noise,
    })
}

/// Deterministic train/valid/test corpus; each split and each example draws
/// from its own seed stream.
pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<Corpus> {
    synth_corpus_with(spec, seed, Execution::default())
}

pub fn synth_corpus_with(spec: &SynthSpec, seed: u64, exec: Execution) -> Result<Corpus> {
    spec.validate()?;
    let split = |name: &str, count: usize| -> Result<Vec<MixtureExample>> {
        let split_seed = derive_seed(seed, name);
        exec.map_range(count, |i| synth_example(spec, name, i, derive_seed(split_seed, &i.to_string())))
            .into_iter()
            .collect()
    };
    Ok(Corpus {
        train: split("tr", spec.train)?,
        valid: split("cv", spec.valid)?,
        test: split("tt", spec.test)?,
    })
}
