//! `root/{tr,cv,tt}/{mix,s1,…,sK}/*.wav` layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Corpus, MixtureExample};
use crate::error::{Error, Result};
use crate::signal::{load_wav, save_wav, Waveform};

/// Split directory names for train, validation and test.
pub const SPLIT_DIRS: [&str; 3] = ["tr", "cv", "tt"];

const META_FILE: &str = "meta.json";

/// Per-example side information that WAV files cannot carry.
#[derive(Debug, Default, Serialize, Deserialize)]
struct ExampleMeta {
    speakers: Vec<usize>,
    gains: Vec<f64>,
    snr_db: Option<f64>,
}

fn stem_dirs(split_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut stems: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(split_dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(k) = name.strip_prefix('s').and_then(|k| k.parse::<usize>().ok()) {
            if path.is_dir() && k >= 1 {
                stems.push((k, path));
            }
        }
    }
    stems.sort();
    for (i, (k, _)) in stems.iter().enumerate() {
        if *k != i + 1 {
            return Err(Error::MissingStem(split_dir.join(format!("s{}", i + 1))));
        }
    }
    Ok(stems.into_iter().map(|(_, p)| p).collect())
}

fn load_split(split_dir: &Path) -> Result<Vec<MixtureExample>> {
    let mix_dir = split_dir.join("mix");
    if !mix_dir.is_dir() {
        return Err(Error::MissingStem(mix_dir));
    }
    let stems = stem_dirs(split_dir)?;
    if stems.is_empty() {
        return Err(Error::MissingStem(split_dir.join("s1")));
    }
    let meta: BTreeMap<String, ExampleMeta> = match fs::read(split_dir.join(META_FILE)) {
        Ok(bytes) => serde_json::from_slice(&bytes)?,
        Err(_) => BTreeMap::new(),
    };
    let mut names: Vec<PathBuf> = fs::read_dir(&mix_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    names.sort();

    let mut out = Vec::with_capacity(names.len());
    for mix_path in names {
        let file = mix_path.file_name().expect("listed file").to_owned();
        let mixture = load_wav(&mix_path)?;
        let rate = mixture.sample_rate();
        let mut targets = Vec::with_capacity(stems.len());
        for dir in &stems {
            let path = dir.join(&file);
            if !path.is_file() {
                return Err(Error::MissingStem(path));
            }
            let w = load_wav(&path)?;
            if w.sample_rate() != rate {
                return Err(Error::SampleRateMismatch {
                    path,
                    expected: rate,
                    found: w.sample_rate(),
                });
            }
            targets.push(w);
        }
        // max-length mode: zero-pad every stem to the longest one
        let len = targets.iter().map(Waveform::len).chain([mixture.len()]).max().unwrap_or(0);
        let mixture = mixture.fit_to_len(len)?;
        let targets = targets.iter().map(|t| t.fit_to_len(len)).collect::<Result<Vec<_>>>()?;
        let id = Path::new(&file).file_stem().and_then(|s| s.to_str()).unwrap_or("").to_string();
        let m = meta.get(&id);
        out.push(MixtureExample {
            speakers: m.map(|m| m.speakers.clone()).unwrap_or_default(),
            gains: m.map(|m| m.gains.clone()).unwrap_or_default(),
            snr_db: m.and_then(|m| m.snr_db),
            id,
            mixture,
            targets,
            noise: None,
        });
    }
    Ok(out)
}

/// Loads every split directory present under `root`.
pub fn ingest_corpus(root: impl AsRef<Path>) -> Result<Corpus> {
    let root = root.as_ref();
    let mut splits: Vec<Vec<MixtureExample>> = Vec::new();
    let mut found = false;
    for name in SPLIT_DIRS {
        let dir = root.join(name);
        if dir.is_dir() {
            found = true;
            splits.push(load_split(&dir)?);
        } else {
            splits.push(Vec::new());
        }
    }
    if !found {
        return Err(Error::EmptyCorpus);
    }
    let test = splits.pop().unwrap_or_default();
    let valid = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(Corpus { train, valid, test })
}

/// Writes a corpus in the ingestion layout plus a side-information file per
/// split.
pub fn write_corpus(root: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let root = root.as_ref();
    for (name, split) in SPLIT_DIRS.iter().zip([&corpus.train, &corpus.valid, &corpus.test]) {
        if split.is_empty() {
            continue;
        }
        let dir = root.join(name);
        let k = split[0].targets.len();
        fs::create_dir_all(dir.join("mix"))?;
        for s in 1..=k {
            fs::create_dir_all(dir.join(format!("s{s}")))?;
        }
        let mut meta = BTreeMap::new();
        for ex in split {
            let file = format!("{}.wav", ex.id);
            save_wav(&ex.mixture, dir.join("mix").join(&file))?;
            for (s, t) in ex.targets.iter().enumerate() {
                save_wav(t, dir.join(format!("s{}", s + 1)).join(&file))?;
            }
            meta.insert(
                ex.id.clone(),
                ExampleMeta {
                    speakers: ex.speakers.clone(),
                    gains: ex.gains.clone(),
                    snr_db: ex.snr_db,
                },
            );
        }
        fs::write(dir.join(META_FILE), serde_json::to_vec_pretty(&meta)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(len: usize, f: f64, sr: u32) -> Waveform {
        Waveform::new((0..len).map(|i| 0.3 * (f * i as f64 / sr as f64).sin()).collect(), sr).unwrap()
    }

    fn layout(root: &Path, names: &[&str], lens: [usize; 3]) {
        for d in ["mix", "s1", "s2"] {
            fs::create_dir_all(root.join("tt").join(d)).unwrap();
        }
        for n in names {
            for (d, len) in ["mix", "s1", "s2"].iter().zip(lens) {
                save_wav(&tone(len, 900.0, 8000), root.join("tt").join(d).join(format!("{n}.wav"))).unwrap();
            }
        }
    }

    #[test]
    fn well_formed_layout_loads_and_pads() {
        let tmp = tempfile::tempdir().unwrap();
        layout(tmp.path(), &["a", "b", "c"], [800, 800, 650]);
        let c = ingest_corpus(tmp.path()).unwrap();
        assert_eq!(c.test.len(), 3);
        assert!(c.train.is_empty());
        let ex = &c.test[0];
        assert_eq!(ex.id, "a");
        assert_eq!(ex.targets.len(), 2);
        assert!(ex.targets.iter().all(|t| t.len() == 800));
        assert_eq!(ex.targets[1].samples()[700], 0.0);
    }

    #[test]
    fn missing_stem_names_the_file() {
        let tmp = tempfile::tempdir().unwrap();
        layout(tmp.path(), &["a", "b"], [800, 800, 800]);
        let gone = tmp.path().join("tt/s2/b.wav");
        fs::remove_file(&gone).unwrap();
        match ingest_corpus(tmp.path()) {
            Err(Error::MissingStem(p)) => assert_eq!(p, gone),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sample_rate_mismatch_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        layout(tmp.path(), &["a"], [800, 800, 800]);
        save_wav(&tone(1600, 900.0, 16000), tmp.path().join("tt/s1/a.wav")).unwrap();
        assert!(matches!(
            ingest_corpus(tmp.path()),
            Err(Error::SampleRateMismatch { expected: 8000, found: 16000, .. })
        ));
    }
}
