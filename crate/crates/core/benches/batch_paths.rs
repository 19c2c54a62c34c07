//! Sequential vs data-parallel execution of the main batch paths.
//!
//! Build with `--no-default-features` to compile out rayon entirely; both
//! variants then run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use unitsep_core::data::{synth_corpus_with, SynthSpec};
use unitsep_core::discretizer::{discretize_batch, train_codebook_with};
use unitsep_core::metrics::evaluate_pairing;
use unitsep_core::signal::{FeatureExtractor, LogMelConfig, LogMelExtractor, Waveform};
use unitsep_core::Execution;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn spec() -> SynthSpec {
    SynthSpec {
        train: 32,
        valid: 0,
        test: 0,
        ..SynthSpec::default()
    }
}

fn bench(c: &mut Criterion) {
    let corpus = synth_corpus_with(&spec(), 0, Execution::Sequential).unwrap();
    let stems: Vec<Waveform> = corpus.train.iter().flat_map(|e| e.targets.clone()).collect();
    let extractor = LogMelExtractor::new(LogMelConfig::for_rate(8000)).unwrap();
    let feats: Vec<_> = stems.iter().map(|w| extractor.extract(w).unwrap()).collect();
    let (cb, _) = train_codebook_with(&feats, 64, 5, 0, Execution::Sequential).unwrap();

    let mut group = c.benchmark_group("batch_paths");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::new("synthesize_corpus", name), |b| {
            b.iter(|| synth_corpus_with(&spec(), 0, exec).unwrap())
        });
        group.bench_function(BenchmarkId::new("kmeans", name), |b| {
            b.iter(|| train_codebook_with(&feats, 64, 5, 0, exec).unwrap())
        });
        group.bench_function(BenchmarkId::new("discretize", name), |b| {
            b.iter(|| discretize_batch(&stems, &extractor, &cb, exec).unwrap())
        });
        group.bench_function(BenchmarkId::new("evaluate", name), |b| {
            b.iter(|| exec.try_map(&corpus.train, |ex| evaluate_pairing(&ex.targets, &ex.targets)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
