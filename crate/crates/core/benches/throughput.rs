//! Feature extraction and one training step, run on a single-thread pool and
//! on the default pool. Build with `--no-default-features` to time the
//! sequential fallback instead.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use cantus_core::acoustic::AcousticModelConfig;
use cantus_core::corpus::{generate_corpus, SyntheticCorpusSpec, Utterance};
use cantus_core::dsp::NormStats;
use cantus_core::pipeline::extract_all;
use cantus_core::score::{encode_score, Lexicon};
use cantus_core::trainer::{AcousticBundle, AcousticExample, AcousticTrainSpec, AcousticTrainer};

fn corpus() -> (Lexicon, Vec<Utterance>) {
    generate_corpus(&SyntheticCorpusSpec { n_utterances: 8, seed: 3, ..Default::default() }).unwrap()
}

/// Where the timed routine runs: inside a rayon pool, or on the calling thread
/// when rayon is compiled out.
enum Runner {
    #[cfg(feature = "parallel")]
    Pool(rayon::ThreadPool),
    #[cfg(not(feature = "parallel"))]
    Inline,
}

impl Runner {
    fn run<R: Send>(&self, op: impl FnOnce() -> R + Send) -> R {
        match self {
            #[cfg(feature = "parallel")]
            Runner::Pool(p) => p.install(op),
            #[cfg(not(feature = "parallel"))]
            Runner::Inline => op(),
        }
    }
}

fn runners() -> Vec<(&'static str, Runner)> {
    #[cfg(feature = "parallel")]
    {
        let pool = |n| Runner::Pool(rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap());
        vec![("rayon-1", pool(1)), ("rayon-all", pool(0))]
    }
    #[cfg(not(feature = "parallel"))]
    {
        vec![("sequential", Runner::Inline)]
    }
}

fn variants(c: &mut Criterion, group: &str, mut f: impl FnMut(&mut criterion::Bencher, &Runner)) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    for (name, runner) in runners() {
        g.bench_function(name, |b| f(b, &runner));
    }
    g.finish();
}

fn bench_extract(c: &mut Criterion) {
    let (_, utts) = corpus();
    let waves: Vec<_> = utts.iter().map(|u| &u.wave).collect();
    variants(c, "extract_features", |b, r| b.iter(|| r.run(|| extract_all(&waves).unwrap())));
}

fn bench_acoustic_step(c: &mut Criterion) {
    let (lexicon, utts) = corpus();
    let feats = extract_all(&utts.iter().map(|u| &u.wave).collect::<Vec<_>>()).unwrap();
    let stats = NormStats::compute(feats.iter()).unwrap();
    let data: Vec<_> = utts
        .iter()
        .zip(&feats)
        .map(|(u, f)| {
            AcousticExample::new(&u.name, encode_score(&u.score, &lexicon, 0.005).unwrap(), u.durations.clone(), f, &stats).unwrap()
        })
        .collect();
    let bundle = AcousticBundle {
        model: AcousticModelConfig::tiny(lexicon.vocab_size()),
        spec: AcousticTrainSpec { adv_start_step: 0, ..AcousticTrainSpec::tiny() },
        stats,
        lexicon,
        hop_s: 0.005,
        window_s: 0.02,
    };
    variants(c, "acoustic_step", |b, r| {
        b.iter_batched(
            || AcousticTrainer::new(bundle.clone(), 1).unwrap(),
            |mut tr| r.run(|| tr.step(&data).unwrap()),
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, bench_extract, bench_acoustic_step);
criterion_main!(benches);
