//! `cantus`: corpus generation, feature extraction, training, synthesis and evaluation.

mod config;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cantus_core::acoustic::AcousticModelConfig;
use cantus_core::checkpoint::Checkpoint;
use cantus_core::corpus::{generate_corpus, write_corpus, Manifest, SyntheticCorpusSpec};
use cantus_core::dsp::{AcousticFeatures, NormStats, Waveform};
use cantus_core::pipeline::{
    acoustic_examples, evaluate_waves, extract_all_with, load_corpus, read_feature_dir, vocoder_examples, write_feature_dir, CorpusItem,
    FeatureConfig, Synthesizer,
};
use cantus_core::score::{Lexicon, Score};
use cantus_core::trainer::{AcousticBundle, AcousticTrainSpec, AcousticTrainer, VocoderBundle, VocoderTrainSpec, VocoderTrainer};
use cantus_core::vocoder::VocoderConfig;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "cantus", version, about = "Two-stage singing voice synthesis on a synthetic corpus")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// RNG seed; overrides any seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML or JSON file layered over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic corpus: scores, WAVs, lexicon and manifest.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract log-mel, F0 and V/UV into a binary cache with a JSON statistics sidecar.
    ExtractFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to DATA/features.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the acoustic model; writes OUT/acoustic.ckpt and OUT/acoustic_metrics.jsonl.
    TrainAcoustic(TrainArgs),
    /// Train the vocoder; writes OUT/vocoder.ckpt and OUT/vocoder_metrics.jsonl.
    TrainVocoder(TrainArgs),
    /// Render a score file to a 48 kHz PCM16 WAV.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        acoustic: PathBuf,
        #[arg(long)]
        vocoder: PathBuf,
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Semitones added to every pitch; overrides the config file.
        #[arg(long, allow_hyphen_values = true)]
        transpose: Option<i32>,
    },
    /// Objective metrics against a corpus, as a JSON report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to DATA/features.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Directory of NAME.wav files to score instead of synthesizing.
        #[arg(long, conflicts_with_all = ["acoustic", "vocoder"])]
        wavs: Option<PathBuf>,
        #[arg(long, requires = "vocoder")]
        acoustic: Option<PathBuf>,
        #[arg(long, requires = "acoustic")]
        vocoder: Option<PathBuf>,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to DATA/features.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint already in OUT.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AcousticRunConfig {
    profile: String,
    model: AcousticModelConfig,
    train: AcousticTrainSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VocoderRunConfig {
    profile: String,
    model: VocoderConfig,
    train: VocoderTrainSpec,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
struct SynthConfig {
    transpose: i32,
}

/// Teacher-forced synthesis uses ground-truth durations so outputs align with references.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct EvalConfig {
    teacher_forced: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { teacher_forced: true }
    }
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenCorpus { common, out } => gen_corpus(&common, &out),
        Cmd::ExtractFeatures { common, data, out } => {
            let out = out.unwrap_or_else(|| data.join("features"));
            extract(&common, &data, &out)
        }
        Cmd::TrainAcoustic(a) => train_acoustic(&a),
        Cmd::TrainVocoder(a) => train_vocoder(&a),
        Cmd::Synthesize { common, acoustic, vocoder, score, out, transpose } => {
            synthesize(&common, &acoustic, &vocoder, &score, &out, transpose)
        }
        Cmd::Evaluate { common, data, features, wavs, acoustic, vocoder, out } => {
            let features = features.unwrap_or_else(|| data.join("features"));
            let models = acoustic.zip(vocoder);
            evaluate(&common, &data, &features, wavs.as_deref(), models, out.as_deref())
        }
    }
}

fn gen_corpus(c: &Common, out: &Path) -> Result<()> {
    let mut spec = config::layered(&SyntheticCorpusSpec::default(), c.config.as_deref())?;
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    let (lexicon, utts) = generate_corpus(&spec)?;
    let m = write_corpus(out, &spec, &lexicon, &utts)?;
    eprintln!("wrote {} utterances to {}", m.utterances.len(), out.display());
    Ok(())
}

/// Extraction is deterministic; `--seed` is accepted for a uniform interface.
fn extract(c: &Common, data: &Path, out: &Path) -> Result<()> {
    let cfg = config::layered(&FeatureConfig::default(), c.config.as_deref())?;
    let (_, _, items) = load_corpus(data)?;
    let feats = extract_all_with(&cfg, &items.iter().map(|i| &i.wave).collect::<Vec<_>>())?;
    write_feature_dir(out, &items, &feats)?;
    let frames: usize = feats.iter().map(|f| f.n_frames()).sum();
    eprintln!("extracted {frames} frames from {} utterances into {}", items.len(), out.display());
    Ok(())
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    Ok(BufWriter::new(f))
}

struct TrainingSet {
    manifest: Manifest,
    lexicon: Lexicon,
    items: Vec<CorpusItem>,
    feats: Vec<AcousticFeatures>,
    stats: NormStats,
}

fn training_set(a: &TrainArgs) -> Result<TrainingSet> {
    let (m, lex, items) = load_corpus(&a.data)?;
    let dir = a.features.clone().unwrap_or_else(|| a.data.join("features"));
    let (feats, stats) =
        read_feature_dir(&dir, &items).with_context(|| format!("reading features from {} (run extract-features first)", dir.display()))?;
    if let Some(f) = feats.iter().find(|f| (f.hop_s - m.hop_s).abs() > 1e-12) {
        bail!("feature hop {} s differs from corpus hop {} s", f.hop_s, m.hop_s);
    }
    Ok(TrainingSet { manifest: m, lexicon: lex, items, feats, stats })
}

fn train_acoustic(a: &TrainArgs) -> Result<()> {
    let TrainingSet { manifest: m, lexicon: lex, items, feats, stats } = training_set(a)?;
    let path = a.common.config.as_deref();
    let profile = config::profile(path)?;
    let defaults = AcousticRunConfig {
        model: match profile.as_str() {
            "full" => AcousticModelConfig::full(lex.vocab_size()),
            _ => AcousticModelConfig::tiny(lex.vocab_size()),
        },
        train: if profile == "full" { AcousticTrainSpec::full() } else { AcousticTrainSpec::tiny() },
        profile,
    };
    let cfg = config::layered(&defaults, path)?;
    let window_s = feats.first().map_or(0.02, |f| f.window_s);
    let data = acoustic_examples(&items, &feats, &lex, &stats, m.hop_s)?;
    std::fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("acoustic.ckpt");
    let mut tr = if a.resume {
        AcousticTrainer::from_checkpoint(&Checkpoint::read(&ckpt)?)?
    } else {
        let bundle = AcousticBundle { model: cfg.model, spec: cfg.train, stats, lexicon: lex, hop_s: m.hop_s, window_s };
        AcousticTrainer::new(bundle, a.common.seed.unwrap_or(0))?
    };
    let until = tr.bundle.spec.steps;
    let mut log = open_log(&a.out.join("acoustic_metrics.jsonl"), a.resume)?;
    let metrics = tr.train(&data, until, Some(&ckpt), Some(&mut log))?;
    log.flush()?;
    if let Some(last) = metrics.last() {
        eprintln!("acoustic: step {} loss {:.4}; checkpoint {}", last.step + 1, last.loss, ckpt.display());
    }
    Ok(())
}

fn train_vocoder(a: &TrainArgs) -> Result<()> {
    let TrainingSet { items, feats, stats, .. } = training_set(a)?;
    let path = a.common.config.as_deref();
    let profile = config::profile(path)?;
    let mut model = if profile == "full" { VocoderConfig::full() } else { VocoderConfig::tiny() };
    model.aux_dims = stats.mel_mean.len() + 2;
    let defaults =
        VocoderRunConfig { model, train: if profile == "full" { VocoderTrainSpec::full() } else { VocoderTrainSpec::tiny() }, profile };
    let cfg = config::layered(&defaults, path)?;
    let data = vocoder_examples(&items, &feats, &stats, cfg.model.hop_samples)?;
    std::fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("vocoder.ckpt");
    let mut tr = if a.resume {
        VocoderTrainer::from_checkpoint(&Checkpoint::read(&ckpt)?)?
    } else {
        let bundle = VocoderBundle { vocoder: cfg.model, spec: cfg.train, stats };
        VocoderTrainer::new(bundle, a.common.seed.unwrap_or(0))?
    };
    let until = tr.bundle.spec.steps;
    let mut log = open_log(&a.out.join("vocoder_metrics.jsonl"), a.resume)?;
    let metrics = tr.train(&data, until, Some(&ckpt), Some(&mut log))?;
    log.flush()?;
    if let Some(last) = metrics.last() {
        eprintln!("vocoder: step {} loss {:.4}; checkpoint {}", last.step + 1, last.loss, ckpt.display());
    }
    Ok(())
}

fn synthesize(c: &Common, acoustic: &Path, vocoder: &Path, score: &Path, out: &Path, transpose: Option<i32>) -> Result<()> {
    let cfg = config::layered(&SynthConfig::default(), c.config.as_deref())?;
    let synth = Synthesizer::load(acoustic, vocoder)?;
    let score = Score::load(score)?;
    let wave = synth.synthesize(&score, transpose.unwrap_or(cfg.transpose), c.seed.unwrap_or(0))?;
    wave.write_wav(out)?;
    eprintln!("wrote {:.3} s to {}", wave.duration_s(), out.display());
    Ok(())
}

fn evaluate(
    c: &Common,
    data: &Path,
    features: &Path,
    wavs: Option<&Path>,
    models: Option<(PathBuf, PathBuf)>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = config::layered(&EvalConfig::default(), c.config.as_deref())?;
    let (m, _, items) = load_corpus(data)?;
    let (refs, stats) = read_feature_dir(features, &items)?;
    let seed = c.seed.unwrap_or(0);
    let report = match (wavs, models) {
        (Some(dir), _) => {
            let waves = items
                .iter()
                .map(|it| Waveform::read_wav(&dir.join(format!("{}.wav", it.entry.name)), m.sample_rate))
                .collect::<cantus_core::Result<Vec<_>>>()?;
            evaluate_waves(&items, &waves, &refs, &stats)?
        }
        (None, Some((a, v))) => {
            let synth = Synthesizer::load(&a, &v)?;
            if cfg.teacher_forced {
                synth.evaluate(&items, &refs, seed)?
            } else {
                let waves = items
                    .iter()
                    .enumerate()
                    .map(|(i, it)| synth.synthesize(&it.score, 0, seed.wrapping_add(i as u64)))
                    .collect::<cantus_core::Result<Vec<_>>>()?;
                evaluate_waves(&items, &waves, &refs, &stats)?
            }
        }
        (None, None) => bail!("evaluate needs --wavs or both --acoustic and --vocoder"),
    };
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(p) => std::fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}
