//! Corpus loading, score-to-waveform synthesis and objective evaluation.

use std::path::Path;

use cantus_nn::par;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::AcousticModel;
use crate::checkpoint::Checkpoint;
use crate::corpus::{read_manifest, Manifest, ManifestEntry};
use crate::dsp::cache::{read_cache, read_stats, write_cache, write_stats, CacheRecord};
use crate::dsp::{extract_features, AcousticFeatures, MelConfig, MelExtractor, NormStats, Waveform, YinConfig, YinTracker};
use crate::error::{Error, Result};
use crate::score::{encode_score, hz_to_semitone, Lexicon, Score};
use crate::trainer::{AcousticBundle, AcousticExample, AcousticTrainer, VocoderBundle, VocoderExample, VocoderTrainer};
use crate::vocoder::{ConditioningFeatures, Vocoder};

/// One corpus entry with its decoded score and audio.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusItem {
    pub entry: ManifestEntry,
    pub score: Score,
    pub wave: Waveform,
}

pub fn load_corpus(dir: &Path) -> Result<(Manifest, Lexicon, Vec<CorpusItem>)> {
    let m = read_manifest(dir)?;
    let lex = Lexicon::load(&dir.join(&m.lexicon))?;
    let items = par::try_map_slice(&m.utterances, |e| -> Result<CorpusItem> {
        Ok(CorpusItem {
            entry: e.clone(),
            score: Score::load(&dir.join(&e.score))?,
            wave: Waveform::read_wav(&dir.join(&e.wav), m.sample_rate)?,
        })
    })?;
    Ok((m, lex, items))
}

/// Analysis settings for feature extraction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub mel: MelConfig,
    pub yin: YinConfig,
}

pub fn extract_all_with(cfg: &FeatureConfig, waves: &[&Waveform]) -> Result<Vec<AcousticFeatures>> {
    let mel = MelExtractor::new(cfg.mel)?;
    let yin = YinTracker::new(cfg.yin);
    par::try_map_slice(waves, |w| extract_features(w, &mel, &yin))
}

/// Log-mel, F0 and V/UV of every waveform with the default settings.
pub fn extract_all(waves: &[&Waveform]) -> Result<Vec<AcousticFeatures>> {
    extract_all_with(&FeatureConfig::default(), waves)
}

pub const FEATURES_FILE: &str = "features.bin";
pub const STATS_FILE: &str = "stats.json";

/// Writes the binary feature cache and its normalization sidecar into `dir`.
pub fn write_feature_dir(dir: &Path, items: &[CorpusItem], feats: &[AcousticFeatures]) -> Result<NormStats> {
    let stats = NormStats::compute(feats.iter())?;
    std::fs::create_dir_all(dir)?;
    let records: Vec<CacheRecord> =
        items.iter().zip(feats).map(|(it, f)| CacheRecord { name: it.entry.name.clone(), features: f.clone() }).collect();
    write_cache(&dir.join(FEATURES_FILE), &records)?;
    write_stats(&dir.join(STATS_FILE), &stats)?;
    Ok(stats)
}

/// Features for `items` in their order, plus the stored statistics.
pub fn read_feature_dir(dir: &Path, items: &[CorpusItem]) -> Result<(Vec<AcousticFeatures>, NormStats)> {
    let mut records = read_cache(&dir.join(FEATURES_FILE))?;
    let stats = read_stats(&dir.join(STATS_FILE))?;
    let feats = items
        .iter()
        .map(|it| {
            let name = &it.entry.name;
            records
                .iter()
                .position(|r| &r.name == name)
                .map(|i| records.swap_remove(i).features)
                .ok_or_else(|| Error::Data(format!("{name}: not in the feature cache")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((feats, stats))
}

pub fn acoustic_examples(
    items: &[CorpusItem],
    feats: &[AcousticFeatures],
    lexicon: &Lexicon,
    stats: &NormStats,
    hop_s: f64,
) -> Result<Vec<AcousticExample>> {
    if items.len() != feats.len() {
        return Err(Error::Data(format!("{} utterances but {} feature records", items.len(), feats.len())));
    }
    items
        .iter()
        .zip(feats)
        .map(|(it, f)| {
            let seq = encode_score(&it.score, lexicon, hop_s)?;
            AcousticExample::new(&it.entry.name, seq, it.entry.durations.clone(), f, stats)
        })
        .collect()
}

pub fn vocoder_examples(items: &[CorpusItem], feats: &[AcousticFeatures], stats: &NormStats, hop: usize) -> Result<Vec<VocoderExample>> {
    if items.len() != feats.len() {
        return Err(Error::Data(format!("{} utterances but {} feature records", items.len(), feats.len())));
    }
    items
        .iter()
        .zip(feats)
        .map(|(it, f)| {
            let cond = ConditioningFeatures::from_features(f, stats)?;
            VocoderExample::new(&it.entry.name, cond, it.wave.samples.clone(), hop)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceReport {
    pub name: String,
    /// Frames compared after truncating to the shorter sequence.
    pub frames: usize,
    /// Mean absolute difference of normalized log-mel.
    pub mel_l1: f64,
    /// Over frames voiced in both; 0 when there are none.
    pub f0_rmse_cents: f64,
    pub voiced_frames: usize,
    pub vuv_error_rate: f64,
    /// Frobenius-norm error of linear mel magnitudes relative to the reference.
    pub spectral_convergence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: Vec<UtteranceReport>,
    /// Frame-pooled mel L1, F0 RMSE and V/UV error; mean spectral convergence.
    pub aggregate: UtteranceReport,
}

/// Cents between two positive frequencies.
pub fn cents(a_hz: f64, b_hz: f64) -> f64 {
    1200.0 * (a_hz / b_hz).log2()
}

/// Compares `pred` against `reference`, truncating both to the shorter length.
pub fn compare_features(name: &str, pred: &AcousticFeatures, reference: &AcousticFeatures, stats: &NormStats) -> Result<UtteranceReport> {
    let t = pred.n_frames().min(reference.n_frames());
    if t == 0 {
        return Err(Error::Data(format!("{name}: no overlapping frames to compare")));
    }
    if pred.n_mels() != reference.n_mels() {
        return Err(Error::Data(format!("{name}: {} vs {} mel bins", pred.n_mels(), reference.n_mels())));
    }
    let (p, r) = (pred.truncated(t), reference.truncated(t));
    let (pn, rn) = (stats.normalize(&p)?, stats.normalize(&r)?);
    let mel_l1 = pn.mel.data().iter().zip(rn.mel.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pn.mel.len() as f64;
    let mut sq = 0.0;
    let mut voiced = 0;
    let mut vuv_err = 0;
    for i in 0..t {
        if p.vuv[i] != r.vuv[i] {
            vuv_err += 1;
        } else if p.vuv[i] == 1.0 {
            sq += cents(p.f0[i], r.f0[i]).powi(2);
            voiced += 1;
        }
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in p.mel.data().iter().zip(r.mel.data()) {
        let (ea, eb) = (a.exp(), b.exp());
        num += (ea - eb) * (ea - eb);
        den += eb * eb;
    }
    Ok(UtteranceReport {
        name: name.into(),
        frames: t,
        mel_l1,
        f0_rmse_cents: if voiced > 0 { (sq / voiced as f64).sqrt() } else { 0.0 },
        voiced_frames: voiced,
        vuv_error_rate: vuv_err as f64 / t as f64,
        spectral_convergence: (num / den).sqrt(),
    })
}

impl EvalReport {
    pub fn from_utterances(utterances: Vec<UtteranceReport>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::Data("nothing to evaluate".into()));
        }
        let frames: usize = utterances.iter().map(|u| u.frames).sum();
        let voiced: usize = utterances.iter().map(|u| u.voiced_frames).sum();
        let fw = |f: fn(&UtteranceReport) -> f64| utterances.iter().map(|u| f(u) * u.frames as f64).sum::<f64>() / frames as f64;
        let f0_sq: f64 = utterances.iter().map(|u| u.f0_rmse_cents.powi(2) * u.voiced_frames as f64).sum();
        let aggregate = UtteranceReport {
            name: "aggregate".into(),
            frames,
            mel_l1: fw(|u| u.mel_l1),
            f0_rmse_cents: if voiced > 0 { (f0_sq / voiced as f64).sqrt() } else { 0.0 },
            voiced_frames: voiced,
            vuv_error_rate: fw(|u| u.vuv_error_rate),
            spectral_convergence: utterances.iter().map(|u| u.spectral_convergence).sum::<f64>() / utterances.len() as f64,
        };
        Ok(Self { utterances, aggregate })
    }
}

/// Trained acoustic model plus vocoder, ready for inference.
pub struct Synthesizer {
    pub acoustic: AcousticModel,
    pub acoustic_bundle: AcousticBundle,
    pub vocoder: Vocoder,
    pub vocoder_bundle: VocoderBundle,
}

impl Synthesizer {
    /// Fails with a compatibility error when the vocoder cannot consume the acoustic model's output.
    pub fn new(acoustic: AcousticTrainer, vocoder: VocoderTrainer) -> Result<Self> {
        let (a, v) = (&acoustic.bundle, &vocoder.bundle);
        let n_mels = a.model.n_mels;
        if v.vocoder.aux_dims != n_mels + 2 || v.stats.mel_mean.len() != n_mels {
            return Err(Error::Compatibility(format!(
                "acoustic model emits {n_mels} mel bins, vocoder expects {}",
                v.vocoder.aux_dims.saturating_sub(2)
            )));
        }
        let hop = a.hop_s * v.vocoder.sample_rate as f64;
        if (hop - v.vocoder.hop_samples as f64).abs() > 1e-9 {
            return Err(Error::Compatibility(format!(
                "acoustic hop {} s is {hop} samples, vocoder hop is {}",
                a.hop_s, v.vocoder.hop_samples
            )));
        }
        Ok(Self { acoustic: acoustic.model, acoustic_bundle: acoustic.bundle, vocoder: vocoder.vocoder, vocoder_bundle: vocoder.bundle })
    }

    pub fn load(acoustic: &Path, vocoder: &Path) -> Result<Self> {
        let a = AcousticTrainer::from_checkpoint(&Checkpoint::read(acoustic)?)?;
        let v = VocoderTrainer::from_checkpoint(&Checkpoint::read(vocoder)?)?;
        Self::new(a, v)
    }

    /// Denormalized features of `score` shifted by `transpose` semitones;
    /// phoneme durations are predicted unless given.
    pub fn features(&self, score: &Score, transpose: i32, durations: Option<&[usize]>) -> Result<AcousticFeatures> {
        let b = &self.acoustic_bundle;
        let score = score.transposed(transpose)?;
        let seq = encode_score(&score, &b.lexicon, b.hop_s)?;
        let out = self.acoustic.infer(&seq, durations)?;
        out.to_features(&b.stats, b.hop_s, b.window_s)
    }

    pub fn vocode(&self, feat: &AcousticFeatures, seed: u64) -> Result<Waveform> {
        let cond = ConditioningFeatures::from_features(feat, &self.vocoder_bundle.stats)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.vocoder.generate(&cond, &mut rng)
    }

    pub fn synthesize(&self, score: &Score, transpose: i32, seed: u64) -> Result<Waveform> {
        self.vocode(&self.features(score, transpose, None)?, seed)
    }

    /// Synthesizes every item with its ground-truth durations and compares
    /// features re-extracted from the output against `references`.
    pub fn evaluate(&self, items: &[CorpusItem], references: &[AcousticFeatures], seed: u64) -> Result<EvalReport> {
        if items.len() != references.len() {
            return Err(Error::Data(format!("{} utterances but {} references", items.len(), references.len())));
        }
        let waves = items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                let f = self.features(&it.score, 0, Some(&it.entry.durations))?;
                self.vocode(&f, seed.wrapping_add(i as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        evaluate_waves(items, &waves, references, &self.acoustic_bundle.stats)
    }
}

/// Compares features extracted from `waves` against `references`, item by item.
pub fn evaluate_waves(items: &[CorpusItem], waves: &[Waveform], references: &[AcousticFeatures], stats: &NormStats) -> Result<EvalReport> {
    if waves.len() != items.len() || references.len() != items.len() {
        return Err(Error::Data(format!("{} utterances, {} waveforms, {} references", items.len(), waves.len(), references.len())));
    }
    let got = extract_all(&waves.iter().collect::<Vec<_>>())?;
    let reports = items
        .iter()
        .zip(got.iter().zip(references))
        .map(|(it, (g, r))| compare_features(&it.entry.name, g, r, stats))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_utterances(reports)
}

/// Median F0 in semitones over voiced frames; `None` when nothing is voiced.
pub fn median_semitone(feat: &AcousticFeatures) -> Option<f64> {
    let mut v: Vec<f64> = feat.f0.iter().zip(&feat.vuv).filter(|(_, &u)| u == 1.0).map(|(&f, _)| hz_to_semitone(f)).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
