//! Synthetic singing corpus with exactly known phoneme durations.
//!
//! Vowels are harmonic tones with per-vowel formant envelopes and vibrato;
//! consonants are unvoiced filtered noise; rests are near-silence. A seed
//! fixes every score, waveform and duration bit-exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blocks::rng_stream;
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::score::{midi_to_name, quantize_duration, semitone_to_hz, Lexicon, Note, NoteValue, Score, SILENCE_PHONEME};

const PURPOSE_CORPUS: u8 = 0xC0;

/// Vowel formants `(F1, F2, F3)` in Hz.
const VOWELS: [(&str, [f64; 3]); 5] = [
    ("a", [800.0, 1200.0, 2500.0]),
    ("e", [450.0, 2000.0, 2600.0]),
    ("i", [300.0, 2300.0, 3000.0]),
    ("o", [500.0, 900.0, 2400.0]),
    ("u", [350.0, 800.0, 2300.0]),
];

/// Unvoiced consonants: `(symbol, gain, one-pole coefficient)`; a positive
/// coefficient low-passes, a negative one high-passes.
const CONSONANTS: [(&str, f64, f64); 5] = [("s", 0.08, -0.6), ("f", 0.04, -0.3), ("h", 0.05, 0.5), ("k", 0.07, 0.2), ("t", 0.07, -0.1)];

const FORMANT_GAINS: [f64; 3] = [1.0, 0.5, 0.25];
const FORMANT_BW: [f64; 3] = [120.0, 180.0, 250.0];
/// Highest harmonic frequency rendered.
const HARMONIC_CEILING_HZ: f64 = 8000.0;
const FADE_S: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusSpec {
    pub n_utterances: usize,
    pub tempo_range: (f64, f64),
    /// Inclusive MIDI range.
    pub pitch_range: (u8, u8),
    pub notes_per_utterance: (usize, usize),
    /// Inclusive; 1 is a bare vowel, 2 adds a leading consonant.
    pub phonemes_per_note: (usize, usize),
    pub note_values: Vec<NoteValue>,
    pub rest_probability: f64,
    pub n_harmonics: usize,
    pub vibrato_depth_cents: f64,
    pub vibrato_rate_hz: f64,
    pub peak_amplitude: f64,
    pub noise_floor: f64,
    pub sample_rate: u32,
    pub hop_s: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            n_utterances: 16,
            tempo_range: (140.0, 180.0),
            pitch_range: (57, 74),
            notes_per_utterance: (3, 5),
            phonemes_per_note: (1, 2),
            note_values: ["1/8", "1/4", "3/8"].iter().map(|v| v.parse().expect("static")).collect(),
            rest_probability: 0.15,
            n_harmonics: 24,
            vibrato_depth_cents: 25.0,
            vibrato_rate_hz: 5.5,
            peak_amplitude: 0.4,
            noise_floor: 1e-5,
            sample_rate: 48_000,
            hop_s: 0.005,
            seed: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("corpus spec: {m}")));
        if self.n_utterances == 0 {
            return bad("n_utterances must be positive");
        }
        if !(self.tempo_range.0 > 0.0 && self.tempo_range.0 <= self.tempo_range.1) {
            return bad("tempo range empty or non-positive");
        }
        if self.pitch_range.0 > self.pitch_range.1 || self.pitch_range.1 > 127 {
            return bad("pitch range empty or outside MIDI");
        }
        let (a, b) = self.notes_per_utterance;
        if a == 0 || a > b {
            return bad("notes per utterance range empty");
        }
        let (a, b) = self.phonemes_per_note;
        if a == 0 || a > b || b > 2 {
            return bad("phonemes per note must lie in 1..=2");
        }
        if self.note_values.is_empty() {
            return bad("no note values");
        }
        if !(0.0..1.0).contains(&self.rest_probability) {
            return bad("rest probability must be in [0, 1)");
        }
        if self.n_harmonics == 0 || !(self.peak_amplitude > 0.0 && self.peak_amplitude < 1.0) {
            return bad("need harmonics and a peak amplitude in (0, 1)");
        }
        if self.noise_floor < 0.0 || self.vibrato_depth_cents < 0.0 || self.vibrato_rate_hz < 0.0 {
            return bad("noise floor and vibrato must be non-negative");
        }
        Ok(())
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_s * self.sample_rate as f64).round() as usize
    }
}

/// Lexicon covering every generated syllable: vowels alone and consonant-vowel pairs.
pub fn synthetic_lexicon() -> Lexicon {
    let mut phonemes = vec![SILENCE_PHONEME.to_string()];
    phonemes.extend(VOWELS.iter().map(|(v, _)| v.to_string()));
    phonemes.extend(CONSONANTS.iter().map(|(c, ..)| c.to_string()));
    let mut syllables = BTreeMap::new();
    for (v, _) in VOWELS {
        syllables.insert(v.to_string(), vec![v.to_string()]);
        for (c, ..) in CONSONANTS {
            syllables.insert(format!("{c}{v}"), vec![c.to_string(), v.to_string()]);
        }
    }
    Lexicon { phonemes, syllables }
}

/// Frames given to the consonant of a consonant-vowel note.
pub fn consonant_frames(note_frames: usize) -> usize {
    (note_frames / 4).clamp(1, 10).min(note_frames.saturating_sub(1)).max(1)
}

/// Per-phoneme ground-truth frame counts of `score`.
pub fn phoneme_durations(score: &Score, lexicon: &Lexicon, hop_s: f64) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for note in &score.notes {
        let frames = quantize_duration(note.value, score.tempo, score.time_signature.1, hop_s)?;
        match lexicon.resolve(note)?.len() {
            1 => out.push(frames),
            2 if frames >= 2 => {
                let c = consonant_frames(frames);
                out.extend([c, frames - c]);
            }
            n => {
                return Err(Error::Score(format!(
                    "note {:?} has {n} phonemes in {frames} frames; synthesis supports one vowel with an optional leading consonant",
                    note.syllable
                )))
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub name: String,
    pub score: Score,
    pub durations: Vec<usize>,
    pub wave: Waveform,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.durations.iter().sum()
    }
}

fn random_score<R: Rng + ?Sized>(spec: &SyntheticCorpusSpec, rng: &mut R) -> Score {
    let tempo = rng.random_range(spec.tempo_range.0..=spec.tempo_range.1).round();
    let n = rng.random_range(spec.notes_per_utterance.0..=spec.notes_per_utterance.1);
    let notes = (0..n)
        .map(|i| {
            let value = *spec.note_values.choose(rng).expect("validated");
            // Never open or close on a rest, so every utterance has voiced content.
            if i > 0 && i + 1 < n && rng.random::<f64>() < spec.rest_probability {
                return Note { syllable: "-".into(), phonemes: vec![], note_name: "rest".into(), value };
            }
            let (v, _) = *VOWELS.choose(rng).expect("static");
            let k = rng.random_range(spec.phonemes_per_note.0..=spec.phonemes_per_note.1);
            let syllable = if k == 2 { format!("{}{v}", CONSONANTS.choose(rng).expect("static").0) } else { v.to_string() };
            Note { syllable, phonemes: vec![], note_name: midi_to_name(rng.random_range(spec.pitch_range.0..=spec.pitch_range.1)), value }
        })
        .collect();
    Score { tempo, time_signature: (4, 4), notes }
}

fn formant_amplitude(formants: &[f64; 3], hz: f64) -> f64 {
    formants.iter().zip(FORMANT_GAINS.iter().zip(FORMANT_BW)).map(|(&f, (&g, bw))| g / (1.0 + ((hz - f) / bw).powi(2))).sum()
}

enum Segment {
    Vowel { formants: [f64; 3], midi: f64 },
    Consonant { gain: f64, coef: f64 },
    Silence,
}

/// Renders `score` with the given per-phoneme frame counts.
pub fn render(score: &Score, lexicon: &Lexicon, durations: &[usize], spec: &SyntheticCorpusSpec, seed: u64) -> Result<Waveform> {
    let hop = spec.hop_samples();
    let sr = spec.sample_rate as f64;
    let mut rng = rng_stream(seed, 0, PURPOSE_CORPUS, u32::MAX);
    let mut segs: Vec<(Segment, usize, f64)> = Vec::new();
    let mut di = 0;
    for note in &score.notes {
        let ids = lexicon.resolve(note)?;
        let note_start = durations[..di].iter().sum::<usize>() * hop;
        for id in ids {
            let sym = lexicon.phonemes[id].as_str();
            let len = *durations.get(di).ok_or_else(|| Error::Contract("fewer durations than phonemes".into()))? * hop;
            di += 1;
            let seg = if let Some((_, f)) = VOWELS.iter().find(|(v, _)| *v == sym) {
                Segment::Vowel { formants: *f, midi: note.pitch_id()? as f64 }
            } else if let Some(&(_, gain, coef)) = CONSONANTS.iter().find(|(c, ..)| *c == sym) {
                Segment::Consonant { gain, coef }
            } else {
                Segment::Silence
            };
            segs.push((seg, len, (note_start as f64) / sr));
        }
    }
    if di != durations.len() {
        return Err(Error::Contract(format!("{} durations for {di} phonemes", durations.len())));
    }
    let total: usize = segs.iter().map(|s| s.1).sum();
    let mut out = Vec::with_capacity(total);
    let mut phase = 0.0f64;
    let fade = (FADE_S * sr) as usize;
    let vib = spec.vibrato_depth_cents / 1200.0;
    for (seg, len, note_t0) in &segs {
        let start = out.len();
        match seg {
            Segment::Vowel { formants, midi } => {
                let base = semitone_to_hz(*midi);
                let n_h = ((HARMONIC_CEILING_HZ / (base * 1.1)) as usize).clamp(1, spec.n_harmonics);
                let amps: Vec<f64> = (1..=n_h).map(|k| formant_amplitude(formants, k as f64 * base) / (k as f64).sqrt()).collect();
                let norm = spec.peak_amplitude / amps.iter().sum::<f64>();
                for i in 0..*len {
                    let t = (start + i) as f64 / sr - note_t0;
                    let f0 = base * (vib * (std::f64::consts::TAU * spec.vibrato_rate_hz * t).sin()).exp2();
                    phase = (phase + std::f64::consts::TAU * f0 / sr) % std::f64::consts::TAU;
                    let s: f64 = amps.iter().enumerate().map(|(k, a)| a * ((k + 1) as f64 * phase).sin()).sum();
                    out.push(s * norm);
                }
            }
            Segment::Consonant { gain, coef } => {
                let mut prev = 0.0;
                for _ in 0..*len {
                    let x: f64 = rng.sample(StandardNormal);
                    prev = x + coef * prev;
                    out.push(gain * prev * (1.0 - coef.abs()));
                }
            }
            Segment::Silence => out.extend(std::iter::repeat_n(0.0, *len)),
        }
        // Raised-cosine edges avoid clicks at segment boundaries.
        let n = (*len).min(2 * fade) / 2;
        for i in 0..n {
            let g = 0.5 - 0.5 * (std::f64::consts::PI * i as f64 / n as f64).cos();
            out[start + i] *= g;
            out[start + len - 1 - i] *= g;
        }
    }
    for x in &mut out {
        let n: f64 = rng.sample(StandardNormal);
        *x += spec.noise_floor * n;
    }
    Waveform::new(out, spec.sample_rate)
}

/// Scores, durations and waveforms of a whole corpus.
pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<(Lexicon, Vec<Utterance>)> {
    spec.validate()?;
    let lexicon = synthetic_lexicon();
    let utts = (0..spec.n_utterances)
        .map(|i| {
            let mut rng = rng_stream(spec.seed, 0, PURPOSE_CORPUS, i as u32);
            let score = random_score(spec, &mut rng);
            let durations = phoneme_durations(&score, &lexicon, spec.hop_s)?;
            let wave = render(&score, &lexicon, &durations, spec, spec.seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9))?;
            Ok(Utterance { name: format!("utt{i:04}"), score, durations, wave })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((lexicon, utts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// Paths relative to the corpus directory.
    pub score: PathBuf,
    pub wav: PathBuf,
    /// Ground-truth frames per phoneme.
    pub durations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub sample_rate: u32,
    pub hop_s: f64,
    pub lexicon: PathBuf,
    pub utterances: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `lexicon.json`, `scores/`, `wav/` and `manifest.json` under `dir`.
pub fn write_corpus(dir: &Path, spec: &SyntheticCorpusSpec, lexicon: &Lexicon, utts: &[Utterance]) -> Result<Manifest> {
    std::fs::create_dir_all(dir.join("scores"))?;
    std::fs::create_dir_all(dir.join("wav"))?;
    std::fs::write(dir.join("lexicon.json"), serde_json::to_string_pretty(lexicon)?)?;
    let mut entries = Vec::new();
    for u in utts {
        let score = PathBuf::from("scores").join(format!("{}.json", u.name));
        let wav = PathBuf::from("wav").join(format!("{}.wav", u.name));
        std::fs::write(dir.join(&score), u.score.to_json()?)?;
        u.wave.write_wav(&dir.join(&wav))?;
        entries.push(ManifestEntry { name: u.name.clone(), score, wav, durations: u.durations.clone() });
    }
    let m = Manifest { sample_rate: spec.sample_rate, hop_s: spec.hop_s, lexicon: "lexicon.json".into(), utterances: entries };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)?)?;
    Ok(m)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{extract_f0, FrameConfig};
    use crate::score::{encode_score, hz_to_semitone};

    fn small() -> SyntheticCorpusSpec {
        SyntheticCorpusSpec { n_utterances: 3, seed: 5, ..Default::default() }
    }

    #[test]
    fn durations_sum_to_frames_and_samples() {
        let spec = small();
        let (lex, utts) = generate_corpus(&spec).unwrap();
        for u in &utts {
            let seq = encode_score(&u.score, &lex, spec.hop_s).unwrap();
            assert_eq!(seq.len(), u.durations.len());
            assert_eq!(u.wave.len(), u.n_frames() * 240);
            assert!(u.wave.peak() < 1.0);
            assert!(u.durations.iter().all(|&d| d >= 1));
        }
    }

    #[test]
    fn seed_fixes_corpus() {
        let a = generate_corpus(&small()).unwrap().1;
        let b = generate_corpus(&small()).unwrap().1;
        assert_eq!(a, b);
        let c = generate_corpus(&SyntheticCorpusSpec { seed: 6, ..small() }).unwrap().1;
        assert_ne!(a[0].wave, c[0].wave);
    }

    #[test]
    fn vowel_pitch_is_recoverable() {
        let lex = synthetic_lexicon();
        let score = Score {
            tempo: 120.0,
            time_signature: (4, 4),
            notes: vec![Note { syllable: "a".into(), phonemes: vec![], note_name: "A4".into(), value: "1/4".parse().unwrap() }],
        };
        let spec = SyntheticCorpusSpec { vibrato_depth_cents: 0.0, ..Default::default() };
        let d = phoneme_durations(&score, &lex, 0.005).unwrap();
        assert_eq!(d, vec![100]);
        let w = render(&score, &lex, &d, &spec, 1).unwrap();
        let f0 = extract_f0(&w, &FrameConfig::default()).unwrap();
        for &f in &f0[5..95] {
            assert!((hz_to_semitone(f) - 69.0).abs() < 0.05, "{f}");
        }
    }

    #[test]
    fn consonant_split() {
        assert_eq!(consonant_frames(40), 10);
        assert_eq!(consonant_frames(20), 5);
        assert_eq!(consonant_frames(2), 1);
        let lex = synthetic_lexicon();
        assert_eq!(lex.syllables["sa"], vec!["s", "a"]);
        assert_eq!(lex.phonemes[0], SILENCE_PHONEME);
    }

    #[test]
    fn write_and_read_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticCorpusSpec { n_utterances: 2, ..small() };
        let (lex, utts) = generate_corpus(&spec).unwrap();
        let m = write_corpus(dir.path(), &spec, &lex, &utts).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
        let w = Waveform::read_wav(&dir.path().join(&m.utterances[1].wav), 48000).unwrap();
        assert_eq!(w.len(), utts[1].wave.len());
        let s = Score::load(&dir.path().join(&m.utterances[0].score)).unwrap();
        assert_eq!(s, utts[0].score);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(SyntheticCorpusSpec { n_utterances: 0, ..small() }.validate().is_err());
        assert!(SyntheticCorpusSpec { pitch_range: (80, 60), ..small() }.validate().is_err());
        assert!(SyntheticCorpusSpec { phonemes_per_note: (1, 3), ..small() }.validate().is_err());
    }
}
