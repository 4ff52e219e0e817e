//! Music score parsing and encoding into phoneme/pitch/duration triples.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pitch ID reserved for rests (one past the MIDI range).
pub const REST_PITCH_ID: usize = 128;
/// Number of pitch embedding rows (MIDI 0..=127 plus the rest ID).
pub const PITCH_VOCAB: usize = 129;
/// Phoneme emitted for rests.
pub const SILENCE_PHONEME: &str = "sil";

/// Positive rational note value, as a fraction of a whole note.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoteValue {
    pub num: u32,
    pub den: u32,
}

impl NoteValue {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Domain(format!("note value {num}/{den} must be positive")));
        }
        Ok(Self { num, den })
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl FromStr for NoteValue {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse { what: "note value", input: s.to_string() };
        let (n, d) = match s.trim().split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        let num: u32 = n.parse().map_err(|_| bad())?;
        let den: u32 = d.parse().map_err(|_| bad())?;
        NoteValue::new(num, den)
    }
}

impl fmt::Display for NoteValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl Serialize for NoteValue {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for NoteValue {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub syllable: String,
    /// Empty means "resolve through the lexicon".
    #[serde(default)]
    pub phonemes: Vec<String>,
    /// Scientific pitch notation (`"C4"`, `"F#3"`, `"Bb5"`) or `"rest"`.
    #[serde(rename = "note")]
    pub note_name: String,
    pub value: NoteValue,
}

impl Note {
    pub fn is_rest(&self) -> bool {
        is_rest_name(&self.note_name)
    }

    pub fn pitch_id(&self) -> Result<usize> {
        if self.is_rest() {
            Ok(REST_PITCH_ID)
        } else {
            note_to_midi(&self.note_name).map(|m| m as usize)
        }
    }
}

fn is_rest_name(name: &str) -> bool {
    matches!(name.trim().to_ascii_lowercase().as_str(), "rest" | "r" | "-")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub tempo: f64,
    /// `(beats_per_bar, beat_unit)`
    pub time_signature: (u32, u32),
    pub notes: Vec<Note>,
}

impl Score {
    pub fn validate(&self) -> Result<()> {
        if !(self.tempo.is_finite() && self.tempo > 0.0) {
            return Err(Error::Score(format!("tempo must be finite and positive, got {}", self.tempo)));
        }
        if self.time_signature.0 == 0 || self.time_signature.1 == 0 {
            return Err(Error::Score(format!("invalid time signature {:?}", self.time_signature)));
        }
        if self.notes.is_empty() {
            return Err(Error::Score("score has no notes".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let score: Score = serde_json::from_str(text)?;
        score.validate()?;
        Ok(score)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Copy with every pitched note moved by `semitones`.
    pub fn transposed(&self, semitones: i32) -> Result<Self> {
        let mut out = self.clone();
        for n in &mut out.notes {
            if !n.is_rest() {
                let m = note_to_midi(&n.note_name)? as i32 + semitones;
                if !(0..=127).contains(&m) {
                    return Err(Error::Range { what: "transposed pitch", value: m as f64, min: 0.0, max: 127.0 });
                }
                n.note_name = midi_to_name(m as u8);
            }
        }
        Ok(out)
    }
}

/// Aligned per-phoneme input triples.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreSequence {
    pub phoneme_ids: Vec<usize>,
    pub pitch_ids: Vec<usize>,
    pub duration_frames: Vec<usize>,
}

impl ScoreSequence {
    pub fn len(&self) -> usize {
        self.phoneme_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phoneme_ids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.phoneme_ids.len();
        if self.pitch_ids.len() != n || self.duration_frames.len() != n {
            return Err(Error::Contract(format!(
                "score sequence lengths differ: {} / {} / {}",
                n,
                self.pitch_ids.len(),
                self.duration_frames.len()
            )));
        }
        if n == 0 {
            return Err(Error::Contract("empty score sequence".into()));
        }
        if let Some(p) = self.pitch_ids.iter().find(|&&p| p > REST_PITCH_ID) {
            return Err(Error::Range { what: "pitch id", value: *p as f64, min: 0.0, max: REST_PITCH_ID as f64 });
        }
        if self.duration_frames.contains(&0) {
            return Err(Error::Contract("zero duration frame count".into()));
        }
        Ok(())
    }
}

/// Phoneme inventory plus syllable pronunciations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub phonemes: Vec<String>,
    pub syllables: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn from_json(text: &str) -> Result<Self> {
        let lex: Lexicon = serde_json::from_str(text)?;
        if !lex.phonemes.iter().any(|p| p == SILENCE_PHONEME) {
            return Err(Error::Config(format!("lexicon must contain the silence phoneme {SILENCE_PHONEME:?}")));
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn phoneme_id(&self, symbol: &str) -> Option<usize> {
        self.phonemes.iter().position(|p| p == symbol)
    }

    pub fn vocab_size(&self) -> usize {
        self.phonemes.len()
    }

    /// Phonemes of `note`: explicit ones win, otherwise the syllable entry.
    pub fn resolve(&self, note: &Note) -> Result<Vec<usize>> {
        if note.is_rest() {
            return Ok(vec![self.phoneme_id(SILENCE_PHONEME).expect("validated lexicon")]);
        }
        let symbols: &[String] = if note.phonemes.is_empty() {
            self.syllables.get(&note.syllable).ok_or_else(|| Error::LexiconMiss { syllable: note.syllable.clone(), phoneme: None })?
        } else {
            &note.phonemes
        };
        if symbols.is_empty() {
            return Err(Error::Score(format!("note {:?} has no phonemes", note.syllable)));
        }
        symbols
            .iter()
            .map(|s| self.phoneme_id(s).ok_or_else(|| Error::LexiconMiss { syllable: note.syllable.clone(), phoneme: Some(s.clone()) }))
            .collect()
    }
}

/// MIDI pitch number of a scientific pitch name (`"C4"` is 60).
pub fn note_to_midi(name: &str) -> Result<u8> {
    let bad = || Error::Parse { what: "note name", input: name.to_string() };
    let mut chars = name.trim().chars().peekable();
    let chroma: i32 = match chars.next().map(|c| c.to_ascii_uppercase()) {
        Some('C') => 0,
        Some('D') => 2,
        Some('E') => 4,
        Some('F') => 5,
        Some('G') => 7,
        Some('A') => 9,
        Some('B') => 11,
        _ => return Err(bad()),
    };
    let mut accidental = 0;
    while let Some(&c) = chars.peek() {
        match c {
            '#' | '♯' => accidental += 1,
            'b' | '♭' => accidental -= 1,
            _ => break,
        }
        chars.next();
    }
    let octave_str: String = chars.collect();
    if octave_str.is_empty() || octave_str == "-" || !octave_str.trim_start_matches('-').chars().all(|c| c.is_ascii_digit()) {
        return Err(bad());
    }
    let octave: i32 = octave_str.parse().map_err(|_| bad())?;
    let midi = 12 * (octave + 1) + chroma + accidental;
    if !(0..=127).contains(&midi) {
        return Err(Error::Range { what: "midi pitch", value: midi as f64, min: 0.0, max: 127.0 });
    }
    Ok(midi as u8)
}

/// Canonical sharp-spelled name of a MIDI pitch.
pub fn midi_to_name(midi: u8) -> String {
    const NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];
    let m = midi as i32;
    format!("{}{}", NAMES[(m % 12) as usize], m / 12 - 1)
}

/// Equal-tempered frequency of an integer MIDI pitch.
pub fn midi_to_hz(pitch_id: usize) -> Result<f64> {
    if pitch_id > 127 {
        return Err(Error::Range { what: "midi pitch", value: pitch_id as f64, min: 0.0, max: 127.0 });
    }
    Ok(semitone_to_hz(pitch_id as f64))
}

/// `440 * 2^((s - 69) / 12)` for a fractional MIDI value.
#[inline]
pub fn semitone_to_hz(semitone: f64) -> f64 {
    440.0 * ((semitone - 69.0) / 12.0).exp2()
}

/// Inverse of [`semitone_to_hz`]; `hz` must be positive.
#[inline]
pub fn hz_to_semitone(hz: f64) -> f64 {
    69.0 + 12.0 * (hz / 440.0).log2()
}

/// Frame count of a note value at `tempo` BPM where one beat is a `1/beat_unit` note.
pub fn quantize_duration(value: NoteValue, tempo: f64, beat_unit: u32, hop_s: f64) -> Result<usize> {
    if !(tempo.is_finite() && tempo > 0.0) || beat_unit == 0 || !(hop_s.is_finite() && hop_s > 0.0) {
        return Err(Error::Domain(format!("quantize_duration needs positive inputs (tempo {tempo}, beat unit {beat_unit}, hop {hop_s})")));
    }
    let seconds = note_seconds(value, tempo, beat_unit);
    let frames = (seconds / hop_s + 0.5 + 1e-9).floor();
    Ok((frames as usize).max(1))
}

/// Duration in seconds of a note value.
pub fn note_seconds(value: NoteValue, tempo: f64, beat_unit: u32) -> f64 {
    value.as_f64() * beat_unit as f64 * 60.0 / tempo
}

/// Expands every note into one triple per phoneme, repeating its pitch and duration.
pub fn encode_score(score: &Score, lexicon: &Lexicon, hop_s: f64) -> Result<ScoreSequence> {
    score.validate()?;
    let mut seq = ScoreSequence { phoneme_ids: Vec::new(), pitch_ids: Vec::new(), duration_frames: Vec::new() };
    for note in &score.notes {
        let phonemes = lexicon.resolve(note)?;
        let pitch = note.pitch_id()?;
        let frames = quantize_duration(note.value, score.tempo, score.time_signature.1, hop_s)?;
        for ph in phonemes {
            seq.phoneme_ids.push(ph);
            seq.pitch_ids.push(pitch);
            seq.duration_frames.push(frames);
        }
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex() -> Lexicon {
        Lexicon {
            phonemes: ["sil", "k", "a", "i"].iter().map(|s| s.to_string()).collect(),
            syllables: [("ka".to_string(), vec!["k".to_string(), "a".to_string()])].into_iter().collect(),
        }
    }

    fn note(syl: &str, name: &str, v: &str) -> Note {
        Note { syllable: syl.into(), phonemes: vec![], note_name: name.into(), value: v.parse().unwrap() }
    }

    #[test]
    fn midi_examples() {
        assert_eq!(note_to_midi("C4").unwrap(), 60);
        assert_eq!(note_to_midi("C-1").unwrap(), 0);
        assert_eq!(note_to_midi("G9").unwrap(), 127);
        assert_eq!(note_to_midi("Bb3").unwrap(), 58);
        assert_eq!(note_to_midi("F#5").unwrap(), 78);
    }

    #[test]
    fn midi_chroma_table() {
        // hand-built chroma table, octave 4 => base 60
        let table = [
            ("C4", 60),
            ("C#4", 61),
            ("D4", 62),
            ("D#4", 63),
            ("E4", 64),
            ("F4", 65),
            ("F#4", 66),
            ("G4", 67),
            ("G#4", 68),
            ("A4", 69),
            ("A#4", 70),
            ("B4", 71),
        ];
        for (name, m) in table {
            assert_eq!(note_to_midi(name).unwrap(), m, "{name}");
        }
    }

    #[test]
    fn midi_errors() {
        assert!(matches!(note_to_midi("H4"), Err(Error::Parse { .. })));
        assert!(matches!(note_to_midi("C"), Err(Error::Parse { .. })));
        assert!(matches!(note_to_midi("C4x"), Err(Error::Parse { .. })));
        assert!(matches!(note_to_midi("G#9"), Err(Error::Range { .. })));
        assert!(matches!(note_to_midi("Cb-1"), Err(Error::Range { .. })));
    }

    #[test]
    fn hz_examples() {
        assert_eq!(midi_to_hz(69).unwrap(), 440.0);
        assert_eq!(midi_to_hz(81).unwrap(), 880.0);
        assert!((midi_to_hz(60).unwrap() - 261.6256).abs() < 1e-3);
        assert!(midi_to_hz(128).is_err());
    }

    #[test]
    fn quantize_examples() {
        let q = |v: &str, t| quantize_duration(v.parse().unwrap(), t, 4, 0.005).unwrap();
        assert_eq!(q("1/4", 120.0), 100);
        assert_eq!(q("1/2", 120.0), 200);
        assert_eq!(q("1/4", 60.0), 200);
        assert_eq!(quantize_duration("1/1024".parse().unwrap(), 300.0, 4, 0.005).unwrap(), 1);
        assert!(quantize_duration("1/4".parse().unwrap(), 0.0, 4, 0.005).is_err());
        assert!(quantize_duration("1/4".parse().unwrap(), 120.0, 4, -1.0).is_err());
        assert!("0/4".parse::<NoteValue>().is_err());
    }

    #[test]
    fn encode_repeats_per_phoneme() {
        let score = Score { tempo: 120.0, time_signature: (4, 4), notes: vec![note("ka", "C4", "1/4")] };
        let seq = encode_score(&score, &lex(), 0.005).unwrap();
        assert_eq!(seq.phoneme_ids, vec![1, 2]);
        assert_eq!(seq.pitch_ids, vec![60, 60]);
        assert_eq!(seq.duration_frames, vec![100, 100]);
    }

    #[test]
    fn encode_single_phoneme_notes_and_rests() {
        let mut n1 = note("a", "D4", "1/8");
        n1.phonemes = vec!["a".into()];
        let mut n2 = note("i", "E4", "1/4");
        n2.phonemes = vec!["i".into()];
        let score = Score { tempo: 120.0, time_signature: (4, 4), notes: vec![n1, note("", "rest", "1/4"), n2] };
        let seq = encode_score(&score, &lex(), 0.005).unwrap();
        assert_eq!(seq.phoneme_ids, vec![2, 0, 3]);
        assert_eq!(seq.pitch_ids, vec![62, REST_PITCH_ID, 64]);
        assert_eq!(seq.duration_frames, vec![50, 100, 100]);
        seq.validate().unwrap();
    }

    #[test]
    fn encode_errors() {
        let empty = Score { tempo: 120.0, time_signature: (4, 4), notes: vec![] };
        assert!(matches!(encode_score(&empty, &lex(), 0.005), Err(Error::Score(_))));
        let miss = Score { tempo: 120.0, time_signature: (4, 4), notes: vec![note("zzz", "C4", "1/4")] };
        let err = encode_score(&miss, &lex(), 0.005).unwrap_err();
        assert!(err.to_string().contains("zzz"), "{err}");
    }

    #[test]
    fn score_json_roundtrip() {
        let text = r#"{"tempo": 120, "time_signature": [4, 4],
            "notes": [{"syllable": "ka", "phonemes": ["k", "a"], "note": "C4", "value": "1/4"},
                      {"syllable": "", "note": "rest", "value": "1/8"}]}"#;
        let s = Score::from_json(text).unwrap();
        assert_eq!(s.notes[0].value, NoteValue { num: 1, den: 4 });
        assert!(s.notes[1].is_rest());
        assert_eq!(Score::from_json(&s.to_json().unwrap()).unwrap(), s);
    }

    #[test]
    fn transpose_shifts_pitched_notes() {
        let score = Score { tempo: 120.0, time_signature: (4, 4), notes: vec![note("ka", "C4", "1/4"), note("", "rest", "1/4")] };
        let up = score.transposed(4).unwrap();
        assert_eq!(up.notes[0].note_name, "E4");
        assert!(up.notes[1].is_rest());
        assert!(score.transposed(100).is_err());
    }

    proptest! {
        #[test]
        fn name_midi_hz_roundtrip(m in 0u8..=127) {
            let name = midi_to_name(m);
            let back = note_to_midi(&name).unwrap();
            prop_assert_eq!(back, m);
            let hz = midi_to_hz(back as usize).unwrap();
            let closed = 440.0 * 2f64.powf((m as f64 - 69.0) / 12.0);
            prop_assert!((hz - closed).abs() < 0.01);
        }

        #[test]
        fn quantize_monotone(num in 1u32..16, den_pow in 0u32..5, tempo in 40.0f64..240.0) {
            let den = 1 << den_pow;
            let v = NoteValue::new(num, den).unwrap();
            let longer = NoteValue::new(num + 1, den).unwrap();
            let a = quantize_duration(v, tempo, 4, 0.005).unwrap();
            let b = quantize_duration(longer, tempo, 4, 0.005).unwrap();
            let faster = quantize_duration(v, tempo * 1.5, 4, 0.005).unwrap();
            prop_assert!(a >= 1 && b >= a && faster <= a);
        }
    }
}
