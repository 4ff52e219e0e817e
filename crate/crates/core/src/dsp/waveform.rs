use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 48_000;

/// Mono audio in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Domain("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Domain(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    pub fn reversed(&self) -> Self {
        let mut samples = self.samples.clone();
        samples.reverse();
        Self { samples, sample_rate: self.sample_rate }
    }

    /// Writes 16-bit PCM mono; samples are clipped to `[-1, 1]`.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec =
            hound::WavSpec { channels: 1, sample_rate: self.sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample(to_pcm16(s))?;
        }
        w.finalize()?;
        Ok(())
    }

    /// Reads 16-bit PCM mono at exactly `expected_rate`.
    pub fn read_wav(path: &Path, expected_rate: u32) -> Result<Self> {
        let mut r = hound::WavReader::open(path)?;
        let spec = r.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::Data(format!(
                "{}: expected 16-bit PCM mono, got {} ch / {} bit / {:?}",
                path.display(),
                spec.channels,
                spec.bits_per_sample,
                spec.sample_format
            )));
        }
        if spec.sample_rate != expected_rate {
            return Err(Error::Data(format!(
                "{}: sample rate {} differs from expected {} (resampling is not supported)",
                path.display(),
                spec.sample_rate,
                expected_rate
            )));
        }
        let samples = r.samples::<i16>().map(|s| s.map(from_pcm16)).collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(samples, spec.sample_rate)
    }

    /// Same samples after a PCM16 round trip.
    pub fn quantized(&self) -> Self {
        Self { samples: self.samples.iter().map(|&s| from_pcm16(to_pcm16(s))).collect(), sample_rate: self.sample_rate }
    }
}

pub fn to_pcm16(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

pub fn from_pcm16(s: i16) -> f64 {
    s as f64 / 32767.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        assert!(Waveform::new(vec![0.0, f64::NAN], 48_000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn wav_roundtrip_and_rate_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new((0..480).map(|i| (i as f64 * 0.05).sin() * 0.8).collect(), 48_000).unwrap();
        w.write_wav(&path).unwrap();
        let back = Waveform::read_wav(&path, 48_000).unwrap();
        assert_eq!(back.len(), 480);
        assert_eq!(back, w.quantized());
        assert!(back.samples.iter().zip(&w.samples).all(|(a, b)| (a - b).abs() < 1.0 / 32767.0));
        assert!(matches!(Waveform::read_wav(&path, 24_000), Err(Error::Data(_))));
    }

    #[test]
    fn pcm_clips() {
        assert_eq!(to_pcm16(2.0), 32767);
        assert_eq!(to_pcm16(-2.0), -32767);
    }
}
