use cantus_nn::Tensor;
use serde::{Deserialize, Serialize};

use super::mel::{MelConfig, MelExtractor};
use super::pitch::PitchTracker;
use super::waveform::Waveform;
use crate::error::{Error, Result};
use crate::score::hz_to_semitone;

/// Default voicing threshold in Hz.
pub const VUV_THRESHOLD_HZ: f64 = 3.0;

/// Per-frame acoustic features of one utterance.
///
/// Raw features hold log-mel and F0 in Hz. After [`NormStats::normalize`] the
/// mel is z-scored per bin and voiced F0 holds the z-scored semitone pitch;
/// unvoiced F0 is 0 in both forms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcousticFeatures {
    /// `[T, n_mels]`
    pub mel: Tensor,
    pub f0: Vec<f64>,
    pub vuv: Vec<f64>,
    pub hop_s: f64,
    pub window_s: f64,
}

impl AcousticFeatures {
    pub fn n_frames(&self) -> usize {
        self.f0.len()
    }

    pub fn n_mels(&self) -> usize {
        self.mel.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.f0.len();
        if self.mel.ndim() != 2 || self.mel.rows() != t || self.vuv.len() != t {
            return Err(Error::Frame(format!("frame counts disagree: mel {:?}, f0 {}, vuv {}", self.mel.shape(), t, self.vuv.len())));
        }
        if self.vuv.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Frame("vuv must be 0 or 1".into()));
        }
        Ok(())
    }

    /// First `t` frames.
    pub fn truncated(&self, t: usize) -> Self {
        let t = t.min(self.n_frames());
        Self {
            mel: self.mel.slice_rows(0, t),
            f0: self.f0[..t].to_vec(),
            vuv: self.vuv[..t].to_vec(),
            hop_s: self.hop_s,
            window_s: self.window_s,
        }
    }
}

/// 1 where `f0 > threshold`, else 0.
pub fn vuv_from_f0(f0: &[f64], threshold: f64) -> Result<Vec<f64>> {
    if let Some(i) = f0.iter().position(|&f| f.is_nan() || f < 0.0) {
        return Err(Error::Domain(format!("f0[{i}] = {} is negative or NaN", f0[i])));
    }
    Ok(f0.iter().map(|&f| if f > threshold { 1.0 } else { 0.0 }).collect())
}

/// Mel + F0 + V/UV on shared framing. F0 is zeroed wherever V/UV is 0.
pub fn extract_features(w: &Waveform, mel: &MelExtractor, tracker: &dyn PitchTracker) -> Result<AcousticFeatures> {
    let frame = mel.cfg.frame;
    let m = mel.log_mel(w)?;
    let mut f0 = tracker.track(w, &frame)?;
    if f0.len() != m.rows() {
        return Err(Error::Frame(format!("pitch tracker returned {} frames, mel has {}", f0.len(), m.rows())));
    }
    let vuv = vuv_from_f0(&f0, VUV_THRESHOLD_HZ)?;
    for (f, v) in f0.iter_mut().zip(&vuv) {
        if *v == 0.0 {
            *f = 0.0;
        }
    }
    Ok(AcousticFeatures { mel: m, f0, vuv, hop_s: frame.hop_s, window_s: frame.window_s })
}

pub fn default_extractor() -> Result<MelExtractor> {
    MelExtractor::new(MelConfig::default())
}

/// Training-split statistics. F0 statistics are over voiced frames, in semitones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mel_mean: Vec<f64>,
    pub mel_std: Vec<f64>,
    pub f0_mean: f64,
    pub f0_std: f64,
}

/// Smallest accepted standard deviation.
const MIN_STD: f64 = 1e-8;

impl NormStats {
    /// Single pass of per-bin sums over all frames (population variance).
    pub fn compute<'a>(items: impl IntoIterator<Item = &'a AcousticFeatures>) -> Result<Self> {
        let mut n_mels = None;
        let (mut s1, mut s2) = (Vec::new(), Vec::new());
        let mut frames = 0usize;
        let (mut f1, mut f2, mut voiced) = (0.0, 0.0, 0usize);
        for f in items {
            f.validate()?;
            let m = *n_mels.get_or_insert_with(|| {
                s1 = vec![0.0; f.n_mels()];
                s2 = vec![0.0; f.n_mels()];
                f.n_mels()
            });
            if f.n_mels() != m {
                return Err(Error::Stats(format!("mixed mel sizes {m} and {}", f.n_mels())));
            }
            for t in 0..f.n_frames() {
                for (j, &v) in f.mel.row(t).iter().enumerate() {
                    s1[j] += v;
                    s2[j] += v * v;
                }
                if f.vuv[t] == 1.0 {
                    let s = hz_to_semitone(f.f0[t]);
                    f1 += s;
                    f2 += s * s;
                    voiced += 1;
                }
            }
            frames += f.n_frames();
        }
        if frames == 0 {
            return Err(Error::Stats("no frames".into()));
        }
        if voiced == 0 {
            return Err(Error::Stats("no voiced frames for F0 statistics".into()));
        }
        let n = frames as f64;
        let mel_mean: Vec<f64> = s1.iter().map(|s| s / n).collect();
        let mel_std: Vec<f64> = s2.iter().zip(&mel_mean).map(|(s, mu)| (s / n - mu * mu).max(0.0).sqrt()).collect();
        let f0_mean = f1 / voiced as f64;
        let f0_std = (f2 / voiced as f64 - f0_mean * f0_mean).max(0.0).sqrt();
        let stats = Self { mel_mean, mel_std, f0_mean, f0_std };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mel_mean.len() != self.mel_std.len() {
            return Err(Error::Stats("mean/std length mismatch".into()));
        }
        if let Some(j) = self.mel_std.iter().position(|&s| s.is_nan() || s <= MIN_STD) {
            return Err(Error::Stats(format!("mel bin {j} has zero variance")));
        }
        if self.f0_std.is_nan() || self.f0_std <= MIN_STD {
            return Err(Error::Stats("F0 has zero variance".into()));
        }
        Ok(())
    }

    pub fn n_mels(&self) -> usize {
        self.mel_mean.len()
    }

    fn check(&self, f: &AcousticFeatures) -> Result<()> {
        f.validate()?;
        if f.n_mels() != self.n_mels() {
            return Err(Error::Stats(format!("features have {} mel bins, stats {}", f.n_mels(), self.n_mels())));
        }
        Ok(())
    }

    pub fn normalize_f0(&self, hz: f64) -> f64 {
        (hz_to_semitone(hz) - self.f0_mean) / self.f0_std
    }

    /// Semitone pitch of a normalized F0 value.
    pub fn denormalize_f0_semitone(&self, z: f64) -> f64 {
        z * self.f0_std + self.f0_mean
    }

    pub fn normalize(&self, f: &AcousticFeatures) -> Result<AcousticFeatures> {
        self.check(f)?;
        let c = self.n_mels();
        let mut mel = f.mel.clone();
        for row in mel.data_mut().chunks_mut(c) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mel_mean[j]) / self.mel_std[j];
            }
        }
        let f0 = f.f0.iter().zip(&f.vuv).map(|(&hz, &v)| if v == 1.0 { self.normalize_f0(hz) } else { 0.0 }).collect();
        Ok(AcousticFeatures { mel, f0, vuv: f.vuv.clone(), hop_s: f.hop_s, window_s: f.window_s })
    }

    pub fn denormalize(&self, f: &AcousticFeatures) -> Result<AcousticFeatures> {
        self.check(f)?;
        let c = self.n_mels();
        let mut mel = f.mel.clone();
        for row in mel.data_mut().chunks_mut(c) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.mel_std[j] + self.mel_mean[j];
            }
        }
        let f0 =
            f.f0.iter()
                .zip(&f.vuv)
                .map(|(&z, &v)| if v == 1.0 { crate::score::semitone_to_hz(self.denormalize_f0_semitone(z)) } else { 0.0 })
                .collect();
        Ok(AcousticFeatures { mel, f0, vuv: f.vuv.clone(), hop_s: f.hop_s, window_s: f.window_s })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_feats(seed: u64, t: usize, m: usize) -> AcousticFeatures {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let vuv: Vec<f64> = (0..t).map(|_| if rng.random_bool(0.7) { 1.0 } else { 0.0 }).collect();
        let f0 = vuv.iter().map(|&v| if v == 1.0 { rng.random_range(80.0..900.0) } else { 0.0 }).collect();
        AcousticFeatures { mel: Tensor::from_fn(&[t, m], |_| rng.random_range(-11.0..2.0)), f0, vuv, hop_s: 0.005, window_s: 0.02 }
    }

    #[test]
    fn vuv_examples() {
        assert_eq!(vuv_from_f0(&[0.0, 440.0, 2.9], 3.0).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(vuv_from_f0(&[0.0; 4], 3.0).unwrap(), vec![0.0; 4]);
        assert_eq!(vuv_from_f0(&[3.0; 3], 3.0).unwrap(), vec![0.0; 3]);
        assert!(matches!(vuv_from_f0(&[-1.0], 3.0), Err(Error::Domain(_))));
    }

    #[test]
    fn normalized_training_set_is_standard() {
        let feats: Vec<_> = (0..3).map(|s| random_feats(s, 50 + s as usize * 7, 8)).collect();
        let stats = NormStats::compute(&feats).unwrap();
        let normed: Vec<_> = feats.iter().map(|f| stats.normalize(f).unwrap()).collect();
        let n: usize = normed.iter().map(|f| f.n_frames()).sum();
        for j in 0..8 {
            let vals: Vec<f64> = normed.iter().flat_map(|f| (0..f.n_frames()).map(move |t| f.mel.at2(t, j))).collect();
            let mu = vals.iter().sum::<f64>() / n as f64;
            let sd = (vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64).sqrt();
            assert!(mu.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6, "bin {j}: {mu} {sd}");
        }
        for f in &normed {
            for (z, v) in f.f0.iter().zip(&f.vuv) {
                if *v == 0.0 {
                    assert_eq!(*z, 0.0);
                }
            }
        }
    }

    #[test]
    fn constant_bin_is_stats_error() {
        let mut f = random_feats(1, 20, 4);
        for t in 0..20 {
            f.mel.data_mut()[t * 4 + 2] = -3.0;
        }
        assert!(matches!(NormStats::compute([&f]), Err(Error::Stats(_))));
    }

    #[test]
    fn mismatched_frames_are_rejected() {
        let mut f = random_feats(2, 10, 4);
        f.vuv.pop();
        assert!(f.validate().is_err());
    }

    proptest! {
        #[test]
        fn normalize_roundtrip(seed in 0u64..1000, t in 2usize..40) {
            let base = random_feats(seed ^ 0xabc, 60, 6);
            let stats = NormStats::compute([&base]).unwrap();
            let f = random_feats(seed, t, 6);
            let back = stats.denormalize(&stats.normalize(&f).unwrap()).unwrap();
            prop_assert!(back.mel.max_abs_diff(&f.mel) < 1e-6);
            for (a, b) in back.f0.iter().zip(&f.f0) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
