//! Non-autoregressive score-to-feature model: FFT-block encoder, duration
//! predictor, length regulator, FFT-block decoder and mel/F0/V-UV heads.
//!
//! F0 is predicted as a semitone residual on top of the note pitch, so the
//! score pitch passes straight through to the output.

use cantus_nn::layers::{Conv1d, Embedding, LayerNorm, Linear};
use cantus_nn::{Bound, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{dropout, positional_encoding, FftBlock};
use crate::dsp::{AcousticFeatures, NormStats};
use crate::error::{Error, Result};
use crate::score::{semitone_to_hz, ScoreSequence, PITCH_VOCAB, REST_PITCH_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcousticModelConfig {
    pub n_phonemes: usize,
    pub n_encoder_blocks: usize,
    pub n_decoder_blocks: usize,
    pub hidden: usize,
    pub conv_kernel: usize,
    pub conv_filter: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub n_mels: usize,
    /// Duration IDs at or above this share the last embedding row.
    pub max_duration_id: usize,
    pub duration_channels: usize,
    pub duration_kernel: usize,
}

impl AcousticModelConfig {
    /// Full-size configuration.
    pub fn full(n_phonemes: usize) -> Self {
        Self {
            n_phonemes,
            n_encoder_blocks: 6,
            n_decoder_blocks: 6,
            hidden: 384,
            conv_kernel: 3,
            conv_filter: 1536,
            n_heads: 2,
            dropout: 0.1,
            n_mels: 80,
            max_duration_id: 1024,
            duration_channels: 384,
            duration_kernel: 3,
        }
    }

    /// Desk-scale profile.
    pub fn tiny(n_phonemes: usize) -> Self {
        Self { n_encoder_blocks: 2, n_decoder_blocks: 2, hidden: 64, conv_filter: 256, duration_channels: 64, ..Self::full(n_phonemes) }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_phonemes", self.n_phonemes),
            ("n_encoder_blocks", self.n_encoder_blocks),
            ("n_decoder_blocks", self.n_decoder_blocks),
            ("hidden", self.hidden),
            ("conv_kernel", self.conv_kernel),
            ("conv_filter", self.conv_filter),
            ("n_heads", self.n_heads),
            ("n_mels", self.n_mels),
            ("max_duration_id", self.max_duration_id),
            ("duration_channels", self.duration_channels),
            ("duration_kernel", self.duration_kernel),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("acoustic {name} must be >= 1")));
        }
        if !self.hidden.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("hidden {} not divisible by {} heads", self.hidden, self.n_heads)));
        }
        if self.conv_kernel.is_multiple_of(2) || self.duration_kernel.is_multiple_of(2) {
            return Err(Error::Config("convolution kernels must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DurationPredictor {
    conv1: Conv1d,
    norm1: LayerNorm,
    conv2: Conv1d,
    norm2: LayerNorm,
    out: Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Layers {
    phoneme: Embedding,
    pitch: Embedding,
    duration: Embedding,
    encoder: Vec<FftBlock>,
    dur: DurationPredictor,
    decoder: Vec<FftBlock>,
    /// `hidden -> n_mels + 2` (mel, F0 residual, V/UV logit)
    head: Linear,
}

/// Graph outputs of one utterance.
#[derive(Clone, Copy, Debug)]
pub struct AcousticVars {
    /// `[T, n_mels]`, normalized scale
    pub mel: Var,
    /// `[T, 1]`, semitones relative to the note pitch
    pub f0_residual: Var,
    /// `[T, 1]`
    pub vuv_logit: Var,
    /// `[N, 1]`
    pub log_durations: Var,
}

/// Detached predictions of one utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcousticOutput {
    pub mel: Tensor,
    pub f0_residual: Vec<f64>,
    pub vuv_logit: Vec<f64>,
    pub durations_log: Vec<f64>,
    /// Frame counts used by the length regulator.
    pub durations: Vec<usize>,
    /// Note pitch ID of every frame.
    pub note_pitch: Vec<usize>,
}

pub struct AcousticModel {
    pub cfg: AcousticModelConfig,
    pub params: ParamStore,
    layers: Layers,
}

/// Row indices realizing `durations` (row `i` repeated `durations[i]` times).
pub fn length_regulate_indices(durations: &[usize]) -> Result<Vec<usize>> {
    if let Some(i) = durations.iter().position(|&d| d < 1) {
        return Err(Error::Domain(format!("duration[{i}] is 0; every phoneme needs >= 1 frame")));
    }
    Ok(durations.iter().enumerate().flat_map(|(i, &d)| std::iter::repeat_n(i, d)).collect())
}

/// Repeats row `i` of `h: [N, C]` `durations[i]` times.
pub fn length_regulate(h: &Tensor, durations: &[usize]) -> Result<Tensor> {
    if h.rows() != durations.len() {
        return Err(Error::Contract(format!("{} rows but {} durations", h.rows(), durations.len())));
    }
    let idx = length_regulate_indices(durations)?;
    let c = h.cols();
    let mut out = Vec::with_capacity(idx.len() * c);
    for i in idx {
        out.extend_from_slice(h.row(i));
    }
    Ok(Tensor::new(&[out.len() / c.max(1), c], out))
}

/// Per-frame copy of a per-phoneme sequence.
pub fn expand<T: Copy>(values: &[T], durations: &[usize]) -> Vec<T> {
    values.iter().zip(durations).flat_map(|(&v, &d)| std::iter::repeat_n(v, d)).collect()
}

/// Inference frame count of a log-duration prediction.
pub fn rounded_duration(log_d: f64) -> usize {
    let d = log_d.clamp(-20.0, 20.0).exp().round();
    (d as usize).max(1)
}

/// Shortcut pitch of a frame in semitones; rests fall back to the corpus mean.
pub fn note_semitone(pitch_id: usize, stats: &NormStats) -> f64 {
    if pitch_id >= REST_PITCH_ID {
        stats.f0_mean
    } else {
        pitch_id as f64
    }
}

/// `note + residual` semitones in Hz.
pub fn f0_hz(note_semitone: f64, residual: f64) -> f64 {
    semitone_to_hz(note_semitone + residual)
}

impl AcousticModel {
    pub fn new(cfg: AcousticModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let h = cfg.hidden;
        let phoneme = Embedding::new(&mut s, "emb.phoneme", cfg.n_phonemes, h, &mut rng);
        let pitch = Embedding::new(&mut s, "emb.pitch", PITCH_VOCAB, h, &mut rng);
        let duration = Embedding::new(&mut s, "emb.duration", cfg.max_duration_id, h, &mut rng);
        let block = |s: &mut ParamStore, name: String, rng: &mut ChaCha8Rng| {
            FftBlock::new(s, &name, h, cfg.n_heads, cfg.conv_filter, cfg.conv_kernel, rng)
        };
        let encoder = (0..cfg.n_encoder_blocks).map(|i| block(&mut s, format!("enc.{i}"), &mut rng)).collect();
        let dc = cfg.duration_channels;
        let dur = DurationPredictor {
            conv1: Conv1d::new(&mut s, "dur.conv1", h, dc, cfg.duration_kernel, 1, true, &mut rng),
            norm1: LayerNorm::new(&mut s, "dur.norm1", dc),
            conv2: Conv1d::new(&mut s, "dur.conv2", dc, dc, cfg.duration_kernel, 1, true, &mut rng),
            norm2: LayerNorm::new(&mut s, "dur.norm2", dc),
            out: Linear::new(&mut s, "dur.out", dc, 1, true, &mut rng),
        };
        let decoder = (0..cfg.n_decoder_blocks).map(|i| block(&mut s, format!("dec.{i}"), &mut rng)).collect();
        let head = Linear::new(&mut s, "head", h, cfg.n_mels + 2, true, &mut rng);
        Ok(Self { cfg, params: s, layers: Layers { phoneme, pitch, duration, encoder, dur, decoder, head } })
    }

    fn check_ids(&self, seq: &ScoreSequence) -> Result<()> {
        seq.validate()?;
        if let Some(&id) = seq.phoneme_ids.iter().find(|&&id| id >= self.cfg.n_phonemes) {
            return Err(Error::Range { what: "phoneme id", value: id as f64, min: 0.0, max: (self.cfg.n_phonemes - 1) as f64 });
        }
        Ok(())
    }

    /// `[N, hidden]` phoneme hiddens.
    pub fn encode(&self, g: &mut Graph, p: &Bound, seq: &ScoreSequence, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        self.check_ids(seq)?;
        let l = &self.layers;
        let dur_ids: Vec<usize> = seq.duration_frames.iter().map(|&d| d.min(self.cfg.max_duration_id - 1)).collect();
        let e_ph = l.phoneme.forward(g, p, &seq.phoneme_ids);
        let e_pi = l.pitch.forward(g, p, &seq.pitch_ids);
        let e_du = l.duration.forward(g, p, &dur_ids);
        let pe = g.constant(positional_encoding(seq.len(), self.cfg.hidden));
        let mut x = g.add_all(&[e_ph, e_pi, e_du, pe]);
        for blk in &l.encoder {
            x = blk.forward(g, p, x, self.cfg.dropout, rng.as_deref_mut());
        }
        Ok(x)
    }

    /// `[N, 1]` log-frame predictions.
    pub fn predict_durations(&self, g: &mut Graph, p: &Bound, h: Var, mut rng: Option<&mut ChaCha8Rng>) -> Var {
        let d = &self.layers.dur;
        let mut x = h;
        for (conv, norm) in [(&d.conv1, &d.norm1), (&d.conv2, &d.norm2)] {
            let xt = g.transpose(x);
            let y = conv.forward(g, p, xt);
            let y = g.relu(y);
            let y = g.transpose(y);
            let y = norm.forward(g, p, y);
            x = dropout(g, y, self.cfg.dropout, rng.as_deref_mut());
        }
        d.out.forward(g, p, x)
    }

    /// Decoder over length-regulated hiddens; returns `(mel, f0_residual, vuv_logit)`.
    pub fn decode(&self, g: &mut Graph, p: &Bound, expanded: Var, mut rng: Option<&mut ChaCha8Rng>) -> (Var, Var, Var) {
        let t = g.shape(expanded)[0];
        let pe = g.constant(positional_encoding(t, self.cfg.hidden));
        let mut x = g.add(expanded, pe);
        for blk in &self.layers.decoder {
            x = blk.forward(g, p, x, self.cfg.dropout, rng.as_deref_mut());
        }
        let y = self.layers.head.forward(g, p, x);
        let m = self.cfg.n_mels;
        let mel = g.slice_cols(y, 0, m);
        let f0 = g.slice_cols(y, m, m + 1);
        let vuv = g.slice_cols(y, m + 1, m + 2);
        (mel, f0, vuv)
    }

    /// Full pass with the given (teacher-forced) frame durations.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        seq: &ScoreSequence,
        durations: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<AcousticVars> {
        if durations.len() != seq.len() {
            return Err(Error::Contract(format!("{} phonemes but {} durations", seq.len(), durations.len())));
        }
        let h = self.encode(g, p, seq, rng.as_deref_mut())?;
        let log_durations = self.predict_durations(g, p, h, rng.as_deref_mut());
        let idx = length_regulate_indices(durations)?;
        let expanded = g.gather_rows(h, &idx);
        let (mel, f0_residual, vuv_logit) = self.decode(g, p, expanded, rng);
        Ok(AcousticVars { mel, f0_residual, vuv_logit, log_durations })
    }

    /// Eval-mode prediction. Uses `durations` when given, otherwise the predicted ones.
    pub fn infer(&self, seq: &ScoreSequence, durations: Option<&[usize]>) -> Result<AcousticOutput> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let h = self.encode(&mut g, &p, seq, None)?;
        let ld = self.predict_durations(&mut g, &p, h, None);
        let durations_log = g.value(ld).data().to_vec();
        let durs: Vec<usize> = match durations {
            Some(d) => {
                if d.len() != seq.len() {
                    return Err(Error::Contract(format!("{} phonemes but {} durations", seq.len(), d.len())));
                }
                d.to_vec()
            }
            None => durations_log.iter().map(|&l| rounded_duration(l)).collect(),
        };
        let idx = length_regulate_indices(&durs)?;
        let expanded = g.gather_rows(h, &idx);
        let (mel, f0, vuv) = self.decode(&mut g, &p, expanded, None);
        Ok(AcousticOutput {
            mel: g.value(mel).clone(),
            f0_residual: g.value(f0).data().to_vec(),
            vuv_logit: g.value(vuv).data().to_vec(),
            durations_log,
            note_pitch: expand(&seq.pitch_ids, &durs),
            durations: durs,
        })
    }
}

impl AcousticOutput {
    /// Denormalized features: log-mel, F0 in Hz (0 where V/UV says unvoiced), V/UV flags.
    pub fn to_features(&self, stats: &NormStats, hop_s: f64, window_s: f64) -> Result<AcousticFeatures> {
        let t = self.mel.rows();
        if self.f0_residual.len() != t || self.vuv_logit.len() != t || self.note_pitch.len() != t {
            return Err(Error::Contract("acoustic output frame counts differ".into()));
        }
        let vuv: Vec<f64> = self.vuv_logit.iter().map(|&l| if l > 0.0 { 1.0 } else { 0.0 }).collect();
        let f0 = (0..t)
            .map(|i| if vuv[i] == 1.0 { f0_hz(note_semitone(self.note_pitch[i], stats), self.f0_residual[i]) } else { 0.0 })
            .collect();
        let normalized = AcousticFeatures { mel: self.mel.clone(), f0: vec![0.0; t], vuv: vec![0.0; t], hop_s, window_s };
        let mut out = stats.denormalize(&normalized)?;
        out.f0 = f0;
        out.vuv = vuv;
        Ok(out)
    }
}

/// Reconstruction loss terms of one utterance (graph scalars).
#[derive(Clone, Copy, Debug)]
pub struct ReconLoss {
    pub mel_l1: Var,
    pub f0_l2_voiced: Var,
    pub vuv_bce: Var,
    pub dur_mse_log: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconWeights {
    pub f0: f64,
    pub vuv: f64,
    pub duration: f64,
}

impl Default for ReconWeights {
    fn default() -> Self {
        Self { f0: 0.1, vuv: 0.1, duration: 1.0 }
    }
}

impl ReconLoss {
    pub fn weighted_sum(&self, g: &mut Graph, w: &ReconWeights) -> Var {
        let f0 = g.scale(self.f0_l2_voiced, w.f0);
        let vuv = g.scale(self.vuv_bce, w.vuv);
        let dur = g.scale(self.dur_mse_log, w.duration);
        g.add_all(&[self.mel_l1, f0, vuv, dur])
    }
}

/// Loss terms against normalized targets.
///
/// F0 error is measured on the normalized semitone scale over voiced target
/// frames; V/UV uses binary cross-entropy on logits; durations use squared
/// error of log frame counts.
pub fn reconstruction_loss(
    g: &mut Graph,
    out: &AcousticVars,
    target: &AcousticFeatures,
    note_pitch: &[usize],
    dur_target: &[usize],
    stats: &NormStats,
) -> Result<ReconLoss> {
    let t = g.shape(out.mel)[0];
    if target.n_frames() != t || note_pitch.len() != t || target.n_mels() != g.shape(out.mel)[1] {
        return Err(Error::Contract(format!(
            "prediction has {t} frames x {} bins, target {} x {}, note pitch {}",
            g.shape(out.mel)[1],
            target.n_frames(),
            target.n_mels(),
            note_pitch.len()
        )));
    }
    if g.shape(out.log_durations)[0] != dur_target.len() {
        return Err(Error::Contract("duration target length differs from phoneme count".into()));
    }
    let tm = g.constant(target.mel.clone());
    let d = g.sub(out.mel, tm);
    let d = g.abs(d);
    let mel_l1 = g.mean(d);

    let voiced = target.vuv.iter().filter(|&&v| v == 1.0).count();
    let f0_l2_voiced = if voiced == 0 {
        g.constant(Tensor::scalar(0.0))
    } else {
        let offs = Tensor::from_fn(&[t, 1], |i| {
            let base = (note_semitone(note_pitch[i], stats) - stats.f0_mean) / stats.f0_std;
            base - target.f0[i]
        });
        let mask = g.constant(Tensor::new(&[t, 1], target.vuv.clone()));
        let z = g.scale(out.f0_residual, 1.0 / stats.f0_std);
        let offs = g.constant(offs);
        let diff = g.add(z, offs);
        let diff = g.mul(diff, mask);
        let sq = g.square(diff);
        let s = g.sum(sq);
        g.scale(s, 1.0 / voiced as f64)
    };

    let y = g.constant(Tensor::new(&[t, 1], target.vuv.clone()));
    let sp = g.softplus(out.vuv_logit);
    let yl = g.mul(y, out.vuv_logit);
    let bce = g.sub(sp, yl);
    let vuv_bce = g.mean(bce);

    let lt = g.constant(Tensor::from_fn(&[dur_target.len(), 1], |i| (dur_target[i].max(1) as f64).ln()));
    let dd = g.sub(out.log_durations, lt);
    let dd = g.square(dd);
    let dur_mse_log = g.mean(dd);

    Ok(ReconLoss { mel_l1, f0_l2_voiced, vuv_bce, dur_mse_log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_cfg() -> AcousticModelConfig {
        AcousticModelConfig {
            n_encoder_blocks: 1,
            n_decoder_blocks: 1,
            hidden: 16,
            conv_filter: 32,
            duration_channels: 16,
            n_mels: 8,
            max_duration_id: 64,
            ..AcousticModelConfig::tiny(6)
        }
    }

    fn seq(n: usize) -> ScoreSequence {
        ScoreSequence {
            phoneme_ids: (0..n).map(|i| i % 6).collect(),
            pitch_ids: (0..n).map(|i| 60 + i % 5).collect(),
            duration_frames: (0..n).map(|i| 3 + i % 4).collect(),
        }
    }

    fn stats(m: usize) -> NormStats {
        NormStats { mel_mean: vec![-4.0; m], mel_std: vec![2.0; m], f0_mean: 62.0, f0_std: 3.0 }
    }

    #[test]
    fn length_regulate_examples() {
        let h = Tensor::from_rows(&[vec![0.0, 0.5], vec![1.0, 1.5], vec![2.0, 2.5]]);
        let out = length_regulate(&h, &[2, 1, 3]).unwrap();
        let firsts: Vec<f64> = (0..out.rows()).map(|r| out.at2(r, 0)).collect();
        assert_eq!(firsts, vec![0.0, 0.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(length_regulate(&h, &[1, 1, 1]).unwrap(), h);
        assert!(matches!(length_regulate(&h, &[1, 0, 1]), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_log_duration_is_one_frame() {
        assert_eq!(rounded_duration(0.0), 1);
        assert_eq!(rounded_duration(-5.0), 1);
        assert_eq!(rounded_duration(100f64.ln()), 100);
    }

    #[test]
    fn encode_shape_and_determinism() {
        let m = AcousticModel::new(AcousticModelConfig::tiny(10), 0).unwrap();
        let s = seq(7);
        let run = |s: &ScoreSequence| {
            let mut g = Graph::new();
            let p = m.params.bind_frozen(&mut g);
            let h = m.encode(&mut g, &p, s, None).unwrap();
            g.value(h).clone()
        };
        let a = run(&s);
        assert_eq!(a.shape(), &[7, 64]);
        assert_eq!(a, run(&s));
        let mut swapped = s.clone();
        swapped.phoneme_ids.swap(1, 2);
        swapped.pitch_ids.swap(1, 2);
        swapped.duration_frames.swap(1, 2);
        let b = run(&swapped);
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn full_size_encode_shape() {
        let m = AcousticModel::new(AcousticModelConfig::full(10), 0).unwrap();
        let mut g = Graph::new();
        let p = m.params.bind_frozen(&mut g);
        let h = m.encode(&mut g, &p, &seq(7), None).unwrap();
        assert_eq!(g.shape(h), &[7, 384]);
    }

    #[test]
    fn out_of_range_phoneme_is_rejected() {
        let m = AcousticModel::new(tiny_cfg(), 0).unwrap();
        let mut s = seq(3);
        s.phoneme_ids[1] = 6;
        assert!(matches!(m.infer(&s, None), Err(Error::Range { .. })));
    }

    #[test]
    fn decode_shapes_and_durations() {
        let m = AcousticModel::new(tiny_cfg(), 1).unwrap();
        let s = seq(5);
        let durs = [10, 10, 10, 10, 10];
        let out = m.infer(&s, Some(&durs)).unwrap();
        assert_eq!(out.mel.shape(), &[50, 8]);
        assert_eq!(out.f0_residual.len(), 50);
        assert_eq!(out.vuv_logit.len(), 50);
        assert_eq!(out.durations_log.len(), 5);
        let free = m.infer(&s, None).unwrap();
        let total: usize = free.durations_log.iter().map(|&l| rounded_duration(l)).sum();
        assert_eq!(free.mel.rows(), total);
    }

    #[test]
    fn residual_shortcut() {
        assert_eq!(f0_hz(60.0, 0.0), crate::score::midi_to_hz(60).unwrap());
        let up = f0_hz(60.0, 12.0);
        assert!((up - 2.0 * crate::score::midi_to_hz(60).unwrap()).abs() < 1e-9);
        let st = stats(8);
        let out = AcousticOutput {
            mel: Tensor::zeros(&[2, 8]),
            f0_residual: vec![0.0, 0.0],
            vuv_logit: vec![3.0, -3.0],
            durations_log: vec![],
            durations: vec![],
            note_pitch: vec![69, 69],
        };
        let f = out.to_features(&st, 0.005, 0.02).unwrap();
        assert_eq!(f.f0, vec![440.0, 0.0]);
        assert_eq!(f.vuv, vec![1.0, 0.0]);
        assert_eq!(f.mel.row(0)[0], -4.0);
    }

    fn loss_parts(out: &AcousticVars, g: &mut Graph, target: &AcousticFeatures, np: &[usize], dur: &[usize]) -> [f64; 4] {
        let l = reconstruction_loss(g, out, target, np, dur, &stats(target.n_mels())).unwrap();
        [l.mel_l1, l.f0_l2_voiced, l.vuv_bce, l.dur_mse_log].map(|v| g.value(v).item())
    }

    fn const_vars(g: &mut Graph, mel: Tensor, res: Vec<f64>, logit: Vec<f64>, logd: Vec<f64>) -> AcousticVars {
        let t = res.len();
        let n = logd.len();
        AcousticVars {
            mel: g.constant(mel),
            f0_residual: g.constant(Tensor::new(&[t, 1], res)),
            vuv_logit: g.constant(Tensor::new(&[t, 1], logit)),
            log_durations: g.constant(Tensor::new(&[n, 1], logd)),
        }
    }

    #[test]
    fn mel_l1_hand_case() {
        let mut g = Graph::new();
        let out = const_vars(&mut g, Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]), vec![0.0; 2], vec![0.0; 2], vec![0.0]);
        let target = AcousticFeatures {
            mel: Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0]]),
            f0: vec![0.0; 2],
            vuv: vec![0.0; 2],
            hop_s: 0.005,
            window_s: 0.02,
        };
        let parts = loss_parts(&out, &mut g, &target, &[60, 60], &[1]);
        assert!((parts[0] - 0.25).abs() < 1e-12);
        assert_eq!(parts[1], 0.0);
        assert_eq!(parts[3], 0.0);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let st = stats(2);
        let np = [62usize, 65, 65];
        let res = vec![0.3, -0.2, 0.0];
        let f0z: Vec<f64> = np.iter().zip(&res).map(|(&p, r)| (p as f64 + r - st.f0_mean) / st.f0_std).collect();
        let target = AcousticFeatures {
            mel: Tensor::from_fn(&[3, 2], |i| i as f64),
            f0: vec![f0z[0], f0z[1], 0.0],
            vuv: vec![1.0, 1.0, 0.0],
            hop_s: 0.005,
            window_s: 0.02,
        };
        let mut g = Graph::new();
        // large logits of the right sign drive BCE to ~0
        let out = const_vars(&mut g, target.mel.clone(), res, vec![60.0, 60.0, -60.0], vec![2f64.ln(), 1f64.ln()]);
        let parts = loss_parts(&out, &mut g, &target, &np, &[2, 1]);
        assert_eq!(parts[0], 0.0);
        assert!(parts[1] < 1e-24);
        assert!(parts[2] < 1e-20);
        assert_eq!(parts[3], 0.0);
    }

    #[test]
    fn unvoiced_target_ignores_f0() {
        let target = AcousticFeatures { mel: Tensor::zeros(&[2, 2]), f0: vec![0.0; 2], vuv: vec![0.0; 2], hop_s: 0.005, window_s: 0.02 };
        let mut g = Graph::new();
        let out = const_vars(&mut g, Tensor::zeros(&[2, 2]), vec![50.0, -9.0], vec![0.0; 2], vec![0.0]);
        assert_eq!(loss_parts(&out, &mut g, &target, &[60, 61], &[2])[1], 0.0);
    }

    #[test]
    fn frame_mismatch_is_contract_error() {
        let target = AcousticFeatures { mel: Tensor::zeros(&[3, 2]), f0: vec![0.0; 3], vuv: vec![0.0; 3], hop_s: 0.005, window_s: 0.02 };
        let mut g = Graph::new();
        let out = const_vars(&mut g, Tensor::zeros(&[2, 2]), vec![0.0; 2], vec![0.0; 2], vec![0.0]);
        assert!(matches!(reconstruction_loss(&mut g, &out, &target, &[60, 60], &[2], &stats(2)), Err(Error::Contract(_))));
    }

    #[test]
    fn batch_order_does_not_change_items() {
        let m = AcousticModel::new(tiny_cfg(), 5).unwrap();
        let (a, b) = (seq(4), seq(6));
        let ab = [m.infer(&a, None).unwrap(), m.infer(&b, None).unwrap()];
        let ba = [m.infer(&b, None).unwrap(), m.infer(&a, None).unwrap()];
        assert_eq!(ab[0], ba[1]);
        assert_eq!(ab[1], ba[0]);
    }

    proptest! {
        #[test]
        fn regulated_length_and_multiset(durs in proptest::collection::vec(1usize..6, 1..12)) {
            let n = durs.len();
            let h = Tensor::from_fn(&[n, 2], |i| (i / 2) as f64 + if i % 2 == 1 { 0.5 } else { 0.0 });
            let out = length_regulate(&h, &durs).unwrap();
            prop_assert_eq!(out.rows(), durs.iter().sum::<usize>());
            let mut got: Vec<(u64, u64)> = (0..out.rows()).map(|r| (out.at2(r, 0).to_bits(), out.at2(r, 1).to_bits())).collect();
            let mut want: Vec<(u64, u64)> = durs.iter().enumerate()
                .flat_map(|(i, &d)| std::iter::repeat_n((h.at2(i, 0).to_bits(), h.at2(i, 1).to_bits()), d))
                .collect();
            got.sort();
            want.sort();
            prop_assert_eq!(got, want);
        }
    }
}
