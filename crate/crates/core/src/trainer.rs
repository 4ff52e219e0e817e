//! Two-stage training: the acoustic model with sub-band mel discriminators,
//! then the vocoder with multi-length waveform discriminators.
//!
//! All randomness is drawn from `rng_stream(seed, step, purpose, item)`, so a
//! step depends only on the seed, the step index and the parameters. That is
//! what makes resumed runs match uninterrupted ones.

use std::io::Write;
use std::path::Path;

use cantus_nn::spectral::StftConfig;
use cantus_nn::{par, Bound, GradSet, Graph, Optimizer, OptimizerKind, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::{expand, reconstruction_loss, AcousticModel, AcousticModelConfig, AcousticVars, ReconWeights};
use crate::blocks::rng_stream;
use crate::checkpoint::Checkpoint;
use crate::dsp::{AcousticFeatures, NormStats};
use crate::error::{Error, Result};
use crate::gan;
use crate::ml_gan::{CropPlan, CropSpec, MlDiscriminatorConfig, MlGan, MlGanConfig};
use crate::score::{Lexicon, ScoreSequence};
use crate::sf_gan::{SfGan, SfGanConfig};
use crate::vocoder::{default_resolutions, multires_stft_loss, standard_noise, ConditioningFeatures, Vocoder, VocoderConfig};

const PURPOSE_BATCH: u8 = 1;
const PURPOSE_DROPOUT: u8 = 2;
const PURPOSE_WINDOW_G: u8 = 3;
const PURPOSE_WINDOW_REAL: u8 = 4;
const PURPOSE_WINDOW_FAKE: u8 = 5;
const PURPOSE_SEGMENT: u8 = 6;
const PURPOSE_NOISE: u8 = 7;
const PURPOSE_CROP: u8 = 8;

const EMA_DECAY: f64 = 0.98;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcousticTrainSpec {
    pub steps: u64,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    /// Noam schedule: `scale * d_model^-0.5 * min(s^-0.5, s * warmup^-1.5)`, `s = step + 1`.
    pub d_model: usize,
    pub warmup_steps: u64,
    pub lr_scale: f64,
    pub adv_start_step: u64,
    pub adv_weight: f64,
    pub recon: ReconWeights,
    pub grad_clip: f64,
    pub checkpoint_every: u64,
    pub sf_gan: SfGanConfig,
}

impl Default for AcousticTrainSpec {
    fn default() -> Self {
        Self::full()
    }
}

impl AcousticTrainSpec {
    pub fn full() -> Self {
        Self {
            steps: 60_000,
            batch: 32,
            optimizer: OptimizerKind::Adam { beta1: 0.9, beta2: 0.98, eps: 1e-9 },
            d_model: 384,
            warmup_steps: 4000,
            lr_scale: 1.0,
            adv_start_step: 10_000,
            adv_weight: 4.0,
            recon: ReconWeights::default(),
            grad_clip: 1.0,
            checkpoint_every: 1000,
            sf_gan: SfGanConfig::default(),
        }
    }

    /// Desk-scale: gate at 100 steps, short warm-up. The adversarial weight is
    /// lowered because a barely-trained generator cannot absorb the full-size one.
    pub fn tiny() -> Self {
        Self { steps: 2000, batch: 4, warmup_steps: 200, adv_start_step: 100, adv_weight: 0.1, ..Self::full() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.adv_start_step >= self.steps {
            return Err(Error::Config(format!("adv_start_step {} must precede steps {}", self.adv_start_step, self.steps)));
        }
        if self.batch == 0 || self.d_model == 0 || self.warmup_steps == 0 || self.grad_clip <= 0.0 {
            return Err(Error::Config("batch, d_model, warmup and grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at_step(&self, step: u64) -> f64 {
        let s = (step + 1) as f64;
        let w = self.warmup_steps as f64;
        self.lr_scale * (self.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }

    pub fn adversarial_gate(&self, step: u64) -> bool {
        step >= self.adv_start_step
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocoderTrainSpec {
    pub steps: u64,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub lr0: f64,
    pub halving_period: u64,
    pub adv_start_step: u64,
    pub adv_weight: f64,
    pub grad_clip: f64,
    pub checkpoint_every: u64,
    /// Frames per training segment.
    pub segment_frames: usize,
    pub ml_gan: MlGanConfig,
}

impl Default for VocoderTrainSpec {
    fn default() -> Self {
        Self::full()
    }
}

impl VocoderTrainSpec {
    pub fn full() -> Self {
        Self {
            steps: 400_000,
            batch: 4,
            optimizer: OptimizerKind::Radam { beta1: 0.9, beta2: 0.999, eps: 1e-6 },
            lr0: 1e-4,
            halving_period: 200_000,
            adv_start_step: 100_000,
            adv_weight: 4.0,
            grad_clip: 1.0,
            checkpoint_every: 1000,
            // 1 s, so every crop length applies.
            segment_frames: 200,
            ml_gan: MlGanConfig::full(48_000),
        }
    }

    /// Desk-scale: 10-frame segments, crops scaled to 600..2400 samples,
    /// narrow discriminators, faster schedule.
    pub fn tiny() -> Self {
        Self {
            steps: 5000,
            batch: 1,
            lr0: 2e-3,
            halving_period: 2000,
            adv_start_step: 1000,
            segment_frames: 10,
            ml_gan: MlGanConfig {
                crops: CropSpec { lengths: vec![600, 1200, 1800, 2400] },
                discriminator: MlDiscriminatorConfig { channels: 8, ..MlDiscriminatorConfig::default() },
            },
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.adv_start_step >= self.steps {
            return Err(Error::Config(format!("adv_start_step {} must precede steps {}", self.adv_start_step, self.steps)));
        }
        if self.batch == 0 || self.halving_period == 0 || self.segment_frames == 0 || self.lr0 <= 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::Config("batch, halving period, segment, lr0 and grad_clip must be positive".into()));
        }
        self.ml_gan.crops.validate()
    }

    pub fn lr_at_step(&self, step: u64) -> f64 {
        self.lr0 * 0.5f64.powi((step / self.halving_period) as i32)
    }

    pub fn adversarial_gate(&self, step: u64) -> bool {
        step >= self.adv_start_step
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Number of completed steps.
    pub step: u64,
    pub seed: u64,
    pub ema_loss: Option<f64>,
}

impl TrainState {
    fn new(seed: u64) -> Self {
        Self { step: 0, seed, ema_loss: None }
    }

    fn advance(&mut self, loss: f64) {
        self.ema_loss = Some(match self.ema_loss {
            Some(e) => EMA_DECAY * e + (1.0 - EMA_DECAY) * loss,
            None => loss,
        });
        self.step += 1;
    }
}

/// One JSON line per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage: String,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub adv_on: bool,
    pub adv_g: f64,
    pub adv_d: Vec<f64>,
    #[serde(flatten)]
    pub terms: std::collections::BTreeMap<String, f64>,
}

pub fn write_metrics(out: &mut dyn Write, m: &StepMetrics) -> Result<()> {
    serde_json::to_writer(&mut *out, m)?;
    out.write_all(b"\n")?;
    Ok(())
}

fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    if batch >= n {
        return (0..n).collect();
    }
    let mut rng = rng_stream(seed, step, PURPOSE_BATCH, 0);
    rand::seq::index::sample(&mut rng, n, batch).into_vec()
}

fn sum_grads(items: Vec<GradSet>, store: &ParamStore) -> GradSet {
    GradSet::sum_ordered(items).unwrap_or_else(|| GradSet::zeros_like(store))
}

/// Training pair for the acoustic model.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticExample {
    pub name: String,
    pub seq: ScoreSequence,
    /// Ground-truth frames per phoneme.
    pub durations: Vec<usize>,
    /// Normalized targets.
    pub target: AcousticFeatures,
    pub note_pitch: Vec<usize>,
}

impl AcousticExample {
    pub fn new(name: &str, seq: ScoreSequence, durations: Vec<usize>, features: &AcousticFeatures, stats: &NormStats) -> Result<Self> {
        seq.validate()?;
        if durations.len() != seq.len() {
            return Err(Error::Data(format!("{name}: {} durations for {} phonemes", durations.len(), seq.len())));
        }
        let total: usize = durations.iter().sum();
        if total != features.n_frames() || durations.contains(&0) {
            return Err(Error::Data(format!("{name}: durations cover {total} frames, features have {}", features.n_frames())));
        }
        let note_pitch = expand(&seq.pitch_ids, &durations);
        Ok(Self { name: name.into(), target: stats.normalize(features)?, seq, durations, note_pitch })
    }
}

/// Per-utterance generator objective of the acoustic model.
pub struct AcousticObjective<'a> {
    pub model: &'a AcousticModel,
    pub sf: &'a SfGan,
    pub stats: &'a NormStats,
    pub recon: ReconWeights,
    pub adv_weight: f64,
}

pub struct AcousticItemLoss {
    pub total: Var,
    pub vars: AcousticVars,
    /// mel L1, F0 L2, V/UV BCE, duration MSE.
    pub terms: [Var; 4],
    pub adv: Option<Var>,
}

impl AcousticObjective<'_> {
    pub fn loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        ex: &AcousticExample,
        gate: bool,
        dropout: Option<&mut ChaCha8Rng>,
        windows: &mut ChaCha8Rng,
    ) -> Result<AcousticItemLoss> {
        let vars = self.model.forward(g, p, &ex.seq, &ex.durations, dropout)?;
        let r = reconstruction_loss(g, &vars, &ex.target, &ex.note_pitch, &ex.durations, self.stats)?;
        let mut total = r.weighted_sum(g, &self.recon);
        let adv = if gate {
            let a = self.sf.generator_loss(g, vars.mel, windows)?;
            let w = g.scale(a, self.adv_weight);
            total = g.add(total, w);
            Some(a)
        } else {
            None
        };
        Ok(AcousticItemLoss { total, vars, terms: [r.mel_l1, r.f0_l2_voiced, r.vuv_bce, r.dur_mse_log], adv })
    }
}

/// Everything needed to rebuild and run a trained acoustic model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcousticBundle {
    pub model: AcousticModelConfig,
    pub spec: AcousticTrainSpec,
    pub stats: NormStats,
    pub lexicon: Lexicon,
    pub hop_s: f64,
    pub window_s: f64,
}

pub struct AcousticTrainer {
    pub bundle: AcousticBundle,
    pub model: AcousticModel,
    pub sf: SfGan,
    pub opt_g: Optimizer,
    pub opt_d: Vec<Optimizer>,
    pub state: TrainState,
}

struct AcousticItemOut {
    grads: GradSet,
    loss: f64,
    terms: [f64; 4],
    adv: f64,
    pred_mel: Tensor,
}

impl AcousticTrainer {
    pub fn new(bundle: AcousticBundle, seed: u64) -> Result<Self> {
        bundle.spec.validate()?;
        if bundle.model.n_phonemes != bundle.lexicon.vocab_size() {
            return Err(Error::Config(format!("model has {} phonemes, lexicon {}", bundle.model.n_phonemes, bundle.lexicon.vocab_size())));
        }
        let model = AcousticModel::new(bundle.model.clone(), seed)?;
        let sf = SfGan::new(bundle.spec.sf_gan.clone(), bundle.model.n_mels, seed ^ 0x5F5F)?;
        let opt_g = Optimizer::new(bundle.spec.optimizer, &model.params);
        let opt_d = sf.stores.iter().map(|s| Optimizer::new(bundle.spec.optimizer, s)).collect();
        Ok(Self { bundle, model, sf, opt_g, opt_d, state: TrainState::new(seed) })
    }

    pub fn objective(&self) -> AcousticObjective<'_> {
        AcousticObjective {
            model: &self.model,
            sf: &self.sf,
            stats: &self.bundle.stats,
            recon: self.bundle.spec.recon,
            adv_weight: self.bundle.spec.adv_weight,
        }
    }

    /// Discriminator parameter checksums, one per band.
    pub fn discriminator_checksums(&self) -> Vec<u64> {
        self.sf.stores.iter().map(|s| s.checksum()).collect()
    }

    pub fn step(&mut self, data: &[AcousticExample]) -> Result<StepMetrics> {
        if data.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let spec = &self.bundle.spec;
        let (step, seed) = (self.state.step, self.state.seed);
        let gate = spec.adversarial_gate(step);
        let lr = spec.lr_at_step(step);
        let idx = batch_indices(data.len(), spec.batch, seed, step);
        let scale = 1.0 / idx.len() as f64;
        let obj = self.objective();
        let outs = par::map_indexed(idx.len(), |k| -> Result<AcousticItemOut> {
            let ex = &data[idx[k]];
            let mut g = Graph::new();
            let p = self.model.params.bind(&mut g);
            let mut drop = rng_stream(seed, step, PURPOSE_DROPOUT, k as u32);
            let mut win = rng_stream(seed, step, PURPOSE_WINDOW_G, k as u32);
            let l = obj.loss(&mut g, &p, ex, gate, Some(&mut drop), &mut win)?;
            let scaled = g.scale(l.total, scale);
            let grads = p.grads(&g.backward(scaled), &self.model.params);
            Ok(AcousticItemOut {
                grads,
                loss: g.value(l.total).item(),
                terms: l.terms.map(|t| g.value(t).item()),
                adv: l.adv.map_or(0.0, |a| g.value(a).item()),
                pred_mel: g.value(l.vars.mel).clone(),
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let mut grads = sum_grads(outs.iter().map(|o| o.grads.clone()).collect(), &self.model.params);
        let grad_norm = grads.clip_global_norm(spec.grad_clip);
        self.opt_g.step(&mut self.model.params, &grads, lr);

        let adv_d = if gate { self.discriminator_step(data, &idx, &outs, lr)? } else { Vec::new() };

        let mean = |f: &dyn Fn(&AcousticItemOut) -> f64| outs.iter().map(f).sum::<f64>() * scale;
        let loss = mean(&|o| o.loss);
        let names = ["mel_l1", "f0_l2", "vuv_bce", "dur_mse_log"];
        let terms = names.iter().enumerate().map(|(i, n)| (n.to_string(), mean(&|o| o.terms[i]))).collect();
        let m = StepMetrics { stage: "acoustic".into(), step, lr, loss, grad_norm, adv_on: gate, adv_g: mean(&|o| o.adv), adv_d, terms };
        self.state.advance(loss);
        Ok(m)
    }

    fn discriminator_step(&mut self, data: &[AcousticExample], idx: &[usize], outs: &[AcousticItemOut], lr: f64) -> Result<Vec<f64>> {
        let (step, seed) = (self.state.step, self.state.seed);
        let nb = self.sf.n_bands();
        let b = idx.len();
        let scale = 1.0 / b as f64;
        let sf = &self.sf;
        let per = par::map_indexed(nb * b, |j| {
            let (band, k) = (j / b, j % b);
            let mut g = Graph::new();
            let p = sf.stores[band].bind(&mut g);
            let real = g.constant(data[idx[k]].target.mel.clone());
            let fake = g.constant(outs[k].pred_mel.clone());
            let item = (k * nb + band) as u32;
            let sr = sf.score_window(&mut g, &p, band, real, &mut rng_stream(seed, step, PURPOSE_WINDOW_REAL, item));
            let sfk = sf.score_window(&mut g, &p, band, fake, &mut rng_stream(seed, step, PURPOSE_WINDOW_FAKE, item));
            let l = gan::discriminator_term(&mut g, sr, sfk);
            let scaled = g.scale(l, scale);
            (p.grads(&g.backward(scaled), &sf.stores[band]), g.value(l).item())
        });
        let mut per = per.into_iter();
        let mut losses = Vec::with_capacity(nb);
        for band in 0..nb {
            let chunk: Vec<_> = per.by_ref().take(b).collect();
            losses.push(chunk.iter().map(|c| c.1).sum::<f64>() * scale);
            let mut grads = sum_grads(chunk.into_iter().map(|c| c.0).collect(), &self.sf.stores[band]);
            grads.clip_global_norm(self.bundle.spec.grad_clip);
            self.opt_d[band].step(&mut self.sf.stores[band], &grads, lr);
        }
        Ok(losses)
    }

    /// Runs until `state.step == until`, logging and checkpointing on the way.
    pub fn train(
        &mut self,
        data: &[AcousticExample],
        until: u64,
        checkpoint: Option<&Path>,
        mut log: Option<&mut dyn Write>,
    ) -> Result<Vec<StepMetrics>> {
        let mut all = Vec::new();
        while self.state.step < until {
            let m = self.step(data)?;
            if let Some(w) = log.as_deref_mut() {
                write_metrics(w, &m)?;
            }
            all.push(m);
            if let Some(path) = checkpoint {
                let every = self.bundle.spec.checkpoint_every;
                if every > 0 && self.state.step.is_multiple_of(every) || self.state.step == until {
                    self.checkpoint()?.write(path)?;
                }
            }
        }
        Ok(all)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("acoustic", self.state.step, &self.bundle, &self.state)?;
        ck.put_store("model", &self.model.params);
        ck.put_optimizer("opt_g", &self.opt_g);
        for (i, (s, o)) in self.sf.stores.iter().zip(&self.opt_d).enumerate() {
            ck.put_store(&format!("disc{i}"), s);
            ck.put_optimizer(&format!("opt_d{i}"), o);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("acoustic")?;
        let bundle: AcousticBundle = ck.config()?;
        let state: TrainState = ck.state()?;
        let mut t = Self::new(bundle, state.seed)?;
        ck.load_store("model", &mut t.model.params)?;
        ck.load_optimizer("opt_g", &mut t.opt_g)?;
        for i in 0..t.sf.n_bands() {
            ck.load_store(&format!("disc{i}"), &mut t.sf.stores[i])?;
            ck.load_optimizer(&format!("opt_d{i}"), &mut t.opt_d[i])?;
        }
        t.state = state;
        Ok(t)
    }
}

/// Vocoder training pair: conditioning frames and the matching waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct VocoderExample {
    pub name: String,
    pub cond: ConditioningFeatures,
    pub wave: Vec<f64>,
}

impl VocoderExample {
    pub fn new(name: &str, cond: ConditioningFeatures, wave: Vec<f64>, hop: usize) -> Result<Self> {
        if wave.len() != cond.n_frames() * hop {
            return Err(Error::Data(format!("{name}: {} samples for {} frames at hop {hop}", wave.len(), cond.n_frames())));
        }
        Ok(Self { name: name.into(), cond, wave })
    }
}

/// A training segment: frames `[frame_start, frame_start + n_frames)` with its noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub frame_start: usize,
    pub n_frames: usize,
    pub noise: Vec<f64>,
}

/// Per-segment generator objective of the vocoder.
pub struct VocoderObjective<'a> {
    pub vocoder: &'a Vocoder,
    pub ml: &'a MlGan,
    pub resolutions: &'a [StftConfig],
    pub adv_weight: f64,
}

pub struct VocoderItemLoss {
    pub total: Var,
    pub stft: Var,
    pub adv: Option<Var>,
    pub pred: Var,
}

impl VocoderObjective<'_> {
    pub fn loss(&self, g: &mut Graph, p: &Bound, ex: &VocoderExample, seg: &Segment, plan: Option<&CropPlan>) -> Result<VocoderItemLoss> {
        let hop = self.vocoder.cfg.hop_samples;
        let aux = self.vocoder.upsample(g, p, &ex.cond, seg.frame_start, seg.n_frames)?;
        let src = g.constant(self.vocoder.source(&ex.cond, seg.frame_start, seg.n_frames, &seg.noise)?);
        let pred = self.vocoder.forward(g, p, src, aux)?;
        let target = &ex.wave[seg.frame_start * hop..(seg.frame_start + seg.n_frames) * hop];
        let stft = multires_stft_loss(g, pred, target, self.resolutions)?;
        let mut total = stft;
        let mut adv = None;
        if let Some(plan) = plan {
            if let Some(a) = self.ml.generator_loss(g, pred, plan)? {
                let w = g.scale(a, self.adv_weight);
                total = g.add(total, w);
                adv = Some(a);
            }
        }
        Ok(VocoderItemLoss { total, stft, adv, pred })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocoderBundle {
    pub vocoder: VocoderConfig,
    pub spec: VocoderTrainSpec,
    pub stats: NormStats,
}

pub struct VocoderTrainer {
    pub bundle: VocoderBundle,
    pub vocoder: Vocoder,
    pub ml: MlGan,
    pub opt_g: Optimizer,
    pub opt_d: Vec<Optimizer>,
    pub state: TrainState,
    resolutions: Vec<StftConfig>,
}

struct VocoderItemOut {
    grads: GradSet,
    loss: f64,
    stft: f64,
    adv: f64,
    pred: Vec<f64>,
    target: Vec<f64>,
    plan: Option<CropPlan>,
}

impl VocoderTrainer {
    pub fn new(bundle: VocoderBundle, seed: u64) -> Result<Self> {
        bundle.spec.validate()?;
        let vocoder = Vocoder::new(bundle.vocoder.clone(), seed)?;
        let ml = MlGan::new(bundle.spec.ml_gan.clone(), seed ^ 0x4D4C)?;
        let opt_g = Optimizer::new(bundle.spec.optimizer, &vocoder.params);
        let opt_d = ml.stores.iter().map(|s| Optimizer::new(bundle.spec.optimizer, s)).collect();
        Ok(Self { bundle, vocoder, ml, opt_g, opt_d, state: TrainState::new(seed), resolutions: default_resolutions() })
    }

    pub fn objective(&self) -> VocoderObjective<'_> {
        VocoderObjective { vocoder: &self.vocoder, ml: &self.ml, resolutions: &self.resolutions, adv_weight: self.bundle.spec.adv_weight }
    }

    pub fn discriminator_checksums(&self) -> Vec<u64> {
        self.ml.stores.iter().map(|s| s.checksum()).collect()
    }

    /// Segment for batch slot `k` of `step`: utterance index and frames.
    pub fn sample_segment(&self, data: &[VocoderExample], step: u64, k: usize) -> (usize, Segment) {
        let mut rng = rng_stream(self.state.seed, step, PURPOSE_SEGMENT, k as u32);
        let u = rng.random_range(0..data.len());
        let t = data[u].cond.n_frames();
        let n = self.bundle.spec.segment_frames.min(t);
        let start = rng.random_range(0..=t - n);
        let mut nrng = rng_stream(self.state.seed, step, PURPOSE_NOISE, k as u32);
        let noise = standard_noise(n * self.vocoder.cfg.hop_samples, &mut nrng);
        (u, Segment { frame_start: start, n_frames: n, noise })
    }

    pub fn step(&mut self, data: &[VocoderExample]) -> Result<StepMetrics> {
        if data.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let spec = &self.bundle.spec;
        let (step, seed) = (self.state.step, self.state.seed);
        let gate = spec.adversarial_gate(step);
        let lr = spec.lr_at_step(step);
        let b = spec.batch;
        let scale = 1.0 / b as f64;
        let hop = self.vocoder.cfg.hop_samples;
        let obj = self.objective();
        let outs = par::map_indexed(b, |k| -> Result<VocoderItemOut> {
            let (u, seg) = self.sample_segment(data, step, k);
            let ex = &data[u];
            let len = seg.n_frames * hop;
            let plan = gate.then(|| self.ml.plan(len, &mut rng_stream(seed, step, PURPOSE_CROP, k as u32)));
            let mut g = Graph::new();
            let p = self.vocoder.params.bind(&mut g);
            let l = obj.loss(&mut g, &p, ex, &seg, plan.as_ref())?;
            let scaled = g.scale(l.total, scale);
            let grads = p.grads(&g.backward(scaled), &self.vocoder.params);
            let a = seg.frame_start * hop;
            Ok(VocoderItemOut {
                grads,
                loss: g.value(l.total).item(),
                stft: g.value(l.stft).item(),
                adv: l.adv.map_or(0.0, |a| g.value(a).item()),
                pred: g.value(l.pred).data().to_vec(),
                target: ex.wave[a..a + len].to_vec(),
                plan,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let mut grads = sum_grads(outs.iter().map(|o| o.grads.clone()).collect(), &self.vocoder.params);
        let grad_norm = grads.clip_global_norm(spec.grad_clip);
        self.opt_g.step(&mut self.vocoder.params, &grads, lr);

        let adv_d = if gate { self.discriminator_step(&outs, lr) } else { Vec::new() };
        let mean = |f: &dyn Fn(&VocoderItemOut) -> f64| outs.iter().map(f).sum::<f64>() * scale;
        let loss = mean(&|o| o.loss);
        let m = StepMetrics {
            stage: "vocoder".into(),
            step,
            lr,
            loss,
            grad_norm,
            adv_on: gate,
            adv_g: mean(&|o| o.adv),
            adv_d,
            terms: [("multires_stft".to_string(), mean(&|o| o.stft))].into_iter().collect(),
        };
        self.state.advance(loss);
        Ok(m)
    }

    /// Updates only discriminators whose crop fit this step; others keep their parameters.
    fn discriminator_step(&mut self, outs: &[VocoderItemOut], lr: f64) -> Vec<f64> {
        let nd = self.ml.n_discriminators();
        let b = outs.len();
        let ml = &self.ml;
        let per = par::map_indexed(nd * b, |j| {
            let (d, k) = (j / b, j % b);
            let o = &outs[k];
            let start = o.plan.as_ref().and_then(|p| p.starts[d])?;
            let mut g = Graph::new();
            let p = ml.stores[d].bind(&mut g);
            let real = g.constant(Tensor::new(&[o.target.len()], o.target.clone()));
            let fake = g.constant(Tensor::new(&[o.pred.len()], o.pred.clone()));
            let sr = ml.score(&mut g, &p, d, real, start);
            let sf = ml.score(&mut g, &p, d, fake, start);
            let l = gan::discriminator_term(&mut g, sr, sf);
            Some((p.grads(&g.backward(l), &ml.stores[d]), g.value(l).item()))
        });
        let mut per = per.into_iter();
        let mut losses = Vec::with_capacity(nd);
        for d in 0..nd {
            let active: Vec<_> = per.by_ref().take(b).flatten().collect();
            if active.is_empty() {
                losses.push(0.0);
                continue;
            }
            let inv = 1.0 / active.len() as f64;
            losses.push(active.iter().map(|a| a.1).sum::<f64>() * inv);
            let mut grads = sum_grads(active.into_iter().map(|a| a.0).collect(), &self.ml.stores[d]);
            grads.scale(inv);
            grads.clip_global_norm(self.bundle.spec.grad_clip);
            self.opt_d[d].step(&mut self.ml.stores[d], &grads, lr);
        }
        losses
    }

    pub fn train(
        &mut self,
        data: &[VocoderExample],
        until: u64,
        checkpoint: Option<&Path>,
        mut log: Option<&mut dyn Write>,
    ) -> Result<Vec<StepMetrics>> {
        let mut all = Vec::new();
        while self.state.step < until {
            let m = self.step(data)?;
            if let Some(w) = log.as_deref_mut() {
                write_metrics(w, &m)?;
            }
            all.push(m);
            if let Some(path) = checkpoint {
                let every = self.bundle.spec.checkpoint_every;
                if every > 0 && self.state.step.is_multiple_of(every) || self.state.step == until {
                    self.checkpoint()?.write(path)?;
                }
            }
        }
        Ok(all)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("vocoder", self.state.step, &self.bundle, &self.state)?;
        ck.put_store("model", &self.vocoder.params);
        ck.put_optimizer("opt_g", &self.opt_g);
        for (i, (s, o)) in self.ml.stores.iter().zip(&self.opt_d).enumerate() {
            ck.put_store(&format!("disc{i}"), s);
            ck.put_optimizer(&format!("opt_d{i}"), o);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("vocoder")?;
        let bundle: VocoderBundle = ck.config()?;
        let state: TrainState = ck.state()?;
        let mut t = Self::new(bundle, state.seed)?;
        ck.load_store("model", &mut t.vocoder.params)?;
        ck.load_optimizer("opt_g", &mut t.opt_g)?;
        for i in 0..t.ml.n_discriminators() {
            ck.load_store(&format!("disc{i}"), &mut t.ml.stores[i])?;
            ck.load_optimizer(&format!("opt_d{i}"), &mut t.opt_d[i])?;
        }
        t.state = state;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, SyntheticCorpusSpec};
    use crate::dsp::{default_extractor, extract_features, YinConfig, YinTracker};
    use crate::score::encode_score;
    use crate::sf_gan::SfDiscriminatorConfig;

    #[test]
    fn vocoder_lr_halves() {
        let s = VocoderTrainSpec::full();
        assert_eq!(s.lr_at_step(0), 1e-4);
        assert_eq!(s.lr_at_step(199_999), 1e-4);
        assert_eq!(s.lr_at_step(200_000), 5e-5);
        assert_eq!(s.lr_at_step(400_000), 2.5e-5);
    }

    #[test]
    fn noam_peaks_at_warmup() {
        let s = AcousticTrainSpec::full();
        let peak = s.lr_at_step(3999);
        assert!((peak - 384f64.powf(-0.5) * 4000f64.powf(-0.5)).abs() < 1e-15);
        assert!(s.lr_at_step(100) < peak && s.lr_at_step(20_000) < peak);
        assert!(s.lr_at_step(0) > 0.0);
    }

    #[test]
    fn gates() {
        let a = AcousticTrainSpec::full();
        assert!(!a.adversarial_gate(9999) && a.adversarial_gate(10_000));
        let v = VocoderTrainSpec::full();
        assert!(!v.adversarial_gate(99_999) && v.adversarial_gate(100_000));
        let z = AcousticTrainSpec { adv_start_step: 0, ..AcousticTrainSpec::tiny() };
        assert!(z.adversarial_gate(0));
        assert!(AcousticTrainSpec { adv_start_step: 2000, ..AcousticTrainSpec::tiny() }.validate().is_err());
    }

    pub(crate) fn tiny_setup(n: usize) -> (AcousticBundle, Vec<AcousticExample>) {
        let spec = SyntheticCorpusSpec {
            n_utterances: n,
            notes_per_utterance: (2, 2),
            // Consonants put energy in the upper mel bins, which vowels alone leave at the floor.
            phonemes_per_note: (2, 2),
            note_values: vec!["1/8".parse().unwrap()],
            seed: 3,
            ..Default::default()
        };
        let (lex, utts) = generate_corpus(&spec).unwrap();
        let mel = default_extractor().unwrap();
        let yin = YinTracker::new(YinConfig::default());
        let feats: Vec<_> = utts.iter().map(|u| extract_features(&u.wave, &mel, &yin).unwrap()).collect();
        let stats = NormStats::compute(feats.iter()).unwrap();
        let mut model = AcousticModelConfig::tiny(lex.vocab_size());
        model.hidden = 16;
        model.conv_filter = 32;
        model.n_encoder_blocks = 1;
        model.n_decoder_blocks = 1;
        model.duration_channels = 16;
        let mut train = AcousticTrainSpec::tiny();
        train.adv_start_step = 2;
        train.steps = 10;
        train.sf_gan.discriminator = SfDiscriminatorConfig { channels: 4, ..Default::default() };
        let ex = utts
            .iter()
            .zip(&feats)
            .map(|(u, f)| {
                let seq = encode_score(&u.score, &lex, 0.005).unwrap();
                AcousticExample::new(&u.name, seq, u.durations.clone(), f, &stats).unwrap()
            })
            .collect();
        let bundle = AcousticBundle { model, spec: train, stats, lexicon: lex, hop_s: 0.005, window_s: 0.02 };
        (bundle, ex)
    }

    #[test]
    fn alignment_mismatch_names_utterance() {
        let (b, ex) = tiny_setup(1);
        let mut d = ex[0].durations.clone();
        d[0] += 1;
        let raw = b.stats.denormalize(&ex[0].target).unwrap();
        match AcousticExample::new("uttX", ex[0].seq.clone(), d, &raw, &b.stats) {
            Err(Error::Data(m)) => assert!(m.contains("uttX")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn acoustic_gate_freezes_then_updates_discriminators() {
        let (b, ex) = tiny_setup(2);
        let mut t = AcousticTrainer::new(b, 1).unwrap();
        let d0 = t.discriminator_checksums();
        let g0 = t.model.params.checksum();
        for _ in 0..2 {
            let m = t.step(&ex).unwrap();
            assert!(!m.adv_on && m.adv_g == 0.0 && m.adv_d.is_empty());
        }
        assert_eq!(t.discriminator_checksums(), d0);
        assert_ne!(t.model.params.checksum(), g0);
        let m = t.step(&ex).unwrap();
        assert!(m.adv_on && m.adv_g > 0.0);
        let d1 = t.discriminator_checksums();
        assert!(d1.iter().zip(&d0).all(|(a, b)| a != b));
    }

    #[test]
    fn acoustic_resume_matches() {
        let (b, ex) = tiny_setup(2);
        let mut full = AcousticTrainer::new(b.clone(), 4).unwrap();
        full.train(&ex, 4, None, None).unwrap();
        let mut first = AcousticTrainer::new(b, 4).unwrap();
        first.train(&ex, 2, None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        first.checkpoint().unwrap().write(&path).unwrap();
        let mut resumed = AcousticTrainer::from_checkpoint(&Checkpoint::read(&path).unwrap()).unwrap();
        resumed.train(&ex, 4, None, None).unwrap();
        assert_eq!(resumed.model.params.checksum(), full.model.params.checksum());
        assert_eq!(resumed.discriminator_checksums(), full.discriminator_checksums());
        assert_eq!(resumed.state, full.state);
    }

    #[test]
    fn metrics_are_json_lines() {
        let (b, ex) = tiny_setup(1);
        let mut t = AcousticTrainer::new(b, 0).unwrap();
        let mut buf = Vec::new();
        t.train(&ex, 3, None, Some(&mut buf)).unwrap();
        let lines: Vec<_> = std::str::from_utf8(&buf).unwrap().lines().collect();
        assert_eq!(lines.len(), 3);
        let v: serde_json::Value = serde_json::from_str(lines[2]).unwrap();
        assert_eq!(v["step"], 2);
        assert!(v["mel_l1"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn acoustic_adversarial_gradcheck() {
        let (bundle, ex) = tiny_setup(1);
        let tr = AcousticTrainer::new(bundle, 5).unwrap();
        let obj = tr.objective();
        let eval = |store: &ParamStore| -> (f64, GradSet) {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let mut win = rng_stream(1, 0, PURPOSE_WINDOW_G, 0);
            let l = obj.loss(&mut g, &p, &ex[0], true, None, &mut win).unwrap();
            let target = l.adv.unwrap();
            let grads = p.grads(&g.backward(target), store);
            (g.value(target).item(), grads)
        };
        let (_, grads) = eval(&tr.model.params);
        let coords = cantus_nn::gradcheck::spread_coords(&tr.model.params, 32, |i, n| (i * 7919 + 13) % n);
        let rep = cantus_nn::gradcheck::check(&tr.model.params, &grads, &coords, 1e-5, 1e-8, |s| eval(s).0);
        assert!(rep.max_rel_error() < 1e-3, "{}", rep.max_rel_error());
    }
}
