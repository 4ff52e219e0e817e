//! Waveform I/O and per-frame acoustic features: log-mel, F0 and V/UV.

pub mod cache;
pub mod features;
pub mod mel;
pub mod pitch;
pub mod waveform;

pub use features::{default_extractor, extract_features, vuv_from_f0, AcousticFeatures, NormStats, VUV_THRESHOLD_HZ};
pub use mel::{mel_spectrogram, FrameConfig, MelConfig, MelExtractor};
pub use pitch::{extract_f0, PitchTracker, YinConfig, YinTracker};
pub use waveform::{Waveform, DEFAULT_SAMPLE_RATE};
