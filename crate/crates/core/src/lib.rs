//! Two-stage singing voice synthesis: a non-autoregressive acoustic model
//! trained with sub-band mel discriminators, and a parallel waveform
//! generator trained with multi-length waveform discriminators.

pub mod acoustic;
pub mod blocks;
pub mod checkpoint;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod gan;
pub mod ml_gan;
pub mod pipeline;
pub mod score;
pub mod sf_gan;
pub mod trainer;
pub mod vocoder;

pub use error::{Error, Result};
