//! Non-human singing voice synthesis: a two-stage pipeline that predicts
//! discrete self-supervised speech tokens from score features and renders
//! them to audio with a timbre-conditioned neural vocoder.

pub mod config;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod manifest;
pub mod numerics;
pub mod pipeline;
pub mod pitch;
pub mod representation;
pub mod segmentation;
pub mod stage1;
pub mod stage2;

pub use error::{Error, Result};
