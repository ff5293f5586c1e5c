//! Desk-scale simulator for task-aware semantic image transmission over a
//! shadowed-Rician satellite-to-ground link.
//!
//! The crate chains segmentation, task-driven selection, a windowed-attention
//! semantic codec, an SNR-gated stacked channel codec and the fading channel,
//! then scores reconstructions with PSNR/SSIM.

pub mod channel;
pub mod channel_codec;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod effect_eval;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod segmentation;
pub mod selection;
pub mod semantic_codec;

pub use error::{Error, Result};
pub use image::{Image, Mask};
