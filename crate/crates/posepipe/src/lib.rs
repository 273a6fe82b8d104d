//! posepipe: pose-controllable text-to-video generation at desk scale.
//!
//! A small latent diffusion model trained in three passes — text-to-image
//! pretraining, pose-control training on image/pose pairs, and temporal
//! training on pose-free videos — plus the synthetic corpora, DDIM sampler,
//! and evaluation tooling needed to measure every claim end to end.

pub mod error;
pub mod util;

pub mod graph;
pub mod tensor;

pub mod diffusion;
pub mod latent_codec;

pub mod pose_control;
pub mod text_cond;

pub mod denoiser;

pub mod synthdata;
pub mod tensorfile;

pub mod checkpoint;
pub mod trainer;

pub mod sampler;

pub mod evalkit;

pub mod cli;
pub mod config;

pub use error::{PipelineError, Result};
