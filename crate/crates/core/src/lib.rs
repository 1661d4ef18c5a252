//! Skill assessment from tool-motion sequences.
//!
//! The pipeline embeds variable-length kinematic sequences with a denoising
//! autoencoder, predicts scores or pass/fail classes with a classifier built
//! on the frozen encoder, explains predictions with class activation maps,
//! and quantifies confidence quality with question-answer trust.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod explain;
pub mod model;
pub mod nn;
pub mod record;
pub mod run;
pub mod trust;

pub use error::{Error, Result};
