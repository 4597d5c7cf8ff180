//! Distilling visual knowledge from image-text pairs into query vectors that
//! can later be recovered from text alone and fed to a frozen decoder as
//! soft prompts.
//!
//! The crate is organised bottom-up: [`encoders`] and the frozen decoder in
//! [`integration`] never receive gradient updates; [`iqformer`] holds the
//! learnable queries; [`distillation`] and [`integration`] define the
//! objectives; [`pipeline`] trains, checkpoints and decodes; [`evalmetrics`]
//! scores generated text.

pub mod config;
pub mod data;
pub mod distillation;
pub mod encoders;
pub mod error;
pub mod evalmetrics;
pub mod integration;
pub mod iqformer;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod tokenizer;

pub use config::ModelConfig;
pub use error::{Result, VkdError};
pub use model::Model;
