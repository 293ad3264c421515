//! Reference-guided video editing at desk scale.

pub mod ablation;
pub mod adapter;
pub mod backbone;
pub mod cli;
pub mod codec;
pub mod config;
pub mod datagen;
pub mod diagnostics;
pub mod editor;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use error::{MiveError, Result};
pub use tensor::{Latent, Video};
