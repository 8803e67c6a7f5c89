//! Core library: visual feature extraction, expert prompt selection,
//! feedback/distractor generation, preference refinement, dataset
//! construction and evaluation metrics.

pub mod datagen;
pub mod eps;
pub mod error;
pub mod eval;
pub mod generator;
pub mod gradcheck;
pub mod llm;
pub mod model;
pub mod nn;
pub mod refine;
pub mod sample;
pub mod tokenizer;
pub mod train;
pub mod vfe;

pub use error::{Error, Result};
