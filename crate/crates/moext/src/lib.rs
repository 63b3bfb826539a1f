//! Micro-expression recognition by motion feature extraction.
//!
//! The pipeline has two phases. In pre-training, a feature separator splits
//! each frame into shape and texture embeddings, a motion extractor fuses the
//! shape embeddings of the onset and apex frames, and a reconstruction module
//! rebuilds the apex frame from motion plus onset texture. Contrastive losses
//! keep shape and texture apart and pull augmented views of the same frame
//! together. In fine-tuning, the texture branch and reconstructor are dropped
//! and a classifier is trained on the motion embedding.
//!
//! Evaluation follows leave-one-subject-out cross-validation with UF1 / UAR /
//! ACC metrics, in sole-database and composite-database variants.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod training;

pub use error::{Error, Result};
