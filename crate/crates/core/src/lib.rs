//! Discriminative representation learning for multi-label image recognition.
//!
//! A shared feature grid is split into class-specific vectors by masking it
//! with each present class's boxes (the object parser). Those vectors are
//! pulled toward learnable class centers and pushed away from the centers of
//! the other classes in the same image (the multi-label contrastive loss),
//! jointly with a per-class binary cross-entropy on the image logits.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod parser;
pub mod plot;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{Field, Scalar};

/// Scalar used for training and evaluation.
pub type Real = f64;
pub type FeatureGrid = numeric::Grid<Real>;
pub type FeatureVec = numeric::FeatureVector<Real>;
pub type Centers = losses::CenterBank<Real>;
pub type Params = model::ModelParams<Real>;
