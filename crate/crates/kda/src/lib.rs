//! Audio-visual zero-shot learning via knowledge-aware distribution
//! adaptation: a common-space embedding model trained with a 2-Wasserstein
//! alignment loss and a knowledge-aware adaptive margin loss, evaluated with
//! generalized zero-shot metrics.

pub mod cli;
pub mod datahub;
pub mod eval;
pub mod gradcore;
pub mod losses;
pub mod model;
pub mod trainer;

pub use gradcore::{Graph, Tensor, TensorError};
