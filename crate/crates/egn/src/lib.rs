//! Exemplar-guided gene-expression prediction from tissue-slide image
//! windows: a self-contained f64 autograd core, a style-code extractor,
//! an exact cross-patient exemplar index, the EGN prediction model, and a
//! training/evaluation harness.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod extractor;
pub mod gradcheck;
pub mod index;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{EgnError, Result};
