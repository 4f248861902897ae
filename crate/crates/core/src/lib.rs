//! Temporal action localization from per-frame phase probabilities:
//! reverse-mode autodiff, the convolutional network, ground-truth
//! construction, losses with intra- and inter-phase consistency terms,
//! synthetic data, training, proposal inference and evaluation.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod formats;
pub mod gradcheck;
pub mod gradsuite;
pub mod inference;
pub mod labels;
pub mod losses;
pub mod model;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
