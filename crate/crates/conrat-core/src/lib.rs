//! Concept-based rationalization for binary text classification.
//!
//! A document is explained by `K` contiguous token spans ("concepts"), each
//! gated by a presence score; the label is predicted from the concepts alone,
//! so the explanation is the computation.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod masking;
pub mod model;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
