//! Iterative student-guided synthetic data generation.
//!
//! Each iteration scores a seed corpus against the current student, selects
//! exemplars, has a teacher synthesize new question–answer pairs from them,
//! fine-tunes the student on everything synthesized so far and evaluates it.

pub mod analysis;
pub mod corpus;
pub mod engine;
pub mod error;
pub mod modelio;
pub mod scoring;
pub mod selection;
pub mod synthgen;
pub mod util;
pub mod verify;

pub use error::{Error, Result};
