//! Entity-aware embedded topic models.
//!
//! The crate wikifies a corpus with a dictionary or gold-annotation linker,
//! substitutes entity embeddings into the embedding matrix, fits static (ETM)
//! or dynamic (D-ETM) embedded topic models by amortized variational
//! inference, and evaluates them with document-completion perplexity.
//!
//! Data-parallel work goes through [`par`]; build without the default
//! `parallel` feature for a purely sequential library.

pub mod corpus;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod linker;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod report;
pub mod rng;

pub use error::{Error, ErrorClass, Result};
