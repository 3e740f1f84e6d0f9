//! Precedent-aware analysis of legal outcome classifiers.
//!
//! The crate covers the full pipeline: loading and filtering case corpora,
//! building citation networks, labeling precedent relations between train
//! and test cases, training article-factored outcome models, attributing
//! test decisions to training cases with influence functions, and
//! correlating those attributions with the precedent labels.

pub mod analysis;
pub mod citegraph;
pub mod corpus;
pub mod influence;
pub mod model;
pub mod synth;
pub mod taxonomy;

mod vecmath;

pub use corpus::{Case, Corpus, Outcome, Split};
