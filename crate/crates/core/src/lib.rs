//! Few-shot named entity recognition by nearest-neighbor token
//! classification and Viterbi decoding over transition probabilities
//! estimated on a source corpus.
//!
//! The pipeline: [`corpus`] reads tagged sentences, [`sampler`] draws K-shot
//! support sets, [`embed`] provides token vectors, [`knn`] turns distances to
//! support tokens into emission probabilities, [`transitions`] estimates and
//! expands abstract tag transitions, [`decode`] runs Viterbi, and
//! [`metrics`] scores spans. [`experiment`] ties them together.

pub mod corpus;
pub mod decode;
pub mod embed;
pub mod error;
pub mod experiment;
pub mod knn;
pub mod metrics;
pub mod sampler;
pub mod transitions;

pub use error::{Error, ErrorKind, Stage};
