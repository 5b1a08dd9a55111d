//! Second-order hidden Markov models (HMM2) for detecting temporally
//! extended features in multi-channel sensor runs.
//!
//! The pipeline mirrors how such recognizers are usually built: segment and
//! label recorded runs, train one left-right HMM2 per feature with
//! Baum-Welch, merge the feature models under a grammar into one large model,
//! decode whole runs with Viterbi and score the decoded feature sequences
//! against the references.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod grammar;
pub mod inference;
pub mod logspace;
pub mod model;
pub mod training;

pub use error::{Error, Result};
pub use model::{CovarianceMode, GaussianComponent, GaussianMixture, Hmm2Model, ObservationSequence};
