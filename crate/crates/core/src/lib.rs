//! Downstream decision machinery for video capsule endoscopy.
//!
//! Per-frame classifier output (five organ posteriors plus an anomaly
//! posterior) is post-processed by a left-to-right hidden Markov model:
//! offline with exact Viterbi decoding, online with a forward filter that
//! gates image transmission until the capsule reaches the small intestine.
//! The crate also carries the multi-task loss formulas used to train such a
//! classifier, the dataset rebalancing pipeline, evaluation metrics, and a
//! seeded traversal simulator that ties everything together.
//!
//! The `parallel` feature (on by default) runs batch work on rayon; see
//! [`exec`].

pub mod config;
pub mod datasetprep;
pub mod domain;
pub mod exec;
pub mod experiment;
pub mod hmm;
pub mod io;
pub mod metrics;
pub mod mtl_math;
pub mod simulator;

pub use domain::{LabelFrame, OrganState, PosteriorFrame, ProbabilityMatrix, ORGAN_COUNT};
pub use hmm::{DecodedPath, FilterState, GiHmm};

use thiserror::Error;

/// Any failure surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Domain(#[from] domain::DomainError),
    #[error(transparent)]
    Hmm(#[from] hmm::HmmError),
    #[error(transparent)]
    Mtl(#[from] mtl_math::MtlError),
    #[error(transparent)]
    Simulation(#[from] simulator::SimError),
    #[error(transparent)]
    Prep(#[from] datasetprep::PrepError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error("config: {0}")]
    Config(String),
}
