//! Diagnostics for the self-inconsistency of masked language models.
//!
//! An MLM answers many different conditional queries about the same
//! sequence, and nothing forces those answers to come from one joint
//! distribution. This crate measures that:
//!
//! - [`counting`] counts joint degrees of freedom against MLM conditionals;
//! - [`oracle`] provides exact joints and providers built from them;
//! - [`patterns`] turns a context into masked queries;
//! - [`metrics`] measures how often conditionals disagree;
//! - [`ensemble`] max-pools conditionals into one prediction;
//! - [`bigram`] checks the cross-ratio identity on bigram quadruples;
//! - [`harness`] loads and synthesizes tasks and runs experiments;
//! - [`remote`] talks to a model server over HTTP.

pub mod bigram;
pub mod counting;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod oracle;
pub mod patterns;
pub mod provider;
pub mod remote;
pub mod seed;
pub mod types;

pub use error::{Error, Result};
pub use provider::{score_candidates, score_matrix, Capability, Provider, ScoreOptions};
pub use types::{
    BigramQuadruple, CandidateScores, Conditional, EncoderItem, MaskPattern, MaskedQuery, TaskInstance, TokenSeq,
    Validate, Vocabulary,
};
