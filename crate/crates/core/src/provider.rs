//! The conditional-provider contract and the adapters that turn
//! `(context, patterns, candidates)` into a score matrix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patterns::{apply_pattern, SeedPolicy};
use crate::types::{CandidateScores, MaskPattern, MaskedQuery, SkipRecord, TaskInstance, TokenSeq};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capability {
    /// Longest encoder input the backend accepts, when bounded.
    pub max_context_len: Option<usize>,
    pub multi_token: bool,
    pub deterministic: bool,
    /// Vocabulary size, when the backend exposes it.
    pub vocab_size: Option<usize>,
}

/// Any backend that can score candidate fillers for the target slot of a
/// masked query.
///
/// Implementations return, for each candidate, the log-probability of the
/// candidate filling the target slot, accumulated by forced stepwise decoding
/// for multi-token candidates. Scores are not renormalized over the candidate
/// set.
pub trait Provider: Send + Sync {
    fn capability(&self) -> Capability;

    fn score(&self, query: &MaskedQuery, candidates: &[TokenSeq]) -> Result<Vec<f64>>;
}

impl<P: Provider + ?Sized> Provider for std::sync::Arc<P> {
    fn capability(&self) -> Capability {
        (**self).capability()
    }

    fn score(&self, query: &MaskedQuery, candidates: &[TokenSeq]) -> Result<Vec<f64>> {
        (**self).score(query, candidates)
    }
}

impl<P: Provider + ?Sized> Provider for Box<P> {
    fn capability(&self) -> Capability {
        (**self).capability()
    }

    fn score(&self, query: &MaskedQuery, candidates: &[TokenSeq]) -> Result<Vec<f64>> {
        (**self).score(query, candidates)
    }
}

/// Scores candidates through `provider`, enforcing the contract: one finite
/// log-probability per candidate, and no query beyond the declared capability.
pub fn score_candidates(provider: &dyn Provider, query: &MaskedQuery, candidates: &[TokenSeq]) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::Domain("no candidates to score".into()));
    }
    if let Some(j) = candidates.iter().position(|c| c.is_empty()) {
        return Err(Error::Domain(format!("candidate {j} is empty")));
    }
    if let Some(max) = provider.capability().max_context_len {
        if query.encoder.len() > max {
            return Err(Error::Capability(format!(
                "encoder input of {} exceeds maximum {max}",
                query.encoder.len()
            )));
        }
    }
    let scores = provider.score(query, candidates)?;
    if scores.len() != candidates.len() {
        return Err(Error::Capability(format!(
            "provider returned {} scores for {} candidates",
            scores.len(),
            candidates.len()
        )));
    }
    if let Some(j) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteScore { candidate: j });
    }
    Ok(scores)
}

/// Post-processing applied to each row of a score matrix. Both default off.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreOptions {
    /// Divide each candidate's log-probability by its token count.
    #[serde(default)]
    pub length_normalize: bool,
    /// Renormalize each row over the candidate set (experimental).
    #[serde(default)]
    pub renormalize: bool,
}

impl ScoreOptions {
    pub fn apply(&self, candidates: &[TokenSeq], row: &mut [f64]) {
        if self.length_normalize {
            for (s, c) in row.iter_mut().zip(candidates) {
                *s /= c.len() as f64;
            }
        }
        if self.renormalize {
            let lse = log_sum_exp(row);
            for s in row.iter_mut() {
                *s -= lse;
            }
        }
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Applies every pattern to `context` and scores all candidates.
///
/// Patterns that do not fit the context become skipped rows with a reason.
/// Row order equals pattern order.
pub fn score_matrix(
    provider: &dyn Provider,
    context: &TokenSeq,
    patterns: &[MaskPattern],
    candidates: &[TokenSeq],
    seed: u64,
    opts: ScoreOptions,
) -> Result<CandidateScores> {
    let mut log_p = Vec::with_capacity(patterns.len());
    let mut skipped = Vec::new();
    for (row, pattern) in patterns.iter().enumerate() {
        match apply_pattern(context, pattern, seed) {
            Ok(query) => {
                let mut scores = score_candidates(provider, &query, candidates)?;
                opts.apply(candidates, &mut scores);
                log_p.push(Some(scores));
            }
            Err(e @ Error::PatternDoesNotFit { .. }) => {
                skipped.push(SkipRecord {
                    row,
                    reason: e.to_string(),
                });
                log_p.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    if skipped.len() == patterns.len() {
        return Err(Error::EmptyMatrix);
    }
    Ok(CandidateScores {
        patterns: patterns.to_vec(),
        candidates: candidates.to_vec(),
        log_p,
        skipped,
    })
}

/// A task that could not be scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceError {
    pub id: String,
    pub error: String,
}

/// Score matrices for a task list, aligned with the input order; failed
/// instances are `None` and listed in `errors`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTasks {
    pub matrices: Vec<Option<CandidateScores>>,
    pub errors: Vec<InstanceError>,
}

impl ScoredTasks {
    pub fn scored(&self) -> impl Iterator<Item = (usize, &CandidateScores)> {
        self.matrices
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.as_ref().map(|m| (i, m)))
    }
}

/// Scores every task under every pattern, in parallel over tasks. The result
/// order (and therefore every downstream reduction) does not depend on
/// scheduling.
pub fn score_tasks(
    tasks: &[TaskInstance],
    provider: &dyn Provider,
    patterns: &[MaskPattern],
    base_seed: u64,
    policy: SeedPolicy,
    opts: ScoreOptions,
) -> ScoredTasks {
    let results: Vec<Result<CandidateScores>> = tasks
        .par_iter()
        .map(|task| {
            let seed = policy.seed_for(base_seed, &task.id);
            score_matrix(provider, &task.context, patterns, &task.candidates, seed, opts)
        })
        .collect();
    let mut matrices = Vec::with_capacity(tasks.len());
    let mut errors = Vec::new();
    for (task, r) in tasks.iter().zip(results) {
        match r {
            Ok(m) => matrices.push(Some(m)),
            Err(e) => {
                errors.push(InstanceError {
                    id: task.id.clone(),
                    error: e.to_string(),
                });
                matrices.push(None);
            }
        }
    }
    ScoredTasks { matrices, errors }
}
