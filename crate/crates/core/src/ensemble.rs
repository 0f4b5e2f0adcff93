//! Ensemble of Conditionals: pick the (conditional, candidate) pair with the
//! highest score across the included rows, and track accuracy as more
//! conditionals are ensembled.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::check_m_values;
use crate::patterns::{argmax, SeedPolicy};
use crate::provider::{log_sum_exp, score_tasks, InstanceError, Provider, ScoreOptions};
use crate::types::{CandidateScores, MaskPattern, TaskInstance};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Argmax over every included (row, candidate) entry.
    #[default]
    Max,
    /// Argmax of the mean probability across rows. Comparison only.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EocPrediction {
    pub winning_pattern: usize,
    pub winning_candidate: usize,
    pub winning_log_p: f64,
}

/// Max-pooled prediction over the rows in `subset`. Ties go to the lowest
/// row, then the lowest candidate.
pub fn eoc_predict(scores: &CandidateScores, subset: &[usize]) -> Result<EocPrediction> {
    eoc_predict_pooled(scores, subset, Pooling::Max)
}

pub fn eoc_predict_pooled(scores: &CandidateScores, subset: &[usize], pooling: Pooling) -> Result<EocPrediction> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let mut rows: Vec<usize> = subset.to_vec();
    rows.sort_unstable();
    rows.dedup();
    match pooling {
        Pooling::Max => {
            let mut best: Option<EocPrediction> = None;
            for &i in &rows {
                for (j, &lp) in scores.row(i)?.iter().enumerate() {
                    if best.is_none_or(|b| lp > b.winning_log_p) {
                        best = Some(EocPrediction {
                            winning_pattern: i,
                            winning_candidate: j,
                            winning_log_p: lp,
                        });
                    }
                }
            }
            best.ok_or(Error::EmptyMatrix)
        }
        Pooling::Mean => {
            let table: Vec<&[f64]> = rows.iter().map(|&i| scores.row(i)).collect::<Result<_>>()?;
            let n = scores.candidates.len();
            let pooled: Vec<f64> = (0..n)
                .map(|j| {
                    let col: Vec<f64> = table.iter().map(|r| r[j]).collect();
                    log_sum_exp(&col) - (col.len() as f64).ln()
                })
                .collect();
            let j = argmax(&pooled);
            let (k, _) =
                table.iter().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (k, r)| {
                        if r[j] > acc.1 {
                            (k, r[j])
                        } else {
                            acc
                        }
                    },
                );
            Ok(EocPrediction {
                winning_pattern: rows[k],
                winning_candidate: j,
                winning_log_p: pooled[j],
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub m: usize,
    /// Mean over subsets of each subset's accuracy; `None` when no subset
    /// could be evaluated.
    pub mean_accuracy: Option<f64>,
    pub min_accuracy: Option<f64>,
    pub max_accuracy: Option<f64>,
    pub subsets: usize,
    /// Accuracy of each evaluated subset, in lexicographic subset order.
    pub per_subset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub points: Vec<AccuracyPoint>,
    /// Row used as the single-conditional reference (the first Baseline
    /// pattern, else row 0).
    pub baseline_row: usize,
    pub baseline_accuracy: Option<f64>,
    pub errors: Vec<InstanceError>,
}

impl AccuracyCurve {
    pub fn mean_at(&self, m: usize) -> Option<f64> {
        self.points.iter().find(|p| p.m == m).and_then(|p| p.mean_accuracy)
    }

    /// CSV with columns `m,mean_accuracy,min_accuracy,max_accuracy,baseline_accuracy`.
    pub fn to_csv(&self) -> String {
        let f = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("m,mean_accuracy,min_accuracy,max_accuracy,baseline_accuracy\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.m,
                f(p.mean_accuracy),
                f(p.min_accuracy),
                f(p.max_accuracy),
                f(self.baseline_accuracy)
            ));
        }
        out
    }
}

/// Winning candidate for one instance and subset, `None` if a row is skipped.
fn predict(
    scores: &CandidateScores,
    row_best: &[Option<(f64, usize)>],
    subset: &[usize],
    pooling: Pooling,
) -> Option<usize> {
    match pooling {
        Pooling::Max => {
            // rows are visited in increasing order, so a strict comparison
            // keeps the lowest row on ties
            let mut best: Option<(f64, usize)> = None;
            for &i in subset {
                let (v, j) = row_best[i]?;
                if best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, j));
                }
            }
            best.map(|(_, j)| j)
        }
        Pooling::Mean => eoc_predict_pooled(scores, subset, Pooling::Mean)
            .ok()
            .map(|p| p.winning_candidate),
    }
}

/// Accuracy-vs-m from precomputed matrices; `golds[i]` is the gold index of
/// `matrices[i]`.
pub fn accuracy_from_scores(
    matrices: &[&CandidateScores],
    golds: &[usize],
    patterns: &[MaskPattern],
    m_values: &[usize],
    pooling: Pooling,
) -> Result<(Vec<AccuracyPoint>, usize, Option<f64>)> {
    let p = patterns.len();
    check_m_values(m_values, p)?;
    let row_best: Vec<Vec<Option<(f64, usize)>>> = matrices
        .iter()
        .map(|s| {
            (0..p)
                .map(|i| {
                    s.row(i).ok().map(|r| {
                        let j = argmax(r);
                        (r[j], j)
                    })
                })
                .collect()
        })
        .collect();
    let subset_accuracy = |subset: &[usize]| -> Option<f64> {
        let (mut correct, mut evaluated) = (0usize, 0usize);
        for (k, s) in matrices.iter().enumerate() {
            if let Some(j) = predict(s, &row_best[k], subset, pooling) {
                evaluated += 1;
                if j == golds[k] {
                    correct += 1;
                }
            }
        }
        (evaluated > 0).then(|| correct as f64 / evaluated as f64)
    };

    let mut points = Vec::with_capacity(m_values.len());
    for &m in m_values {
        let mut per_subset = Vec::new();
        let mut subsets = 0;
        for subset in (0..p).combinations(m) {
            subsets += 1;
            if let Some(a) = subset_accuracy(&subset) {
                per_subset.push(a);
            }
        }
        let mean = (!per_subset.is_empty()).then(|| per_subset.iter().sum::<f64>() / per_subset.len() as f64);
        let min = per_subset.iter().copied().reduce(f64::min);
        let max = per_subset.iter().copied().reduce(f64::max);
        points.push(AccuracyPoint {
            m,
            mean_accuracy: mean,
            min_accuracy: min,
            max_accuracy: max,
            subsets,
            per_subset,
        });
    }
    let baseline_row = patterns.iter().position(MaskPattern::is_baseline).unwrap_or(0);
    let baseline_accuracy = subset_accuracy(&[baseline_row]);
    Ok((points, baseline_row, baseline_accuracy))
}

/// Scores `tasks` and computes EOC accuracy for each `m`, averaged over all
/// `C(P, m)` subsets.
#[allow(clippy::too_many_arguments)]
pub fn eoc_accuracy_curve(
    tasks: &[TaskInstance],
    provider: &dyn Provider,
    patterns: &[MaskPattern],
    m_values: &[usize],
    seed: u64,
    policy: SeedPolicy,
    opts: ScoreOptions,
    pooling: Pooling,
) -> Result<AccuracyCurve> {
    check_m_values(m_values, patterns.len())?;
    let scored = score_tasks(tasks, provider, patterns, seed, policy, opts);
    let (matrices, golds): (Vec<&CandidateScores>, Vec<usize>) =
        scored.scored().map(|(i, m)| (m, tasks[i].gold)).unzip();
    let (points, baseline_row, baseline_accuracy) =
        accuracy_from_scores(&matrices, &golds, patterns, m_values, pooling)?;
    Ok(AccuracyCurve {
        points,
        baseline_row,
        baseline_accuracy,
        errors: scored.errors,
    })
}
