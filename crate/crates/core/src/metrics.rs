//! How often different conditionals disagree, and the log-probability gap
//! statistic.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patterns::{argmax, SeedPolicy};
use crate::provider::{score_tasks, InstanceError, Provider, ScoreOptions};
use crate::types::{CandidateScores, MaskPattern, TaskInstance};

/// Exhaustive subset enumeration is capped at this many patterns.
pub const MAX_PATTERNS: usize = 16;

/// True iff the rows in `subset` do not all share the same argmax candidate
/// (ties go to the lowest candidate index).
pub fn instance_disagrees(scores: &CandidateScores, subset: &[usize]) -> Result<bool> {
    let (&first, rest) = subset.split_first().ok_or(Error::EmptySubset)?;
    let top = argmax(scores.row(first)?);
    let mut disagree = false;
    for &i in rest {
        disagree |= argmax(scores.row(i)?) != top;
    }
    Ok(disagree)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementPoint {
    pub m: usize,
    /// Disagreeing (instance, subset) pairs over all evaluated pairs; `None`
    /// when nothing could be evaluated at this `m`.
    pub rate: Option<f64>,
    pub subsets: usize,
    /// Instances contributing at least one evaluated pair.
    pub instances: usize,
    /// (instance, subset) pairs dropped because a selected row was skipped.
    pub skipped: usize,
    pub disagreements: u64,
    pub evaluated: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisagreementCurve {
    pub points: Vec<DisagreementPoint>,
    pub errors: Vec<InstanceError>,
}

impl DisagreementCurve {
    /// Whether any (instance, subset) pair was dropped for a skipped row.
    pub fn has_skips(&self) -> bool {
        self.points.iter().any(|p| p.skipped > 0)
    }

    /// Rates are non-decreasing in `m`, compared exactly on the integer
    /// counts. Guaranteed when no pair was skipped: disagreement of a subset
    /// implies disagreement of every superset.
    pub fn is_monotone(&self) -> bool {
        let mut pts: Vec<&DisagreementPoint> = self.points.iter().filter(|p| p.evaluated > 0).collect();
        pts.sort_by_key(|p| p.m);
        pts.windows(2).all(|w| {
            let (a, b) = (w[0], w[1]);
            b.disagreements as u128 * a.evaluated as u128 >= a.disagreements as u128 * b.evaluated as u128
        })
    }

    pub fn rate_at(&self, m: usize) -> Option<f64> {
        self.points.iter().find(|p| p.m == m).and_then(|p| p.rate)
    }

    /// CSV with columns `m,rate,subsets,instances,skipped`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,rate,subsets,instances,skipped\n");
        for p in &self.points {
            let rate = p.rate.map(|r| r.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.m, rate, p.subsets, p.instances, p.skipped
            ));
        }
        out
    }
}

pub(crate) fn check_m_values(m_values: &[usize], patterns: usize) -> Result<()> {
    if patterns == 0 || patterns > MAX_PATTERNS {
        return Err(Error::Domain(format!(
            "{patterns} patterns; exhaustive enumeration supports 1..={MAX_PATTERNS}"
        )));
    }
    if m_values.is_empty() {
        return Err(Error::Domain("empty m range".into()));
    }
    if let Some(&m) = m_values.iter().find(|&&m| m == 0 || m > patterns) {
        return Err(Error::Domain(format!("m = {m} outside [1, {patterns}]")));
    }
    Ok(())
}

/// Disagreement rates from precomputed score matrices.
///
/// For each `m`, every `C(P, m)` subset is paired with every instance; pairs
/// where a selected row was skipped are dropped from the denominator.
pub fn disagreement_from_scores(
    matrices: &[&CandidateScores],
    patterns: usize,
    m_values: &[usize],
) -> Result<Vec<DisagreementPoint>> {
    check_m_values(m_values, patterns)?;
    // per-instance argmax of each row, None for skipped rows
    let tops: Vec<Vec<Option<usize>>> = matrices
        .iter()
        .map(|s| (0..patterns).map(|i| s.row(i).ok().map(argmax)).collect())
        .collect();
    let mut points = Vec::with_capacity(m_values.len());
    for &m in m_values {
        let (mut disagreements, mut evaluated, mut skipped, mut subsets) = (0u64, 0u64, 0usize, 0usize);
        let mut contributed = vec![false; tops.len()];
        for subset in (0..patterns).combinations(m) {
            subsets += 1;
            for (inst, rows) in tops.iter().enumerate() {
                let picks: Option<Vec<usize>> = subset.iter().map(|&i| rows[i]).collect();
                match picks {
                    None => skipped += 1,
                    Some(p) => {
                        evaluated += 1;
                        contributed[inst] = true;
                        if p.iter().any(|&t| t != p[0]) {
                            disagreements += 1;
                        }
                    }
                }
            }
        }
        points.push(DisagreementPoint {
            m,
            rate: (evaluated > 0).then(|| disagreements as f64 / evaluated as f64),
            subsets,
            instances: contributed.iter().filter(|&&c| c).count(),
            skipped,
            disagreements,
            evaluated,
        });
    }
    Ok(points)
}

/// Scores `tasks` under every pattern and measures disagreement for each `m`.
pub fn disagreement_curve(
    tasks: &[TaskInstance],
    provider: &dyn Provider,
    patterns: &[MaskPattern],
    m_values: &[usize],
    seed: u64,
    policy: SeedPolicy,
    opts: ScoreOptions,
) -> Result<DisagreementCurve> {
    check_m_values(m_values, patterns.len())?;
    let scored = score_tasks(tasks, provider, patterns, seed, policy, opts);
    let matrices: Vec<&CandidateScores> = scored.scored().map(|(_, m)| m).collect();
    let points = disagreement_from_scores(&matrices, patterns.len(), m_values)?;
    Ok(DisagreementCurve {
        points,
        errors: scored.errors,
    })
}

/// `|log p_solved - log p_inferred|`. `p_solved` may exceed 1.
pub fn log_prob_gap(p_solved: f64, p_inferred: f64) -> Result<f64> {
    if !(p_solved > 0.0 && p_inferred > 0.0) || !p_solved.is_finite() || !p_inferred.is_finite() {
        return Err(Error::Domain(format!(
            "log-probability gap needs positive inputs, got {p_solved} and {p_inferred}"
        )));
    }
    Ok((p_solved.ln() - p_inferred.ln()).abs())
}

/// The gap computed from log-probabilities directly.
pub fn log_gap(log_solved: f64, log_inferred: f64) -> f64 {
    (log_solved - log_inferred).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::TokenSeq;

    fn matrix(rows: Vec<Vec<f64>>) -> CandidateScores {
        let n = rows[0].len();
        CandidateScores::dense(
            vec![MaskPattern::Baseline; rows.len()],
            (0..n as u32).map(|t| TokenSeq(vec![t])).collect(),
            rows,
        )
        .unwrap()
    }

    #[test]
    fn single_row_never_disagrees() {
        let s = matrix(vec![vec![0.5f64.ln(), 0.3f64.ln()]]);
        assert!(!instance_disagrees(&s, &[0]).unwrap());
    }

    #[test]
    fn identical_rows_agree() {
        let s = matrix(vec![vec![-1.0, -2.0], vec![-1.0, -2.0]]);
        assert!(!instance_disagrees(&s, &[0, 1]).unwrap());
    }

    #[test]
    fn different_argmax_disagrees() {
        let s = matrix(vec![vec![0.5f64.ln(), 0.3f64.ln()], vec![0.2f64.ln(), 0.6f64.ln()]]);
        assert!(instance_disagrees(&s, &[0, 1]).unwrap());
    }

    #[test]
    fn empty_and_skipped_subsets_are_errors() {
        let mut s = matrix(vec![vec![-1.0, -2.0], vec![-1.0, -2.0]]);
        assert!(matches!(instance_disagrees(&s, &[]), Err(Error::EmptySubset)));
        s.log_p[1] = None;
        s.skipped.push(crate::types::SkipRecord {
            row: 1,
            reason: "x".into(),
        });
        assert!(matches!(instance_disagrees(&s, &[0, 1]), Err(Error::SkippedRow(1))));
    }

    #[test]
    fn full_set_rate_is_fraction_without_common_argmax() {
        let a = matrix(vec![vec![-1.0, -2.0], vec![-1.0, -2.0], vec![-3.0, -2.0]]);
        let b = matrix(vec![vec![-1.0, -2.0], vec![-1.0, -2.0], vec![-1.0, -2.0]]);
        let pts = disagreement_from_scores(&[&a, &b], 3, &[1, 2, 3]).unwrap();
        assert_eq!(pts[0].rate, Some(0.0));
        // pairs: a disagrees on {0,2} and {1,2}
        assert_eq!(pts[1].rate, Some(2.0 / 6.0));
        assert_eq!(pts[2].rate, Some(0.5));
        assert_eq!(pts[1].subsets, 3);
    }

    #[test]
    fn skipped_rows_leave_denominator() {
        let a = matrix(vec![vec![-1.0, -2.0], vec![-3.0, -2.0]]);
        let mut b = matrix(vec![vec![-1.0, -2.0], vec![-3.0, -2.0]]);
        b.log_p[1] = None;
        b.skipped.push(crate::types::SkipRecord {
            row: 1,
            reason: "x".into(),
        });
        let pts = disagreement_from_scores(&[&a, &b], 2, &[2]).unwrap();
        assert_eq!(pts[0].evaluated, 1);
        assert_eq!(pts[0].skipped, 1);
        assert_eq!(pts[0].instances, 1);
        assert_eq!(pts[0].rate, Some(1.0));
    }

    #[test]
    fn m_bounds() {
        let a = matrix(vec![vec![-1.0, -2.0]]);
        assert!(disagreement_from_scores(&[&a], 1, &[2]).is_err());
        assert!(disagreement_from_scores(&[&a], 17, &[2]).is_err());
        assert!(disagreement_from_scores(&[&a], 1, &[]).is_err());
    }

    #[test]
    fn gap_examples() {
        assert_eq!(log_prob_gap(0.5, 0.5).unwrap(), 0.0);
        assert!((log_prob_gap(std::f64::consts::E * 0.2, 0.2).unwrap() - 1.0).abs() < 1e-12);
        let g = log_prob_gap(1.3, 0.6).unwrap();
        assert!((g - (1.3f64.ln() - 0.6f64.ln())).abs() < 1e-15);
        assert!((g - 0.7732).abs() < 1e-4);
        assert!(log_prob_gap(0.0, 0.5).is_err());
        assert!(log_prob_gap(0.5, -1.0).is_err());
    }

    #[test]
    fn csv_layout() {
        let c = DisagreementCurve {
            points: vec![DisagreementPoint {
                m: 2,
                rate: Some(0.25),
                subsets: 45,
                instances: 10,
                skipped: 0,
                disagreements: 1,
                evaluated: 4,
            }],
            errors: vec![],
        };
        assert_eq!(c.to_csv(), "m,rate,subsets,instances,skipped\n2,0.25,45,10,0\n");
    }
}
