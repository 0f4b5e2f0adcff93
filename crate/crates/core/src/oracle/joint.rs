use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::types::{Validate, Violation, Vocabulary};

/// Largest table the oracle will materialize.
pub const MAX_TABLE_ENTRIES: usize = 10_000_000;

/// Explicit joint distribution over all length-`length` sequences.
///
/// `probs` is row-major over positions: position 0 is the most significant
/// digit of the index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    pub vocab: Vocabulary,
    pub length: usize,
    pub probs: Vec<f64>,
}

/// A distribution over joint assignments of a list of target positions,
/// row-major in the order the targets were given.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub targets: Vec<usize>,
    pub probs: Vec<f64>,
}

impl TargetDistribution {
    pub fn prob_of(&self, tokens: &[u32], vocab_size: usize) -> f64 {
        let idx = tokens.iter().fold(0usize, |acc, &t| acc * vocab_size + t as usize);
        self.probs[idx]
    }
}

fn table_size(v: usize, l: usize) -> Option<usize> {
    v.checked_pow(l as u32).filter(|&n| n <= MAX_TABLE_ENTRIES)
}

impl JointTable {
    pub fn new(vocab: Vocabulary, length: usize, probs: Vec<f64>) -> Result<Self> {
        let t = JointTable { vocab, length, probs };
        let violations = t.validate();
        if violations.is_empty() {
            Ok(t)
        } else {
            Err(Error::Invalid {
                what: "joint table",
                violations,
            })
        }
    }

    /// Normalizes nonnegative weights into a table.
    pub fn from_weights(vocab: Vocabulary, length: usize, mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Domain(format!("weights sum to {total}")));
        }
        for w in &mut weights {
            *w /= total;
        }
        Self::new(vocab, length, weights)
    }

    pub fn uniform(vocab: Vocabulary, length: usize) -> Result<Self> {
        let n = table_size(vocab.size(), length)
            .ok_or_else(|| Error::Infeasible(format!("{}^{length} entries", vocab.size())))?;
        Self::new(vocab, length, vec![1.0 / n as f64; n])
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    fn stride(&self, position: usize) -> usize {
        self.vocab_size().pow((self.length - 1 - position) as u32)
    }

    pub fn index_of(&self, seq: &[u32]) -> usize {
        seq.iter().fold(0usize, |acc, &t| acc * self.vocab_size() + t as usize)
    }

    pub fn prob(&self, seq: &[u32]) -> f64 {
        self.probs[self.index_of(seq)]
    }

    /// Decodes a table index back into its token sequence.
    pub fn sequence_at(&self, mut index: usize) -> Vec<u32> {
        let v = self.vocab_size();
        let mut out = vec![0u32; self.length];
        for slot in out.iter_mut().rev() {
            *slot = (index % v) as u32;
            index /= v;
        }
        out
    }

    fn check_positions(&self, assignment: &[(usize, u32)], targets: &[usize]) -> Result<()> {
        let mut used = vec![false; self.length];
        for &p in assignment.iter().map(|(p, _)| p).chain(targets) {
            if p >= self.length {
                return Err(Error::Range {
                    position: p,
                    length: self.length,
                });
            }
            if used[p] {
                return Err(Error::Domain(format!("position {p} used twice")));
            }
            used[p] = true;
        }
        if let Some(&(_, t)) = assignment.iter().find(|(_, t)| *t as usize >= self.vocab_size()) {
            return Err(Error::Domain(format!("token {t} outside vocabulary")));
        }
        Ok(())
    }

    /// Sums the table over every sequence consistent with `assignment`,
    /// bucketed by the joint value of `targets`.
    fn bucket_sums(&self, assignment: &[(usize, u32)], targets: &[usize]) -> Vec<f64> {
        let v = self.vocab_size();
        let mut base = 0usize;
        let mut assigned = vec![false; self.length];
        for &(p, t) in assignment {
            base += self.stride(p) * t as usize;
            assigned[p] = true;
        }
        // free positions with their table stride and bucket stride
        let n_targets = targets.len();
        let free: Vec<(usize, usize)> = (0..self.length)
            .filter(|&p| !assigned[p])
            .map(|p| {
                let bucket = targets
                    .iter()
                    .position(|&t| t == p)
                    .map_or(0, |i| v.pow((n_targets - 1 - i) as u32));
                (self.stride(p), bucket)
            })
            .collect();

        let mut out = vec![0.0; v.pow(n_targets as u32)];
        let mut digits = vec![0usize; free.len()];
        let (mut offset, mut bucket) = (base, 0usize);
        loop {
            out[bucket] += self.probs[offset];
            // advance the odometer, least significant free position first
            let mut i = free.len();
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                let (stride, bstride) = free[i];
                if digits[i] + 1 < v {
                    digits[i] += 1;
                    offset += stride;
                    bucket += bstride;
                    break;
                }
                offset -= stride * digits[i];
                bucket -= bstride * digits[i];
                digits[i] = 0;
            }
        }
    }

    /// Exact `p(targets | assignment)`.
    pub fn condition(&self, assignment: &[(usize, u32)], targets: &[usize]) -> Result<TargetDistribution> {
        if targets.is_empty() {
            return Err(Error::Domain("no target positions".into()));
        }
        self.check_positions(assignment, targets)?;
        let mut probs = self.bucket_sums(assignment, targets);
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroMass);
        }
        for p in &mut probs {
            *p /= total;
        }
        Ok(TargetDistribution {
            targets: targets.to_vec(),
            probs,
        })
    }

    /// Probability of the event `assignment` (marginal over everything else).
    pub fn mass(&self, assignment: &[(usize, u32)]) -> Result<f64> {
        self.check_positions(assignment, &[])?;
        Ok(self.bucket_sums(assignment, &[]).iter().sum())
    }

    /// Draws one full sequence.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u32> {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return self.sequence_at(i);
            }
        }
        // rounding left the tail uncovered; take the last nonzero entry
        let last = self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        self.sequence_at(last)
    }
}

impl Validate for JointTable {
    fn validate(&self) -> Vec<Violation> {
        let mut out = self.vocab.validate();
        if self.length == 0 {
            out.push(Violation::new("length >= 1", "zero-length joint"));
            return out;
        }
        match table_size(self.vocab.size(), self.length) {
            None => out.push(Violation::new(
                "table size",
                format!("{}^{} exceeds {MAX_TABLE_ENTRIES}", self.vocab.size(), self.length),
            )),
            Some(n) if n != self.probs.len() => out.push(Violation::new(
                "table size",
                format!("{} entries, expected {n}", self.probs.len()),
            )),
            _ => {}
        }
        if let Some(i) = self.probs.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            out.push(Violation::new("entries >= 0", format!("entry {i} = {}", self.probs[i])));
        }
        let total: f64 = self.probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            out.push(Violation::new("sums to 1", format!("sum = {total}")));
        }
        out
    }
}

/// Flat-Dirichlet joint: iid standard-exponential weights, normalized.
pub fn random_joint(vocab: Vocabulary, length: usize, seed: u64) -> Result<JointTable> {
    let n = table_size(vocab.size(), length)
        .ok_or_else(|| Error::Infeasible(format!("{}^{length} entries exceeds {MAX_TABLE_ENTRIES}", vocab.size())))?;
    let mut rng = seed::rng(seed);
    let weights: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    JointTable::from_weights(vocab, length, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(n: usize) -> Vocabulary {
        Vocabulary::numbered(n).unwrap()
    }

    /// Direct definition: filter every sequence, no odometer.
    fn naive_condition(j: &JointTable, assignment: &[(usize, u32)], targets: &[usize]) -> Vec<f64> {
        let v = j.vocab_size();
        let mut out = vec![0.0; v.pow(targets.len() as u32)];
        for (i, p) in j.probs.iter().enumerate() {
            let s = j.sequence_at(i);
            if assignment.iter().all(|&(pos, t)| s[pos] == t) {
                let idx = targets.iter().fold(0, |a, &t| a * v + s[t] as usize);
                out[idx] += p;
            }
        }
        let total: f64 = out.iter().sum();
        out.iter().map(|x| x / total).collect()
    }

    #[test]
    fn deterministic_and_normalized() {
        let a = random_joint(vocab(2), 2, 11).unwrap();
        let b = random_joint(vocab(2), 2, 11).unwrap();
        assert_eq!(a, b);
        assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn four_by_six_table_is_positive() {
        let j = random_joint(vocab(4), 6, 7).unwrap();
        assert_eq!(j.probs.len(), 4096);
        assert!(j.probs.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn rejects_oversized_tables() {
        assert!(matches!(random_joint(vocab(10), 8, 0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn condition_matches_naive_filter() {
        let j = random_joint(vocab(3), 4, 5).unwrap();
        type Case = (Vec<(usize, u32)>, Vec<usize>);
        let cases: Vec<Case> = vec![
            (vec![(0, 1), (1, 2), (3, 0)], vec![2]),
            (vec![(2, 1)], vec![3, 0]),
            (vec![], vec![1]),
            (vec![(1, 0)], vec![0, 2, 3]),
        ];
        for (a, t) in cases {
            let got = j.condition(&a, &t).unwrap();
            let want = naive_condition(&j, &a, &t);
            for (g, w) in got.probs.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_assignment_over_all_positions_is_the_joint() {
        let j = random_joint(vocab(2), 3, 9).unwrap();
        let d = j.condition(&[], &[0, 1, 2]).unwrap();
        for (a, b) in d.probs.iter().zip(&j.probs) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_joint_gives_uniform_conditionals() {
        let j = JointTable::uniform(vocab(3), 3).unwrap();
        let d = j.condition(&[(0, 2), (2, 1)], &[1]).unwrap();
        for p in d.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_mass_is_an_error() {
        let mut w = vec![1.0; 4];
        w[2] = 0.0; // sequence [1, 0]
        w[3] = 0.0; // sequence [1, 1]
        let j = JointTable::from_weights(vocab(2), 2, w).unwrap();
        assert!(matches!(j.condition(&[(0, 1)], &[1]), Err(Error::ZeroMass)));
    }

    #[test]
    fn bad_positions() {
        let j = JointTable::uniform(vocab(2), 2).unwrap();
        assert!(matches!(j.condition(&[(2, 0)], &[0]), Err(Error::Range { .. })));
        assert!(j.condition(&[(0, 0)], &[0]).is_err());
        assert!(j.condition(&[(0, 0)], &[]).is_err());
    }

    #[test]
    fn invalid_tables_rejected() {
        assert!(JointTable::new(vocab(2), 1, vec![0.5, 0.6]).is_err());
        assert!(JointTable::new(vocab(2), 1, vec![1.5, -0.5]).is_err());
        assert!(JointTable::new(vocab(2), 2, vec![0.5, 0.5]).is_err());
    }
}
