//! Providers backed by an explicit joint table.
//!
//! All three answer a query the same way: the masked input is mapped back to
//! absolute positions, each candidate token is scored stepwise from the
//! full-vocabulary distribution at its position, and the step log-probs are
//! summed. They differ only in what happens to that distribution:
//!
//! - [`ConsistentProvider`] uses the exact conditional;
//! - [`PerturbedProvider`] adds Gaussian log-space noise and renormalizes;
//! - [`CalibratedNoiseProvider`] adds noise whose scale depends on whether the
//!   corrupted answer is still right, and flattens noisier answers.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::joint::JointTable;
use crate::error::{Error, Result};
use crate::provider::{log_sum_exp, Capability, Provider};
use crate::seed::SeedKey;
use crate::types::{EncoderItem, MaskedQuery, TokenSeq};

/// A query mapped onto absolute positions of the joint.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedQuery {
    pub assignment: Vec<(usize, u32)>,
    /// First position of the target slot.
    pub target_start: usize,
}

/// Maps `query` onto sequence positions for a target filler of
/// `target_len` tokens. Open slots occupy one unassigned position each.
pub fn resolve(query: &MaskedQuery, target_len: usize, length: usize) -> Result<ResolvedQuery> {
    let mut assignment = Vec::new();
    let mut pos = 0usize;
    let mut target_start = None;
    for item in &query.encoder {
        match *item {
            EncoderItem::Token(t) => {
                assignment.push((pos, t));
                pos += 1;
            }
            EncoderItem::Sentinel(i) if i == query.target_slot => {
                target_start = Some(pos);
                pos += target_len;
            }
            EncoderItem::Sentinel(i) => match query.fills.get(i) {
                Some(fill) if !fill.is_empty() => {
                    for &t in fill {
                        assignment.push((pos, t));
                        pos += 1;
                    }
                }
                _ => pos += 1,
            },
        }
    }
    let target_start = target_start.ok_or_else(|| Error::Invalid {
        what: "masked query",
        violations: vec![crate::types::Violation::new("target slot exists", "no target sentinel")],
    })?;
    if pos > length {
        return Err(Error::Range {
            position: pos - 1,
            length,
        });
    }
    Ok(ResolvedQuery {
        assignment,
        target_start,
    })
}

fn query_fingerprint(query: &MaskedQuery) -> Vec<u8> {
    let mut b = Vec::with_capacity(8 * (query.encoder.len() + 4));
    for item in &query.encoder {
        match *item {
            EncoderItem::Token(t) => {
                b.push(0);
                b.extend_from_slice(&t.to_le_bytes());
            }
            EncoderItem::Sentinel(i) => {
                b.push(1);
                b.extend_from_slice(&(i as u64).to_le_bytes());
            }
        }
    }
    for fill in &query.fills {
        b.push(2);
        for &t in fill {
            b.extend_from_slice(&t.to_le_bytes());
        }
    }
    b.push(3);
    b.extend_from_slice(&(query.target_slot as u64).to_le_bytes());
    b
}

/// Per-step transformation of the exact distribution.
trait StepModel: Send + Sync {
    /// `exact` holds the exact conditional at the step position; returns
    /// log-probabilities over the whole vocabulary.
    fn step(&self, exact: &[f64], query: &MaskedQuery, target_len: usize, prefix: &[u32]) -> Vec<f64>;
}

fn score_with<M: StepModel>(
    joint: &JointTable,
    model: &M,
    query: &MaskedQuery,
    candidates: &[TokenSeq],
) -> Result<Vec<f64>> {
    let v = joint.vocab_size();
    let mut resolved: HashMap<usize, ResolvedQuery> = HashMap::new();
    let mut steps: HashMap<(usize, Vec<u32>), Vec<f64>> = HashMap::new();
    let mut out = Vec::with_capacity(candidates.len());
    for cand in candidates {
        if let Some(&t) = cand.ids().iter().find(|&&t| t as usize >= v) {
            return Err(Error::Domain(format!("candidate token {t} outside vocabulary")));
        }
        let len = cand.len();
        let r = match resolved.entry(len) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(resolve(query, len, joint.length)?),
        };
        let mut total = 0.0;
        for i in 0..len {
            let prefix = &cand.ids()[..i];
            let key = (len, prefix.to_vec());
            if !steps.contains_key(&key) {
                let mut assignment = r.assignment.clone();
                assignment.extend(prefix.iter().enumerate().map(|(j, &t)| (r.target_start + j, t)));
                let exact = joint.condition(&assignment, &[r.target_start + i])?;
                let logp = model.step(&exact.probs, query, len, prefix);
                steps.insert(key.clone(), logp);
            }
            total += steps[&key][cand.ids()[i] as usize];
        }
        out.push(total);
    }
    Ok(out)
}

fn oracle_capability(joint: &JointTable) -> Capability {
    Capability {
        max_context_len: None,
        multi_token: true,
        deterministic: true,
        vocab_size: Some(joint.vocab_size()),
    }
}

struct Exact;

impl StepModel for Exact {
    fn step(&self, exact: &[f64], _: &MaskedQuery, _: usize, _: &[u32]) -> Vec<f64> {
        exact.iter().map(|p| p.ln()).collect()
    }
}

/// Answers every query by exact conditioning on one joint, so its
/// conditionals are coherent by construction.
#[derive(Debug, Clone)]
pub struct ConsistentProvider {
    joint: Arc<JointTable>,
}

pub fn consistent_provider(joint: Arc<JointTable>) -> ConsistentProvider {
    ConsistentProvider { joint }
}

impl ConsistentProvider {
    pub fn joint(&self) -> &JointTable {
        &self.joint
    }
}

impl Provider for ConsistentProvider {
    fn capability(&self) -> Capability {
        oracle_capability(&self.joint)
    }

    fn score(&self, query: &MaskedQuery, candidates: &[TokenSeq]) -> Result<Vec<f64>> {
        score_with(&self.joint, &Exact, query, candidates)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation of the log-space noise, in nats.
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Domain(format!("noise sigma {sigma} must be >= 0")));
        }
        Ok(NoiseSpec { sigma, seed })
    }
}

/// Standard-normal draws for every vocabulary entry, keyed by the query, the
/// step and the tokens decoded so far.
fn noise_vector(domain: &str, seed: u64, query: &MaskedQuery, target_len: usize, prefix: &[u32], v: usize) -> Vec<f64> {
    let prefix_bytes: Vec<u8> = prefix.iter().flat_map(|t| t.to_le_bytes()).collect();
    let mut rng = SeedKey::new(domain)
        .u64(seed)
        .bytes(&query_fingerprint(query))
        .u64(target_len as u64)
        .bytes(&prefix_bytes)
        .rng();
    (0..v).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn log_softmax(mut xs: Vec<f64>) -> Vec<f64> {
    let lse = log_sum_exp(&xs);
    for x in &mut xs {
        *x -= lse;
    }
    xs
}

struct LogNoise(NoiseSpec);

impl StepModel for LogNoise {
    fn step(&self, exact: &[f64], query: &MaskedQuery, target_len: usize, prefix: &[u32]) -> Vec<f64> {
        let z = noise_vector("perturbed", self.0.seed, query, target_len, prefix, exact.len());
        let noisy = exact.iter().zip(z).map(|(p, z)| p.ln() + self.0.sigma * z).collect();
        log_softmax(noisy)
    }
}

/// Exact conditioning followed by iid `N(0, sigma^2)` log-space noise and
/// renormalization over the vocabulary. Every pattern, the baseline included,
/// sees its own noise draw; repeated queries see the same one.
#[derive(Debug, Clone)]
pub struct PerturbedProvider {
    joint: Arc<JointTable>,
    noise: NoiseSpec,
}

pub fn perturbed_provider(joint: Arc<JointTable>, noise: NoiseSpec) -> PerturbedProvider {
    PerturbedProvider { joint, noise }
}

impl Provider for PerturbedProvider {
    fn capability(&self) -> Capability {
        oracle_capability(&self.joint)
    }

    fn score(&self, query: &MaskedQuery, candidates: &[TokenSeq]) -> Result<Vec<f64>> {
        if self.noise.sigma == 0.0 {
            score_with(&self.joint, &Exact, query, candidates)
        } else {
            score_with(&self.joint, &LogNoise(self.noise), query, candidates)
        }
    }
}

/// Parameters of the confidence-correlated noise model.
///
/// At each step a noise vector `z` is drawn. If `log q + sigma_wrong * z`
/// still ranks the true top token first, the answer uses the small scale
/// `sigma_right`; otherwise it keeps `sigma_wrong`. The noisy logits are then
/// divided by `1 + flatten * sigma`, so wrong answers come out less peaked
/// than right ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedNoise {
    pub sigma_wrong: f64,
    pub sigma_right: f64,
    pub flatten: f64,
    pub seed: u64,
}

impl CalibratedNoise {
    pub fn new(sigma_wrong: f64, sigma_right: f64, flatten: f64, seed: u64) -> Result<Self> {
        let ok = |x: f64| x >= 0.0 && x.is_finite();
        if !(ok(sigma_wrong) && ok(sigma_right) && ok(flatten)) {
            return Err(Error::Domain("noise parameters must be finite and >= 0".into()));
        }
        Ok(CalibratedNoise {
            sigma_wrong,
            sigma_right,
            flatten,
            seed,
        })
    }

    /// Log-probabilities for one step given the exact distribution and the
    /// standard-normal draws.
    pub fn corrupt(&self, exact: &[f64], z: &[f64]) -> Vec<f64> {
        let logq: Vec<f64> = exact.iter().map(|p| p.ln()).collect();
        let top = argmax(&logq);
        let trial: Vec<f64> = logq.iter().zip(z).map(|(l, z)| l + self.sigma_wrong * z).collect();
        let sigma = if argmax(&trial) == top {
            self.sigma_right
        } else {
            self.sigma_wrong
        };
        let scale = 1.0 + self.flatten * sigma;
        log_softmax(logq.iter().zip(z).map(|(l, z)| (l + sigma * z) / scale).collect())
    }
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl StepModel for CalibratedNoise {
    fn step(&self, exact: &[f64], query: &MaskedQuery, target_len: usize, prefix: &[u32]) -> Vec<f64> {
        let z = noise_vector("calibrated", self.seed, query, target_len, prefix, exact.len());
        self.corrupt(exact, &z)
    }
}

/// Joint-backed provider with confidence-correlated noise.
#[derive(Debug, Clone)]
pub struct CalibratedNoiseProvider {
    joint: Arc<JointTable>,
    noise: CalibratedNoise,
}

pub fn calibrated_provider(joint: Arc<JointTable>, noise: CalibratedNoise) -> CalibratedNoiseProvider {
    CalibratedNoiseProvider { joint, noise }
}

impl Provider for CalibratedNoiseProvider {
    fn capability(&self) -> Capability {
        oracle_capability(&self.joint)
    }

    fn score(&self, query: &MaskedQuery, candidates: &[TokenSeq]) -> Result<Vec<f64>> {
        score_with(&self.joint, &self.noise, query, candidates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::random_joint;
    use crate::patterns::apply_pattern;
    use crate::types::{MaskPattern, Vocabulary};

    fn joint(v: usize, l: usize, seed: u64) -> Arc<JointTable> {
        Arc::new(random_joint(Vocabulary::numbered(v).unwrap(), l, seed).unwrap())
    }

    fn all_tokens(v: usize) -> Vec<TokenSeq> {
        (0..v as u32).map(|t| TokenSeq(vec![t])).collect()
    }

    #[test]
    fn full_support_scores_normalize() {
        let j = joint(4, 5, 1);
        let p = consistent_provider(j);
        let q = apply_pattern(&TokenSeq(vec![0, 1, 2, 3]), &MaskPattern::Baseline, 0).unwrap();
        let s = p.score(&q, &all_tokens(4)).unwrap();
        let total: f64 = s.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn baseline_koffset_multimask_agree() {
        let j = joint(3, 6, 2);
        let p = consistent_provider(j);
        let ctx = TokenSeq(vec![2, 0, 1, 1, 0]);
        let cands = all_tokens(3);
        let base = p
            .score(&apply_pattern(&ctx, &MaskPattern::Baseline, 0).unwrap(), &cands)
            .unwrap();
        for pat in [
            MaskPattern::KOffset { k: 2 },
            MaskPattern::Multimask { n: 1, s: 2, g: 1 },
        ] {
            let other = p.score(&apply_pattern(&ctx, &pat, 5).unwrap(), &cands).unwrap();
            for (a, b) in base.iter().zip(&other) {
                assert!((a.exp() - b.exp()).abs() < 1e-12, "{pat}");
            }
        }
    }

    #[test]
    fn two_token_candidate_follows_chain_rule() {
        let j = joint(3, 5, 3);
        let p = consistent_provider(j.clone());
        let ctx = TokenSeq(vec![1, 0, 2]);
        let q = apply_pattern(&ctx, &MaskPattern::Baseline, 0).unwrap();
        let s = p.score(&q, &[TokenSeq(vec![2, 1])]).unwrap()[0];
        // p(ctx, 2, 1) / p(ctx)
        let a: Vec<(usize, u32)> = vec![(0, 1), (1, 0), (2, 2)];
        let mut with = a.clone();
        with.extend([(3, 2), (4, 1)]);
        let expected = (j.mass(&with).unwrap() / j.mass(&a).unwrap()).ln();
        assert!((s - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_sigma_is_bit_identical() {
        let j = joint(3, 5, 4);
        let c = consistent_provider(j.clone());
        let pp = perturbed_provider(j, NoiseSpec::new(0.0, 99).unwrap());
        let ctx = TokenSeq(vec![0, 2, 1]);
        for pat in [MaskPattern::Baseline, MaskPattern::KOffset { k: 1 }] {
            let q = apply_pattern(&ctx, &pat, 0).unwrap();
            let cands = vec![TokenSeq(vec![0]), TokenSeq(vec![1, 2])];
            assert_eq!(c.score(&q, &cands).unwrap(), pp.score(&q, &cands).unwrap());
        }
    }

    #[test]
    fn perturbed_is_deterministic_and_noisy() {
        let j = joint(4, 5, 5);
        let pp = perturbed_provider(j.clone(), NoiseSpec::new(0.5, 1).unwrap());
        let c = consistent_provider(j);
        let q = apply_pattern(&TokenSeq(vec![0, 1, 2, 3]), &MaskPattern::Baseline, 0).unwrap();
        let cands = all_tokens(4);
        let a = pp.score(&q, &cands).unwrap();
        assert_eq!(a, pp.score(&q, &cands).unwrap());
        assert_ne!(a, c.score(&q, &cands).unwrap());
        let total: f64 = a.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn out_of_range_query() {
        let j = joint(2, 3, 6);
        let p = consistent_provider(j);
        let q = apply_pattern(&TokenSeq(vec![0, 1, 0]), &MaskPattern::Baseline, 0).unwrap();
        assert!(matches!(p.score(&q, &all_tokens(2)), Err(Error::Range { .. })));
    }

    #[test]
    fn calibrated_noise_keeps_right_answers_peaked() {
        let noise = CalibratedNoise::new(1.0, 0.0, 2.0, 0).unwrap();
        let exact = [0.6, 0.3, 0.1];
        // draws that keep token 0 on top: sigma_right = 0 returns the truth
        let right = noise.corrupt(&exact, &[0.1, 0.0, 0.0]);
        for (a, b) in right.iter().zip(exact) {
            assert!((a - b.ln()).abs() < 1e-12);
        }
        // draws that flip the winner: flattened by 1 + 2 * 1
        let wrong = noise.corrupt(&exact, &[-2.0, 0.0, 0.0]);
        assert_eq!(argmax(&wrong), 1);
        assert!(wrong[1].exp() < 0.6);
    }
}
