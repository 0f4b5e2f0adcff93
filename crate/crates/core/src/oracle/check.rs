//! Brute-force invariant suite over random joints.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    consistent_provider, exact_conditionals, perturbed_provider, random_joint, verify_cross_ratio, JointTable,
    NoiseSpec,
};
use crate::bigram::{infer_eight, solve_one_log, InferOptions};
use crate::error::{Error, Result};
use crate::patterns::{apply_pattern, compact_patterns, preset_patterns, PresetKey};
use crate::provider::{score_candidates, Provider};
use crate::seed::SeedKey;
use crate::types::{BigramQuadruple, MaskPattern, TokenSeq, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub vocab: usize,
    pub len: usize,
    pub joints: usize,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

#[derive(Default)]
struct Acc {
    cases: usize,
    max_error: f64,
}

impl Acc {
    fn add(&mut self, err: f64) {
        self.cases += 1;
        // NaN must fail the check
        if err.is_nan() || err > self.max_error {
            self.max_error = if err.is_nan() { f64::INFINITY } else { err };
        }
    }

    fn finish(self, name: &str, tolerance: f64) -> CheckResult {
        CheckResult {
            name: name.into(),
            cases: self.cases,
            max_error: self.max_error,
            tolerance,
            passed: self.cases > 0 && self.max_error <= tolerance,
        }
    }
}

/// Every distinct pattern from the presets and the compact set.
pub fn all_known_patterns() -> Vec<MaskPattern> {
    let mut out: Vec<MaskPattern> = Vec::new();
    for p in PresetKey::ALL
        .iter()
        .flat_map(|&k| preset_patterns(k))
        .chain(compact_patterns())
    {
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

fn all_tokens(v: usize) -> Vec<TokenSeq> {
    (0..v as u32).map(|t| TokenSeq(vec![t])).collect()
}

fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Runs every check on `joints` random joints of shape `vocab^len`.
pub fn run_invariant_suite(vocab: usize, len: usize, joints: usize, seed: u64) -> Result<OracleReport> {
    if len < 2 {
        return Err(Error::Domain(format!(
            "length {len}; the suite needs at least 2 positions"
        )));
    }
    if vocab < 2 {
        return Err(Error::Domain(format!(
            "vocabulary of {vocab}; the suite needs at least 2 tokens"
        )));
    }
    if joints == 0 {
        return Err(Error::Domain("no joints requested".into()));
    }
    let vocabulary = Vocabulary::numbered(vocab)?;
    let patterns = all_known_patterns();
    let cands = all_tokens(vocab);
    let mut norm = Acc::default();
    let mut chain = Acc::default();
    let mut invariance = Acc::default();
    let mut cross = Acc::default();
    let mut round_trip = Acc::default();
    let mut zero_noise = Acc::default();

    for j in 0..joints {
        let joint_seed = SeedKey::new("oracle-check").u64(seed).u64(j as u64).finish();
        let joint = Arc::new(random_joint(vocabulary.clone(), len, joint_seed)?);
        let mut rng = SeedKey::new("oracle-check-cases").u64(joint_seed).rng();
        let seq = joint.sample(&mut rng);

        // normalization and chain consistency over a random partial assignment
        let t1 = rng.gen_range(0..len);
        let t2 = (t1 + 1 + rng.gen_range(0..len - 1)) % len;
        let assignment: Vec<(usize, u32)> = (0..len)
            .filter(|&p| p != t1 && p != t2 && rng.gen_bool(0.5))
            .map(|p| (p, seq[p]))
            .collect();
        let single = joint.condition(&assignment, &[t1])?;
        norm.add((single.probs.iter().sum::<f64>() - 1.0).abs());
        let pair = joint.condition(&assignment, &[t1, t2])?;
        norm.add((pair.probs.iter().sum::<f64>() - 1.0).abs());
        for a in 0..vocab {
            let marginal: f64 = (0..vocab).map(|b| pair.prob_of(&[a as u32, b as u32], vocab)).sum();
            chain.add((marginal - single.probs[a]).abs());
        }

        // pattern invariance against the baseline answer
        let provider = consistent_provider(joint.clone());
        let context = TokenSeq(seq[..len - 1].to_vec());
        let baseline = apply_pattern(&context, &MaskPattern::Baseline, joint_seed)?;
        let reference: Vec<f64> = score_candidates(&provider, &baseline, &cands)?
            .into_iter()
            .map(f64::exp)
            .collect();
        norm.add((reference.iter().sum::<f64>() - 1.0).abs());
        for p in &patterns {
            let query = match apply_pattern(&context, p, joint_seed) {
                Ok(q) => q,
                Err(Error::PatternDoesNotFit { .. }) => continue,
                Err(e) => return Err(e),
            };
            let probs: Vec<f64> = score_candidates(&provider, &query, &cands)?
                .into_iter()
                .map(f64::exp)
                .collect();
            invariance.add(total_variation(&reference, &probs));
        }

        // cross-ratio and solve round trip on a random quadruple
        let slot = rng.gen_range(0..len - 1);
        let x12 = (seq[slot] + rng.gen_range(1..vocab as u32)) % vocab as u32;
        let x22 = (seq[slot + 1] + rng.gen_range(1..vocab as u32)) % vocab as u32;
        let quad = BigramQuadruple::new(TokenSeq(seq.clone()), slot, seq[slot], x12, seq[slot + 1], x22)?;
        match verify_cross_ratio(&joint, &quad) {
            Ok(r) => cross.add(r),
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
        check_round_trip(&joint, &provider, &quad, &mut round_trip)?;

        // zero-noise identity
        let zero = perturbed_provider(joint.clone(), NoiseSpec::new(0.0, joint_seed)?);
        for p in patterns.iter().take(4) {
            if let Ok(q) = apply_pattern(&context, p, joint_seed) {
                let a = provider.score(&q, &cands)?;
                let b = zero.score(&q, &cands)?;
                let identical = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
                zero_noise.add(if identical { 0.0 } else { f64::INFINITY });
            }
        }
    }

    let checks = vec![
        norm.finish("normalization", 1e-9),
        chain.finish("chain_consistency", 1e-9),
        invariance.finish("pattern_invariance", 1e-9),
        cross.finish("cross_ratio", 1e-9),
        round_trip.finish("solve_round_trip", 1e-9),
        zero_noise.finish("zero_noise_identity", 0.0),
    ];
    let passed = checks.iter().all(|c| c.passed);
    Ok(OracleReport {
        vocab,
        len,
        joints,
        seed,
        checks,
        passed,
    })
}

fn check_round_trip(joint: &JointTable, provider: &dyn Provider, quad: &BigramQuadruple, acc: &mut Acc) -> Result<()> {
    let exact = match exact_conditionals(joint, quad) {
        Ok(e) => e,
        Err(Error::Degenerate(_)) => return Ok(()),
        Err(e) => return Err(e),
    };
    let inferred = infer_eight(provider, quad, InferOptions::default())?;
    for i in 0..8 {
        acc.add((inferred[i] - exact[i]).abs());
        acc.add((solve_one_log(&inferred, i)? - inferred[i].ln()).abs());
    }
    Ok(())
}
