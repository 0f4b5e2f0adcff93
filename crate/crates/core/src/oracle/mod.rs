//! Exact joint distributions and the providers and checks built on them.
//!
//! A [`JointTable`] is the ground truth: every conditional it produces is
//! coherent by construction. [`ConsistentProvider`] exposes those conditionals
//! through the provider contract, [`PerturbedProvider`] corrupts them with a
//! known amount of noise, and [`check`] brute-forces every consistency
//! identity the diagnostics rely on.

pub mod check;
mod joint;
mod providers;

pub use joint::{random_joint, JointTable, TargetDistribution, MAX_TABLE_ENTRIES};
pub use providers::{
    calibrated_provider, consistent_provider, perturbed_provider, resolve, CalibratedNoise, CalibratedNoiseProvider,
    ConsistentProvider, NoiseSpec, PerturbedProvider, ResolvedQuery,
};

use crate::error::{Error, Result};
use crate::types::BigramQuadruple;

/// The eight exact conditionals of `quad` under `joint`, in
/// [`Conditional::ALL`](crate::types::Conditional::ALL) order.
pub fn exact_conditionals(joint: &JointTable, quad: &BigramQuadruple) -> Result<[f64; 8]> {
    let ctx = quad.context.ids();
    if ctx.len() > joint.length {
        return Err(Error::Range {
            position: ctx.len() - 1,
            length: joint.length,
        });
    }
    let (first, second) = (quad.slot, quad.slot + 1);
    let base: Vec<(usize, u32)> = ctx
        .iter()
        .enumerate()
        .filter(|(p, _)| *p != first && *p != second)
        .map(|(p, &t)| (p, t))
        .collect();
    let cond = |given: (usize, u32), target: usize, value: u32| -> Result<f64> {
        let mut a = base.clone();
        a.push(given);
        match joint.condition(&a, &[target]) {
            Ok(d) => Ok(d.probs[value as usize]),
            Err(Error::ZeroMass) => Err(Error::Degenerate(format!(
                "token {} at position {} is impossible in this context",
                given.1, given.0
            ))),
            Err(e) => Err(e),
        }
    };
    Ok([
        cond((first, quad.x11), second, quad.x21)?,
        cond((first, quad.x11), second, quad.x22)?,
        cond((first, quad.x12), second, quad.x21)?,
        cond((first, quad.x12), second, quad.x22)?,
        cond((second, quad.x21), first, quad.x11)?,
        cond((second, quad.x21), first, quad.x12)?,
        cond((second, quad.x22), first, quad.x11)?,
        cond((second, quad.x22), first, quad.x12)?,
    ])
}

/// `|log LHS - log RHS|` of the cross-ratio identity
///
/// ```text
/// p(x21|x11)/p(x22|x11) * p(x11|x22)/p(x12|x22)
///     = p(x11|x21)/p(x12|x21) * p(x21|x12)/p(x22|x12)
/// ```
///
/// evaluated on the exact conditionals of `joint`.
pub fn verify_cross_ratio(joint: &JointTable, quad: &BigramQuadruple) -> Result<f64> {
    let [x21_x11, x22_x11, x21_x12, x22_x12, x11_x21, x12_x21, x11_x22, x12_x22] = exact_conditionals(joint, quad)?;
    let all = [x21_x11, x22_x11, x21_x12, x22_x12, x11_x21, x12_x21, x11_x22, x12_x22];
    if all.iter().any(|&p| p <= 0.0) {
        return Err(Error::Degenerate(
            "a bigram of the quadruple has zero probability".into(),
        ));
    }
    let lhs = (x21_x11.ln() - x22_x11.ln()) + (x11_x22.ln() - x12_x22.ln());
    let rhs = (x11_x21.ln() - x12_x21.ln()) + (x21_x12.ln() - x22_x12.ln());
    Ok((lhs - rhs).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{TokenSeq, Vocabulary};

    #[test]
    fn uniform_joint_has_zero_residual() {
        let j = JointTable::uniform(Vocabulary::numbered(3).unwrap(), 4).unwrap();
        let q = BigramQuadruple::new(TokenSeq(vec![0, 1, 2, 0]), 1, 1, 0, 2, 1).unwrap();
        let c = exact_conditionals(&j, &q).unwrap();
        assert!(c.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
        assert_eq!(verify_cross_ratio(&j, &q).unwrap(), 0.0);
    }

    #[test]
    fn random_joints_satisfy_identity() {
        for seed in 0..50 {
            let j = random_joint(Vocabulary::numbered(3).unwrap(), 4, seed).unwrap();
            let q = BigramQuadruple::new(TokenSeq(vec![2, 0, 1, 1]), 1, 0, 2, 1, 0).unwrap();
            assert!(verify_cross_ratio(&j, &q).unwrap() < 1e-9);
        }
    }

    #[test]
    fn impossible_bigram_is_degenerate() {
        let vocab = Vocabulary::numbered(2).unwrap();
        // p(x1 = 1, x2 = 1) = 0
        let j = JointTable::from_weights(vocab, 2, vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        let q = BigramQuadruple::new(TokenSeq(vec![0, 0]), 0, 0, 1, 0, 1).unwrap();
        assert!(matches!(verify_cross_ratio(&j, &q), Err(Error::Degenerate(_))));
    }
}
