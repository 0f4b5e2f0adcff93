//! Bigram quadruple diagnostic.
//!
//! For four bigrams `{x11, x12} x {x21, x22}` in one context, any coherent
//! model satisfies
//!
//! ```text
//! p(x21|x11)/p(x22|x11) * p(x11|x22)/p(x12|x22)
//!     = p(x11|x21)/p(x12|x21) * p(x21|x12)/p(x22|x12)
//! ```
//!
//! so each of the eight conditionals can be solved from the other seven. The
//! gap between a solved value and the one the model actually reports measures
//! how far the model is from coherence.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::log_gap;
use crate::provider::{score_candidates, Provider};
use crate::seed::SeedKey;
use crate::types::{BigramQuadruple, EncoderItem, MaskedQuery, TokenSeq};

/// Probabilities below this are treated as zero mass.
pub const MIN_PROB: f64 = 1e-12;

/// Sign of each conditional's log in `log LHS - log RHS`, in
/// [`Conditional::ALL`](crate::types::Conditional::ALL) order.
const SIGNS: [f64; 8] = [1.0, -1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0];

/// How conditionals are read from the provider.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extraction {
    /// Mask the target position only; the other bigram position holds the
    /// conditioning token.
    #[default]
    SingleMask,
    /// Mask both positions and read the target one, leaving the other masked.
    BothMasked,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferOptions {
    #[serde(default)]
    pub extraction: Extraction,
    /// Renormalize each pair of values over the two relevant candidates.
    #[serde(default)]
    pub pairwise_normalize: bool,
}

fn query_for(quad: &BigramQuadruple, target_second: bool, given: u32, extraction: Extraction) -> MaskedQuery {
    let ctx = quad.context.ids();
    let mut encoder: Vec<EncoderItem> = ctx[..quad.slot].iter().map(|&t| EncoderItem::Token(t)).collect();
    let (fills, target_slot) = match (extraction, target_second) {
        (Extraction::SingleMask, true) => {
            encoder.extend([EncoderItem::Token(given), EncoderItem::Sentinel(0)]);
            (vec![], 0)
        }
        (Extraction::SingleMask, false) => {
            encoder.extend([EncoderItem::Sentinel(0), EncoderItem::Token(given)]);
            (vec![], 0)
        }
        (Extraction::BothMasked, true) => {
            encoder.extend([EncoderItem::Sentinel(0), EncoderItem::Sentinel(1)]);
            (vec![vec![]], 1)
        }
        (Extraction::BothMasked, false) => {
            encoder.extend([EncoderItem::Sentinel(0), EncoderItem::Sentinel(1)]);
            (vec![], 0)
        }
    };
    encoder.extend(ctx[quad.slot + 2..].iter().map(|&t| EncoderItem::Token(t)));
    MaskedQuery {
        encoder,
        fills,
        target_slot,
    }
}

/// Reads the eight conditionals of `quad` from `provider`, as probabilities in
/// [`Conditional::ALL`](crate::types::Conditional::ALL) order.
pub fn infer_eight(provider: &dyn Provider, quad: &BigramQuadruple, opts: InferOptions) -> Result<[f64; 8]> {
    let pair = |target_second: bool, given: u32, a: u32, b: u32| -> Result<[f64; 2]> {
        let q = query_for(quad, target_second, given, opts.extraction);
        let scores = match score_candidates(provider, &q, &[TokenSeq(vec![a]), TokenSeq(vec![b])]) {
            Ok(s) => s,
            Err(Error::NonFiniteScore { .. }) => {
                return Err(Error::Degenerate(
                    "provider returned zero mass for a quadruple token".into(),
                ))
            }
            Err(e) => return Err(e),
        };
        let (pa, pb) = (scores[0].exp(), scores[1].exp());
        if pa < MIN_PROB || pb < MIN_PROB {
            return Err(Error::Degenerate(format!(
                "provider mass below {MIN_PROB} for token {}",
                if pa < MIN_PROB { a } else { b }
            )));
        }
        Ok(if opts.pairwise_normalize {
            [pa / (pa + pb), pb / (pa + pb)]
        } else {
            [pa, pb]
        })
    };
    let [c0, c1] = pair(true, quad.x11, quad.x21, quad.x22)?;
    let [c2, c3] = pair(true, quad.x12, quad.x21, quad.x22)?;
    let [c4, c5] = pair(false, quad.x21, quad.x11, quad.x12)?;
    let [c6, c7] = pair(false, quad.x22, quad.x11, quad.x12)?;
    Ok([c0, c1, c2, c3, c4, c5, c6, c7])
}

fn check_positive(values: &[f64; 8], skip: Option<usize>) -> Result<()> {
    for (j, &v) in values.iter().enumerate() {
        if Some(j) != skip && !(v > 0.0 && v.is_finite()) {
            return Err(Error::Degenerate(format!("conditional {j} is {v}")));
        }
    }
    Ok(())
}

/// Log of conditional `index` solved from the other seven.
pub fn solve_one_log(inferred: &[f64; 8], index: usize) -> Result<f64> {
    if index >= 8 {
        return Err(Error::Domain(format!("conditional index {index} outside 0..8")));
    }
    check_positive(inferred, Some(index))?;
    let rest: f64 = (0..8)
        .filter(|&j| j != index)
        .map(|j| SIGNS[j] * inferred[j].ln())
        .sum();
    Ok(-SIGNS[index] * rest)
}

/// Conditional `index` solved from the other seven. May exceed 1.
pub fn solve_one(inferred: &[f64; 8], index: usize) -> Result<f64> {
    solve_one_log(inferred, index).map(f64::exp)
}

/// `|log LHS - log RHS|` of the cross-ratio identity for eight values.
pub fn cross_ratio_residual(values: &[f64; 8]) -> Result<f64> {
    check_positive(values, None)?;
    Ok(values.iter().zip(SIGNS).map(|(v, s)| s * v.ln()).sum::<f64>().abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrupleResult {
    pub quadruple: BigramQuadruple,
    pub inferred: Option<[f64; 8]>,
    pub solved: Option<[f64; 8]>,
    pub gaps: Option<[f64; 8]>,
    pub skipped_reason: Option<String>,
}

impl QuadrupleResult {
    fn skipped(quadruple: BigramQuadruple, reason: String) -> Self {
        QuadrupleResult {
            quadruple,
            inferred: None,
            solved: None,
            gaps: None,
            skipped_reason: Some(reason),
        }
    }

    pub fn mean_gap(&self) -> Option<f64> {
        self.gaps.map(|g| g.iter().sum::<f64>() / 8.0)
    }
}

/// Infers (or takes the stored) conditionals and solves all eight.
/// Degenerate quadruples come back skipped, never clamped.
pub fn evaluate_quadruple(
    provider: &dyn Provider,
    quad: &BigramQuadruple,
    opts: InferOptions,
) -> Result<QuadrupleResult> {
    let inferred = match quad.inferred {
        Some(v) => v,
        None => match infer_eight(provider, quad, opts) {
            Ok(v) => v,
            Err(Error::Degenerate(r)) => return Ok(QuadrupleResult::skipped(quad.clone(), r)),
            Err(e) => return Err(e),
        },
    };
    if let Some(j) = inferred.iter().position(|&p| !(p >= MIN_PROB && p.is_finite())) {
        return Ok(QuadrupleResult::skipped(
            quad.clone(),
            format!("conditional {j} = {} below {MIN_PROB}", inferred[j]),
        ));
    }
    let mut solved = [0.0; 8];
    let mut gaps = [0.0; 8];
    for i in 0..8 {
        let log_solved = solve_one_log(&inferred, i)?;
        solved[i] = log_solved.exp();
        gaps[i] = log_gap(log_solved, inferred[i].ln());
    }
    Ok(QuadrupleResult {
        quadruple: quad.clone(),
        inferred: Some(inferred),
        solved: Some(solved),
        gaps: Some(gaps),
        skipped_reason: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrupleStats {
    /// Mean gap over all eight solves of every evaluated quadruple.
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    /// Evaluated quadruples.
    pub n: usize,
    pub skipped: usize,
    /// Mean gap when only `p(x21|x11)` is solved.
    pub solve_first_mean: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summary statistics from evaluated quadruples. Quantiles are taken over
/// the individual gaps.
pub fn summarize(results: &[QuadrupleResult]) -> Result<QuadrupleStats> {
    let evaluated: Vec<&[f64; 8]> = results.iter().filter_map(|r| r.gaps.as_ref()).collect();
    if evaluated.is_empty() {
        return Err(Error::Degenerate(format!(
            "all {} quadruples were degenerate",
            results.len()
        )));
    }
    let mut all: Vec<f64> = evaluated.iter().flat_map(|g| g.iter().copied()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    all.sort_by(f64::total_cmp);
    let solve_first_mean = evaluated.iter().map(|g| g[0]).sum::<f64>() / evaluated.len() as f64;
    Ok(QuadrupleStats {
        mean,
        median: quantile(&all, 0.5),
        q25: quantile(&all, 0.25),
        q75: quantile(&all, 0.75),
        n: evaluated.len(),
        skipped: results.len() - evaluated.len(),
        solve_first_mean,
    })
}

/// Evaluates every quadruple (in parallel, order preserved) and summarizes.
pub fn quadruple_stats(
    quads: &[BigramQuadruple],
    provider: &dyn Provider,
    opts: InferOptions,
) -> Result<(QuadrupleStats, Vec<QuadrupleResult>)> {
    let results: Vec<QuadrupleResult> = quads
        .par_iter()
        .map(|q| evaluate_quadruple(provider, q, opts))
        .collect::<Result<_>>()?;
    Ok((summarize(&results)?, results))
}

/// Source of alternative bigrams for a position pair of a sequence.
pub trait BigramGenerator: Sync {
    fn propose(&self, seq: &TokenSeq, slot: usize) -> Result<Vec<(u32, u32)>>;
}

/// Proposes the same fixed set of bigrams everywhere.
#[derive(Debug, Clone, Default)]
pub struct FixedBigrams(pub BTreeSet<(u32, u32)>);

impl BigramGenerator for FixedBigrams {
    fn propose(&self, _: &TokenSeq, _: usize) -> Result<Vec<(u32, u32)>> {
        Ok(self.0.iter().copied().collect())
    }
}

/// Proposes every pairing of the `k` most probable tokens at each of the two
/// positions, each read with the other position held at its original token.
pub struct TopTokens<'a> {
    pub provider: &'a dyn Provider,
    pub vocab_size: usize,
    pub k: usize,
}

impl TopTokens<'_> {
    fn top(&self, quad_ctx: &BigramQuadruple, second: bool, given: u32) -> Result<Vec<u32>> {
        let q = query_for(quad_ctx, second, given, Extraction::SingleMask);
        let cands: Vec<TokenSeq> = (0..self.vocab_size as u32).map(|t| TokenSeq(vec![t])).collect();
        let scores = score_candidates(self.provider, &q, &cands)?;
        let mut order: Vec<u32> = (0..self.vocab_size as u32).collect();
        // stable: equal scores keep token order
        order.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]));
        order.truncate(self.k);
        Ok(order)
    }
}

impl BigramGenerator for TopTokens<'_> {
    fn propose(&self, seq: &TokenSeq, slot: usize) -> Result<Vec<(u32, u32)>> {
        let (a, b) = (seq.ids()[slot], seq.ids()[slot + 1]);
        let holder = BigramQuadruple {
            context: seq.clone(),
            slot,
            x11: a,
            x12: a,
            x21: b,
            x22: b,
            inferred: None,
        };
        let firsts = self.top(&holder, false, b)?;
        let seconds = self.top(&holder, true, a)?;
        let mut out = Vec::with_capacity(firsts.len() * seconds.len());
        for &x in &firsts {
            for &y in &seconds {
                out.push((x, y));
            }
        }
        Ok(out)
    }
}

/// Scans every adjacent position pair of every sequence. The original bigram
/// is `x11 x21`; a quadruple is emitted when some `x12 != x11`, `x22 != x21`
/// make all four combinations present among the original and the proposals.
/// When several completions exist one is picked with the seeded RNG.
pub fn generate_quadruples(
    corpus: &[TokenSeq],
    generator: &dyn BigramGenerator,
    max: usize,
    seed: u64,
) -> Result<Vec<BigramQuadruple>> {
    let mut out = Vec::new();
    for (si, seq) in corpus.iter().enumerate() {
        if seq.len() < 2 {
            continue;
        }
        for slot in 0..seq.len() - 1 {
            if out.len() >= max {
                return Ok(out);
            }
            let (a, b) = (seq.ids()[slot], seq.ids()[slot + 1]);
            let mut present: BTreeSet<(u32, u32)> = generator.propose(seq, slot)?.into_iter().collect();
            present.insert((a, b));
            let firsts: Vec<u32> = present
                .iter()
                .filter(|&&(x, y)| y == b && x != a)
                .map(|p| p.0)
                .collect();
            let seconds: Vec<u32> = present
                .iter()
                .filter(|&&(x, y)| x == a && y != b)
                .map(|p| p.1)
                .collect();
            let mut options = Vec::new();
            for &x12 in &firsts {
                for &x22 in &seconds {
                    if present.contains(&(x12, x22)) {
                        options.push((x12, x22));
                    }
                }
            }
            let mut rng = SeedKey::new("quadruple")
                .u64(seed)
                .u64(si as u64)
                .u64(slot as u64)
                .rng();
            if let Some(&(x12, x22)) = options.choose(&mut rng) {
                out.push(BigramQuadruple::new(seq.clone(), slot, a, x12, b, x22)?);
            }
        }
    }
    Ok(out)
}
