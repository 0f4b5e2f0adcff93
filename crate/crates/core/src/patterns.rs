//! Mask patterns: turning a context into a masked query, the preset pattern
//! lists, and validation-set pattern selection.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::provider::{score_candidates, Provider};
use crate::seed;
use crate::types::{EncoderItem, MaskPattern, MaskedQuery, TaskInstance, TokenSeq};

/// Builds the masked query for `pattern` over `context`.
///
/// - Baseline appends one sentinel; nothing is given to the decoder.
/// - `KOffset(k)` replaces the last `k` tokens with a sentinel, appends the
///   target sentinel, and gives the removed tokens to the decoder.
/// - `Multimask(n, s, g)` masks `n` spans of `s` tokens at least `g` apart,
///   placed uniformly at random among all feasible placements (seeded), gives
///   the masked tokens to the decoder in slot order and appends the target.
pub fn apply_pattern(context: &TokenSeq, pattern: &MaskPattern, seed: u64) -> Result<MaskedQuery> {
    let ids = context.ids();
    let required = pattern.min_context_len();
    if ids.len() < required {
        return Err(Error::PatternDoesNotFit {
            pattern: *pattern,
            len: ids.len(),
            required,
        });
    }
    let visible = |toks: &[u32]| toks.iter().map(|&t| EncoderItem::Token(t)).collect::<Vec<_>>();
    let query = match *pattern {
        MaskPattern::Baseline => {
            let mut encoder = visible(ids);
            encoder.push(EncoderItem::Sentinel(0));
            MaskedQuery {
                encoder,
                fills: vec![],
                target_slot: 0,
            }
        }
        MaskPattern::KOffset { k } => {
            let cut = ids.len() - k;
            let mut encoder = visible(&ids[..cut]);
            encoder.push(EncoderItem::Sentinel(0));
            encoder.push(EncoderItem::Sentinel(1));
            MaskedQuery {
                encoder,
                fills: vec![ids[cut..].to_vec()],
                target_slot: 1,
            }
        }
        MaskPattern::Multimask { n, s, g } => {
            let starts = multimask_starts(ids.len(), n, s, g, seed);
            let mut encoder = Vec::with_capacity(ids.len() + 1);
            let mut fills = Vec::with_capacity(n);
            let mut pos = 0;
            for &start in &starts {
                encoder.extend(visible(&ids[pos..start]));
                encoder.push(EncoderItem::Sentinel(fills.len()));
                fills.push(ids[start..start + s].to_vec());
                pos = start + s;
            }
            encoder.extend(visible(&ids[pos..]));
            encoder.push(EncoderItem::Sentinel(n));
            MaskedQuery {
                encoder,
                fills,
                target_slot: n,
            }
        }
    };
    debug_assert!(crate::types::Validate::is_valid(&query));
    Ok(query)
}

/// Span start positions for a multimask pattern.
///
/// Placements of `n` spans of length `s` with gaps of at least `g` in a
/// context of `len` tokens are in bijection with `n`-subsets of
/// `0..slack + n`, where `slack = len - (n*s + (n-1)*g)`: sorted subset
/// element `q_i` maps to start `q_i + i*(s + g - 1)`. Sampling a uniform
/// subset therefore samples a uniform placement.
fn multimask_starts(len: usize, n: usize, s: usize, g: usize, seed: u64) -> Vec<usize> {
    let slack = len - (n * s + (n - 1) * g);
    let mut rng = seed::rng(seed);
    let mut picks = sample(&mut rng, slack + n, n).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .enumerate()
        .map(|(i, q)| q + i * (s + g - 1))
        .collect()
}

/// Number of feasible multimask placements, `C(slack + n, n)`.
pub fn multimask_placements(len: usize, n: usize, s: usize, g: usize) -> u128 {
    let need = n * s + n.saturating_sub(1) * g;
    if n == 0 || len < need {
        return 0;
    }
    let top = (len - need + n) as u128;
    let mut acc: u128 = 1;
    for i in 0..n as u128 {
        acc = acc * (top - i) / (i + 1);
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ul2,
    T5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mmlu,
    Lambada,
    BigBench,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PresetKey {
    pub model: ModelKind,
    pub task: TaskKind,
}

impl PresetKey {
    pub const ALL: [PresetKey; 6] = [
        PresetKey {
            model: ModelKind::Ul2,
            task: TaskKind::Mmlu,
        },
        PresetKey {
            model: ModelKind::Ul2,
            task: TaskKind::Lambada,
        },
        PresetKey {
            model: ModelKind::Ul2,
            task: TaskKind::BigBench,
        },
        PresetKey {
            model: ModelKind::T5,
            task: TaskKind::Mmlu,
        },
        PresetKey {
            model: ModelKind::T5,
            task: TaskKind::Lambada,
        },
        PresetKey {
            model: ModelKind::T5,
            task: TaskKind::BigBench,
        },
    ];
}

impl fmt::Display for PresetKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = match self.model {
            ModelKind::Ul2 => "ul2",
            ModelKind::T5 => "t5",
        };
        let t = match self.task {
            TaskKind::Mmlu => "mmlu",
            TaskKind::Lambada => "lambada",
            TaskKind::BigBench => "bigbench",
        };
        write!(f, "{m}-{t}")
    }
}

impl FromStr for PresetKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PresetKey::ALL
            .into_iter()
            .find(|k| k.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Spec {
                spec: s.to_string(),
                reason: "expected <ul2|t5>-<mmlu|lambada|bigbench>".into(),
            })
    }
}

/// The ten conditionals used for each (model, task) pair: baseline, then
/// the K-offset list, then the multimask list.
pub fn preset_patterns(key: PresetKey) -> Vec<MaskPattern> {
    use {ModelKind::*, TaskKind::*};
    let (max_k, multimask): (usize, &[(usize, usize, usize)]) = match (key.model, key.task) {
        (Ul2, Mmlu) | (Ul2, Lambada) | (T5, Lambada) => (6, &[(3, 5, 1), (3, 5, 2), (3, 10, 1)]),
        (Ul2, BigBench) | (T5, Mmlu) | (T5, BigBench) => {
            (3, &[(3, 5, 1), (3, 5, 2), (3, 3, 1), (3, 3, 2), (3, 4, 1), (3, 4, 2)])
        }
    };
    std::iter::once(MaskPattern::Baseline)
        .chain((1..=max_k).map(|k| MaskPattern::KOffset { k }))
        .chain(multimask.iter().map(|&(n, s, g)| MaskPattern::Multimask { n, s, g }))
        .collect()
}

/// Ten patterns that all fit contexts of seven or more tokens, for
/// desk-scale synthetic runs.
pub fn compact_patterns() -> Vec<MaskPattern> {
    std::iter::once(MaskPattern::Baseline)
        .chain((1..=6).map(|k| MaskPattern::KOffset { k }))
        .chain([
            MaskPattern::Multimask { n: 1, s: 1, g: 0 },
            MaskPattern::Multimask { n: 1, s: 2, g: 0 },
            MaskPattern::Multimask { n: 2, s: 1, g: 1 },
        ])
        .collect()
}

/// Where a pattern list comes from: `preset:<model>-<task>`, `compact`, or
/// `file:<path>` (a JSON array of patterns).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PatternSpec {
    Preset(PresetKey),
    Compact,
    File(PathBuf),
}

impl PatternSpec {
    pub fn resolve(&self) -> Result<Vec<MaskPattern>> {
        let patterns = match self {
            PatternSpec::Preset(k) => preset_patterns(*k),
            PatternSpec::Compact => compact_patterns(),
            PatternSpec::File(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let patterns: Vec<MaskPattern> = serde_json::from_str(&text)?;
                for pat in &patterns {
                    let v = crate::types::Validate::validate(pat);
                    if !v.is_empty() {
                        return Err(Error::Invalid {
                            what: "mask pattern",
                            violations: v,
                        });
                    }
                }
                patterns
            }
        };
        if patterns.is_empty() {
            return Err(Error::Spec {
                spec: self.to_string(),
                reason: "empty pattern list".into(),
            });
        }
        Ok(patterns)
    }
}

impl FromStr for PatternSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(key) = s.strip_prefix("preset:") {
            Ok(PatternSpec::Preset(key.parse()?))
        } else if let Some(path) = s.strip_prefix("file:") {
            Ok(PatternSpec::File(PathBuf::from(path)))
        } else if s == "compact" {
            Ok(PatternSpec::Compact)
        } else {
            Err(Error::Spec {
                spec: s.to_string(),
                reason: "expected preset:<key>, compact or file:<path>".into(),
            })
        }
    }
}

impl TryFrom<String> for PatternSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PatternSpec> for String {
    fn from(p: PatternSpec) -> String {
        p.to_string()
    }
}

impl fmt::Display for PatternSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatternSpec::Preset(k) => write!(f, "preset:{k}"),
            PatternSpec::Compact => write!(f, "compact"),
            PatternSpec::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

/// How the multimask placement seed is chosen for each task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedPolicy {
    /// Seed derived from the base seed and the task id.
    PerQuestion,
    /// The base seed for every task.
    Fixed,
}

impl SeedPolicy {
    pub fn seed_for(self, base: u64, task_id: &str) -> u64 {
        match self {
            SeedPolicy::PerQuestion => seed::per_task(base, task_id),
            SeedPolicy::Fixed => base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternAccuracy {
    pub pattern: MaskPattern,
    pub accuracy: f64,
    pub applicable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub patterns: Vec<MaskPattern>,
    /// Accuracy of every candidate that applied to at least one item, in
    /// candidate order.
    pub accuracies: Vec<PatternAccuracy>,
    pub warnings: Vec<String>,
}

/// First index of the maximum; ties go to the lowest index.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Picks the `top` most accurate patterns on a validation set.
///
/// Accuracy is the fraction of applicable items whose single-conditional
/// argmax is the gold candidate. Ties keep candidate order. Baseline, when
/// among the candidates, is always kept: if it falls outside the top it
/// replaces the last pick.
pub fn select_patterns(
    validation: &[TaskInstance],
    candidates: &[MaskPattern],
    provider: &dyn Provider,
    top: usize,
    base_seed: u64,
    policy: SeedPolicy,
) -> Result<Selection> {
    if validation.is_empty() {
        return Err(Error::Domain("empty validation set".into()));
    }
    if top == 0 || top > candidates.len() {
        return Err(Error::Domain(format!(
            "top = {top} with {} candidate patterns",
            candidates.len()
        )));
    }
    let mut accuracies = Vec::new();
    let mut warnings = Vec::new();
    for pattern in candidates {
        let (mut correct, mut applicable) = (0usize, 0usize);
        for task in validation {
            let seed = policy.seed_for(base_seed, &task.id);
            let query = match apply_pattern(&task.context, pattern, seed) {
                Ok(q) => q,
                Err(Error::PatternDoesNotFit { .. }) => continue,
                Err(e) => return Err(e),
            };
            let scores = score_candidates(provider, &query, &task.candidates)?;
            applicable += 1;
            if argmax(&scores) == task.gold {
                correct += 1;
            }
        }
        if applicable == 0 {
            warnings.push(format!("{pattern} applies to no validation item; excluded"));
            continue;
        }
        accuracies.push(PatternAccuracy {
            pattern: *pattern,
            accuracy: correct as f64 / applicable as f64,
            applicable,
        });
    }
    let mut ranked: Vec<&PatternAccuracy> = accuracies.iter().collect();
    ranked.sort_by(|a, b| b.accuracy.total_cmp(&a.accuracy));
    let mut patterns: Vec<MaskPattern> = ranked.iter().take(top).map(|a| a.pattern).collect();
    let has_baseline = ranked.iter().any(|a| a.pattern.is_baseline());
    if has_baseline && !patterns.iter().any(MaskPattern::is_baseline) {
        patterns.pop();
        patterns.push(MaskPattern::Baseline);
    }
    Ok(Selection {
        patterns,
        accuracies,
        warnings,
    })
}
