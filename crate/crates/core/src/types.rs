//! Domain types shared by every module.
//!
//! Types are plain data with public fields so they serialize naturally. The
//! checked constructors (`new`, `koffset`, ...) reject exactly the values
//! for which [`Validate::validate`] reports violations.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single violated invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: String,
    pub detail: String,
}

impl Violation {
    pub fn new(rule: &str, detail: impl Into<String>) -> Self {
        Violation {
            rule: rule.to_string(),
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.rule, self.detail)
    }
}

pub trait Validate {
    /// Every violated invariant; empty iff the value is well formed.
    fn validate(&self) -> Vec<Violation>;

    fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }
}

fn checked<T: Validate>(what: &'static str, value: T) -> Result<T> {
    let violations = value.validate();
    if violations.is_empty() {
        Ok(value)
    } else {
        Err(Error::Invalid { what, violations })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        checked("vocabulary", Vocabulary { tokens })
    }

    /// `t0, t1, ...` placeholder names for synthetic vocabularies.
    pub fn numbered(size: usize) -> Result<Self> {
        Self::new((0..size).map(|i| format!("t{i}")).collect())
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }
}

impl Validate for Vocabulary {
    fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.tokens.len() < 2 {
            out.push(Violation::new(
                "size >= 2",
                format!("vocabulary has {} tokens", self.tokens.len()),
            ));
        }
        let mut seen = HashSet::new();
        for t in &self.tokens {
            if !seen.insert(t.as_str()) {
                out.push(Violation::new("tokens distinct", format!("duplicate token {t:?}")));
            }
        }
        out
    }
}

/// A nonempty sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        checked("token sequence", TokenSeq(ids))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    /// Violations including the id range check against a vocabulary size.
    pub fn validate_in(&self, vocab_size: usize) -> Vec<Violation> {
        let mut out = self.validate();
        if let Some(&bad) = self.0.iter().find(|&&id| id as usize >= vocab_size) {
            out.push(Violation::new(
                "ids < |V|",
                format!("token id {bad} outside vocabulary of size {vocab_size}"),
            ));
        }
        out
    }
}

impl Validate for TokenSeq {
    fn validate(&self) -> Vec<Violation> {
        if self.0.is_empty() {
            vec![Violation::new("length >= 1", "empty token sequence")]
        } else {
            vec![]
        }
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(v: Vec<u32>) -> Self {
        TokenSeq(v)
    }
}

/// Which conditional the provider is asked for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum MaskPattern {
    /// A single mask appended after the context.
    Baseline,
    /// The last `k` context tokens are masked and handed to the decoder.
    #[serde(rename = "koffset")]
    KOffset { k: usize },
    /// `n` spans of length `s`, at least `g` tokens apart, are masked and
    /// handed to the decoder.
    Multimask { n: usize, s: usize, g: usize },
}

impl MaskPattern {
    pub fn koffset(k: usize) -> Result<Self> {
        checked("mask pattern", MaskPattern::KOffset { k })
    }

    pub fn multimask(n: usize, s: usize, g: usize) -> Result<Self> {
        checked("mask pattern", MaskPattern::Multimask { n, s, g })
    }

    /// Shortest context the pattern can be applied to.
    pub fn min_context_len(&self) -> usize {
        match *self {
            MaskPattern::Baseline => 1,
            MaskPattern::KOffset { k } => k + 1,
            MaskPattern::Multimask { n, s, g } => n * s + n.saturating_sub(1) * g,
        }
    }

    pub fn is_baseline(&self) -> bool {
        matches!(self, MaskPattern::Baseline)
    }
}

impl Validate for MaskPattern {
    fn validate(&self) -> Vec<Violation> {
        match *self {
            MaskPattern::Baseline => vec![],
            MaskPattern::KOffset { k: 0 } => {
                vec![Violation::new("k >= 1", "koffset with k = 0")]
            }
            MaskPattern::KOffset { .. } => vec![],
            MaskPattern::Multimask { n, s, .. } => {
                let mut out = vec![];
                if n == 0 {
                    out.push(Violation::new("n >= 1", "multimask with no spans"));
                }
                if s == 0 {
                    out.push(Violation::new("s >= 1", "multimask with empty spans"));
                }
                out
            }
        }
    }
}

impl fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            MaskPattern::Baseline => write!(f, "baseline"),
            MaskPattern::KOffset { k } => write!(f, "koffset({k})"),
            MaskPattern::Multimask { n, s, g } => write!(f, "multimask({n},{s},{g})"),
        }
    }
}

/// One element of the encoder input: a visible token or a mask placeholder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderItem {
    Token(u32),
    /// Mask placeholder for slot `i`; slots are numbered left to right from 0.
    Sentinel(usize),
}

/// A masked input plus the tokens already given for the slots preceding the
/// target.
///
/// `fills[i]` holds the given tokens for slot `i < target_slot`. An empty fill
/// leaves that slot open: it stands for one unknown token that is not supplied
/// to the decoder. Slots after the target are always open.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskedQuery {
    pub encoder: Vec<EncoderItem>,
    pub fills: Vec<Vec<u32>>,
    pub target_slot: usize,
}

impl MaskedQuery {
    pub fn new(encoder: Vec<EncoderItem>, fills: Vec<Vec<u32>>, target_slot: usize) -> Result<Self> {
        checked(
            "masked query",
            MaskedQuery {
                encoder,
                fills,
                target_slot,
            },
        )
    }

    pub fn slot_count(&self) -> usize {
        self.encoder
            .iter()
            .filter(|e| matches!(e, EncoderItem::Sentinel(_)))
            .count()
    }

    /// Given decoder tokens, flattened in slot order.
    pub fn decoder_prefix(&self) -> Vec<u32> {
        self.fills.iter().flatten().copied().collect()
    }

    /// Visible encoder tokens in order.
    pub fn visible_tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.encoder.iter().filter_map(|e| match e {
            EncoderItem::Token(t) => Some(*t),
            EncoderItem::Sentinel(_) => None,
        })
    }
}

impl Validate for MaskedQuery {
    fn validate(&self) -> Vec<Violation> {
        let mut out = vec![];
        let mut next = 0usize;
        for item in &self.encoder {
            if let EncoderItem::Sentinel(i) = *item {
                if i != next {
                    out.push(Violation::new(
                        "sentinels numbered in order",
                        format!("found slot {i} where slot {next} was expected"),
                    ));
                }
                next += 1;
            }
        }
        if self.target_slot >= next {
            out.push(Violation::new(
                "target slot exists",
                format!("target slot {} but only {next} sentinel slots", self.target_slot),
            ));
        }
        if self.fills.len() != self.target_slot {
            out.push(Violation::new(
                "fills precede target",
                format!("{} fills given for target slot {}", self.fills.len(), self.target_slot),
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub row: usize,
    pub reason: String,
}

/// Per-(pattern, candidate) log-probabilities. A row is `None` when its
/// pattern could not be applied to the instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScores {
    pub patterns: Vec<MaskPattern>,
    pub candidates: Vec<TokenSeq>,
    pub log_p: Vec<Option<Vec<f64>>>,
    #[serde(default)]
    pub skipped: Vec<SkipRecord>,
}

impl CandidateScores {
    /// Fully populated matrix, every row present.
    pub fn dense(patterns: Vec<MaskPattern>, candidates: Vec<TokenSeq>, rows: Vec<Vec<f64>>) -> Result<Self> {
        checked(
            "candidate scores",
            CandidateScores {
                patterns,
                candidates,
                log_p: rows.into_iter().map(Some).collect(),
                skipped: vec![],
            },
        )
    }

    pub fn rows(&self) -> usize {
        self.log_p.len()
    }

    pub fn row(&self, i: usize) -> Result<&[f64]> {
        match self.log_p.get(i) {
            Some(Some(r)) => Ok(r),
            Some(None) => Err(Error::SkippedRow(i)),
            None => Err(Error::Range {
                position: i,
                length: self.log_p.len(),
            }),
        }
    }

    pub fn is_present(&self, i: usize) -> bool {
        matches!(self.log_p.get(i), Some(Some(_)))
    }

    pub fn present_rows(&self) -> Vec<usize> {
        (0..self.log_p.len()).filter(|&i| self.is_present(i)).collect()
    }
}

impl Validate for CandidateScores {
    fn validate(&self) -> Vec<Violation> {
        let mut out = vec![];
        if self.log_p.len() != self.patterns.len() {
            out.push(Violation::new(
                "rows match patterns",
                format!("{} rows for {} patterns", self.log_p.len(), self.patterns.len()),
            ));
        }
        for (i, row) in self.log_p.iter().enumerate() {
            match row {
                Some(r) => {
                    if r.len() != self.candidates.len() {
                        out.push(Violation::new(
                            "columns match candidates",
                            format!(
                                "row {i} has {} entries for {} candidates",
                                r.len(),
                                self.candidates.len()
                            ),
                        ));
                    }
                    if let Some(j) = r.iter().position(|v| !v.is_finite()) {
                        out.push(Violation::new("entries finite", format!("entry ({i},{j}) = {}", r[j])));
                    }
                }
                None => {
                    if !self.skipped.iter().any(|s| s.row == i) {
                        out.push(Violation::new(
                            "skips recorded",
                            format!("row {i} missing without a skip record"),
                        ));
                    }
                }
            }
        }
        out
    }
}

/// One benchmark item: context, candidate completions and the gold index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub context: TokenSeq,
    pub candidates: Vec<TokenSeq>,
    pub gold: usize,
}

impl TaskInstance {
    pub fn new(id: impl Into<String>, context: TokenSeq, candidates: Vec<TokenSeq>, gold: usize) -> Result<Self> {
        checked(
            "task instance",
            TaskInstance {
                id: id.into(),
                context,
                candidates,
                gold,
            },
        )
    }
}

impl Validate for TaskInstance {
    fn validate(&self) -> Vec<Violation> {
        let mut out = self.context.validate();
        if self.candidates.len() < 2 {
            out.push(Violation::new(
                ">= 2 candidates",
                format!("{} candidates", self.candidates.len()),
            ));
        }
        if self.gold >= self.candidates.len() {
            out.push(Violation::new(
                "gold in range",
                format!("gold {} with {} candidates", self.gold, self.candidates.len()),
            ));
        }
        if let Some(j) = self.candidates.iter().position(|c| c.is_empty()) {
            out.push(Violation::new("candidates nonempty", format!("candidate {j} is empty")));
        }
        out
    }
}

/// The eight conditionals of a bigram quadruple, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Conditional {
    /// p(x21 | x11)
    X21GivenX11,
    /// p(x22 | x11)
    X22GivenX11,
    /// p(x21 | x12)
    X21GivenX12,
    /// p(x22 | x12)
    X22GivenX12,
    /// p(x11 | x21)
    X11GivenX21,
    /// p(x12 | x21)
    X12GivenX21,
    /// p(x11 | x22)
    X11GivenX22,
    /// p(x12 | x22)
    X12GivenX22,
}

impl Conditional {
    pub const ALL: [Conditional; 8] = [
        Conditional::X21GivenX11,
        Conditional::X22GivenX11,
        Conditional::X21GivenX12,
        Conditional::X22GivenX12,
        Conditional::X11GivenX21,
        Conditional::X12GivenX21,
        Conditional::X11GivenX22,
        Conditional::X12GivenX22,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        [
            "p(x21|x11)",
            "p(x22|x11)",
            "p(x21|x12)",
            "p(x22|x12)",
            "p(x11|x21)",
            "p(x12|x21)",
            "p(x11|x22)",
            "p(x12|x22)",
        ][self.index()]
    }
}

/// Four bigrams `{x11, x12} x {x21, x22}` at positions `slot, slot + 1` of a
/// shared context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BigramQuadruple {
    pub context: TokenSeq,
    pub slot: usize,
    pub x11: u32,
    pub x12: u32,
    pub x21: u32,
    pub x22: u32,
    /// Optional precomputed conditionals, ordered as [`Conditional::ALL`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inferred: Option<[f64; 8]>,
}

impl BigramQuadruple {
    pub fn new(context: TokenSeq, slot: usize, x11: u32, x12: u32, x21: u32, x22: u32) -> Result<Self> {
        checked(
            "bigram quadruple",
            BigramQuadruple {
                context,
                slot,
                x11,
                x12,
                x21,
                x22,
                inferred: None,
            },
        )
    }

    pub fn with_inferred(mut self, inferred: [f64; 8]) -> Result<Self> {
        self.inferred = Some(inferred);
        checked("bigram quadruple", self)
    }
}

impl Validate for BigramQuadruple {
    fn validate(&self) -> Vec<Violation> {
        let mut out = self.context.validate();
        if self.slot + 1 >= self.context.len() {
            out.push(Violation::new(
                "two adjacent positions",
                format!("slot {} in context of length {}", self.slot, self.context.len()),
            ));
        }
        if self.x11 == self.x12 {
            out.push(Violation::new("x11 != x12", format!("both are {}", self.x11)));
        }
        if self.x21 == self.x22 {
            out.push(Violation::new("x21 != x22", format!("both are {}", self.x21)));
        }
        if let Some(inf) = &self.inferred {
            for (c, v) in Conditional::ALL.iter().zip(inf) {
                if !(*v > 0.0 && *v <= 1.0) {
                    out.push(Violation::new("in (0,1]", format!("{} = {v}", c.label())));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(v: &[u32]) -> TokenSeq {
        TokenSeq(v.to_vec())
    }

    #[test]
    fn duplicate_vocabulary_token() {
        let v = Vocabulary {
            tokens: vec!["a".into(), "b".into(), "a".into()],
        };
        let errs = v.validate();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].rule, "tokens distinct");
        assert!(Vocabulary::new(v.tokens).is_err());
    }

    #[test]
    fn quadruple_with_zero_conditional() {
        let q = BigramQuadruple::new(seq(&[0, 1, 2]), 0, 0, 1, 1, 2).unwrap();
        let mut inf = [0.5; 8];
        inf[3] = 0.0;
        let errs = q.clone().with_inferred(inf).unwrap_err();
        match errs {
            Error::Invalid { violations, .. } => {
                assert_eq!(violations.len(), 1);
                assert_eq!(violations[0].rule, "in (0,1]");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn well_formed_task() {
        let t = TaskInstance::new(
            "q1",
            seq(&[1, 2, 3]),
            vec![seq(&[0]), seq(&[1]), seq(&[2]), seq(&[3, 1])],
            2,
        )
        .unwrap();
        assert!(t.validate().is_empty());
    }

    #[test]
    fn task_violations() {
        let t = TaskInstance {
            id: "x".into(),
            context: seq(&[]),
            candidates: vec![seq(&[1])],
            gold: 3,
        };
        let rules: Vec<_> = t.validate().into_iter().map(|v| v.rule).collect();
        assert_eq!(rules, ["length >= 1", ">= 2 candidates", "gold in range"]);
    }

    #[test]
    fn pattern_json_shape() {
        let p = MaskPattern::KOffset { k: 3 };
        assert_eq!(serde_json::to_string(&p).unwrap(), r#"{"variant":"koffset","k":3}"#);
        let b: MaskPattern = serde_json::from_str(r#"{"variant":"baseline"}"#).unwrap();
        assert_eq!(b, MaskPattern::Baseline);
        let m: MaskPattern = serde_json::from_str(r#"{"variant":"multimask","n":3,"s":5,"g":1}"#).unwrap();
        assert_eq!(m, MaskPattern::Multimask { n: 3, s: 5, g: 1 });
        assert!(MaskPattern::koffset(0).is_err());
        assert!(MaskPattern::multimask(1, 0, 0).is_err());
        assert!(MaskPattern::multimask(1, 1, 0).is_ok());
    }

    #[test]
    fn token_ids_checked_against_vocab() {
        assert!(seq(&[0, 3]).validate_in(4).is_empty());
        assert_eq!(seq(&[0, 4]).validate_in(4)[0].rule, "ids < |V|");
    }

    #[test]
    fn query_target_must_exist() {
        let enc = vec![EncoderItem::Token(1), EncoderItem::Sentinel(0)];
        assert!(MaskedQuery::new(enc.clone(), vec![], 0).is_ok());
        assert!(MaskedQuery::new(enc.clone(), vec![], 1).is_err());
        assert!(MaskedQuery::new(enc, vec![vec![2]], 0).is_err());
    }

    #[test]
    fn quadruple_json_without_inferred() {
        let q = BigramQuadruple::new(seq(&[5, 6, 7]), 1, 6, 1, 7, 2).unwrap();
        let s = serde_json::to_string(&q).unwrap();
        assert_eq!(s, r#"{"context":[5,6,7],"slot":1,"x11":6,"x12":1,"x21":7,"x22":2}"#);
        let back: BigramQuadruple = serde_json::from_str(&s).unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn scores_flag_non_finite_entries() {
        let s = CandidateScores {
            patterns: vec![MaskPattern::Baseline],
            candidates: vec![seq(&[0]), seq(&[1])],
            log_p: vec![Some(vec![-0.1, f64::NAN])],
            skipped: vec![],
        };
        assert_eq!(s.validate()[0].rule, "entries finite");
    }
}
