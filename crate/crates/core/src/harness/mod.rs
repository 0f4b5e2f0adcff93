//! Task ingestion and synthesis, provider construction, and experiment runs.

mod run;
mod spec;

pub use run::{parse_m_values, run_experiment, Aggregate, ExperimentConfig, FileResult, RunRecord, Timing};
pub use spec::{build_provider, JointSource, ProviderSpec, ENDPOINT_ENV};

use std::io::Write;
use std::path::Path;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::oracle::JointTable;
use crate::patterns::{apply_pattern, argmax};
use crate::provider::{score_candidates, Provider};
use crate::seed::SeedKey;
use crate::types::{BigramQuadruple, MaskPattern, TaskInstance, TokenSeq, Validate};

/// Offending lines listed in a schema error.
const MAX_REPORTED_LINES: usize = 10;

/// Reads a JSONL file of validated records. Blank lines are ignored; every
/// malformed line is found, and the first ten are reported with their line
/// numbers.
pub fn load_jsonl<T: DeserializeOwned + Validate>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    let mut bad = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(line) {
            Ok(item) => {
                let v = item.validate();
                if v.is_empty() {
                    items.push(item);
                } else {
                    let detail: Vec<String> = v.iter().map(|v| v.to_string()).collect();
                    bad.push(format!("line {}: {}", n + 1, detail.join("; ")));
                }
            }
            Err(e) => bad.push(format!("line {}: {e}", n + 1)),
        }
    }
    if !bad.is_empty() {
        let total = bad.len();
        bad.truncate(MAX_REPORTED_LINES);
        if total > MAX_REPORTED_LINES {
            bad.push(format!("... and {} more", total - MAX_REPORTED_LINES));
        }
        return Err(Error::Schema {
            path: path.to_path_buf(),
            lines: bad,
        });
    }
    if items.is_empty() {
        log::warn!("{}: no records", path.display());
    }
    Ok(items)
}

pub fn load_tasks(path: &Path) -> Result<Vec<TaskInstance>> {
    load_jsonl(path)
}

pub fn load_quadruples(path: &Path) -> Result<Vec<BigramQuadruple>> {
    load_jsonl(path)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    write_file(path, &out)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Multiple-choice tasks drawn from `joint`.
///
/// Each context is the first `L - 1` tokens of a sequence sampled from the
/// joint. The gold candidate is the argmax of the exact conditional at the
/// last position; distractors are other tokens drawn without replacement.
/// Candidates are shuffled.
pub fn synth_tasks(joint: &JointTable, n: usize, candidates_per_task: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    let v = joint.vocab_size();
    if candidates_per_task < 2 {
        return Err(Error::Domain(format!(
            "{candidates_per_task} candidates per task; need at least 2"
        )));
    }
    if candidates_per_task > v {
        return Err(Error::Domain(format!(
            "{candidates_per_task} candidates from a vocabulary of {v}"
        )));
    }
    if joint.length < 2 {
        return Err(Error::Domain("joint length must be at least 2".into()));
    }
    let last = joint.length - 1;
    (0..n)
        .map(|i| {
            let mut rng = SeedKey::new("synth-task").u64(seed).u64(i as u64).rng();
            let seq = joint.sample(&mut rng);
            let assignment: Vec<(usize, u32)> = seq[..last].iter().enumerate().map(|(p, &t)| (p, t)).collect();
            let dist = joint.condition(&assignment, &[last])?;
            let gold_token = argmax(&dist.probs) as u32;
            let mut tokens: Vec<u32> = (0..v as u32)
                .filter(|&t| t != gold_token)
                .choose_multiple(&mut rng, candidates_per_task - 1);
            tokens.push(gold_token);
            tokens.shuffle(&mut rng);
            let gold = tokens.iter().position(|&t| t == gold_token).unwrap_or(0);
            TaskInstance::new(
                format!("synth-{i}"),
                TokenSeq(seq[..last].to_vec()),
                tokens.into_iter().map(|t| TokenSeq(vec![t])).collect(),
                gold,
            )
        })
        .collect()
}

/// Random quadruples over sequences sampled from `joint`: a random adjacent
/// pair keeps its sampled tokens as `x11 x21`, with random alternatives for
/// `x12` and `x22`.
pub fn synth_quadruples(joint: &JointTable, n: usize, seed: u64) -> Result<Vec<BigramQuadruple>> {
    let v = joint.vocab_size() as u32;
    if v < 2 || joint.length < 2 {
        return Err(Error::Domain("quadruples need |V| >= 2 and L >= 2".into()));
    }
    (0..n)
        .map(|i| {
            let mut rng = SeedKey::new("synth-quadruple").u64(seed).u64(i as u64).rng();
            let seq = joint.sample(&mut rng);
            let slot = rng.gen_range(0..joint.length - 1);
            let x12 = (seq[slot] + rng.gen_range(1..v)) % v;
            let x22 = (seq[slot + 1] + rng.gen_range(1..v)) % v;
            BigramQuadruple::new(TokenSeq(seq.clone()), slot, seq[slot], x12, seq[slot + 1], x22)
        })
        .collect()
}

/// Default number of last-word candidates per item.
pub const LAMBADA_CANDIDATES: usize = 5;

/// The `count` single tokens the Baseline conditional ranks highest; equal
/// scores keep token order.
pub fn lambada_candidates(provider: &dyn Provider, context: &TokenSeq, count: usize) -> Result<Vec<TokenSeq>> {
    if count < 2 {
        return Err(Error::Domain(format!("{count} candidates; need at least 2")));
    }
    let v = provider
        .capability()
        .vocab_size
        .ok_or_else(|| Error::Capability("provider does not expose its vocabulary size".into()))?;
    if count > v {
        return Err(Error::Domain(format!("{count} candidates from a vocabulary of {v}")));
    }
    let query = apply_pattern(context, &MaskPattern::Baseline, 0)?;
    let all: Vec<TokenSeq> = (0..v as u32).map(|t| TokenSeq(vec![t])).collect();
    let scores = score_candidates(provider, &query, &all)?;
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order.into_iter().take(count).map(|t| all[t].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{consistent_provider, random_joint};
    use crate::types::Vocabulary;
    use std::sync::Arc;

    #[test]
    fn synth_is_deterministic_and_valid() {
        let j = random_joint(Vocabulary::numbered(4).unwrap(), 6, 3).unwrap();
        let a = synth_tasks(&j, 500, 4, 9).unwrap();
        assert_eq!(a.len(), 500);
        assert!(a
            .iter()
            .all(|t| t.is_valid() && t.candidates.len() == 4 && t.context.len() == 5));
        assert_eq!(a, synth_tasks(&j, 500, 4, 9).unwrap());
    }

    #[test]
    fn synth_rejects_bad_counts() {
        let j = random_joint(Vocabulary::numbered(3).unwrap(), 3, 0).unwrap();
        assert!(synth_tasks(&j, 5, 1, 0).is_err());
        assert!(synth_tasks(&j, 5, 4, 0).is_err());
    }

    #[test]
    fn lambada_on_uniform_takes_first_tokens() {
        let j = Arc::new(JointTable::uniform(Vocabulary::numbered(8).unwrap(), 4).unwrap());
        let p = consistent_provider(j);
        let c = lambada_candidates(&p, &TokenSeq(vec![1, 2, 3]), LAMBADA_CANDIDATES).unwrap();
        assert_eq!(c, (0..5).map(|t| TokenSeq(vec![t])).collect::<Vec<_>>());
        assert!(lambada_candidates(&p, &TokenSeq(vec![1, 2, 3]), 1).is_err());
    }

    #[test]
    fn lambada_matches_exact_top_five() {
        let j = Arc::new(random_joint(Vocabulary::numbered(8).unwrap(), 4, 5).unwrap());
        let p = consistent_provider(j.clone());
        let ctx = [3u32, 1, 6];
        let dist = j.condition(&[(0, 3), (1, 1), (2, 6)], &[3]).unwrap();
        let mut order: Vec<u32> = (0..8).collect();
        order.sort_by(|&a, &b| dist.probs[b as usize].total_cmp(&dist.probs[a as usize]));
        let got = lambada_candidates(&p, &TokenSeq(ctx.to_vec()), 5).unwrap();
        let want: Vec<TokenSeq> = order[..5].iter().map(|&t| TokenSeq(vec![t])).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn schema_errors_name_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let good = r#"{"id":"a","context":[1,2],"candidates":[[1],[2]],"gold":0}"#;
        let bad = r#"{"id":"b","context":[1,2],"candidates":[[1],[2]],"gold":5}"#;
        std::fs::write(&path, format!("{good}\n{bad}\nnot json\n")).unwrap();
        match load_tasks(&path) {
            Err(Error::Schema { lines, .. }) => {
                assert_eq!(lines.len(), 2);
                assert!(lines[0].starts_with("line 2:"));
                assert!(lines[1].starts_with("line 3:"));
            }
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, format!("{good}\n{good}\n\n{good}\n")).unwrap();
        assert_eq!(load_tasks(&path).unwrap().len(), 3);
        std::fs::write(&path, "").unwrap();
        assert!(load_tasks(&path).unwrap().is_empty());
    }
}
