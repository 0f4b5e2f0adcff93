use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::spec::{build_provider, JointSource, ProviderSpec};
use super::{load_quadruples, load_tasks, write_file};
use crate::bigram::{quadruple_stats, Extraction, InferOptions, QuadrupleStats};
use crate::ensemble::{accuracy_from_scores, AccuracyCurve, Pooling};
use crate::error::{Error, Result};
use crate::metrics::{check_m_values, disagreement_from_scores, DisagreementCurve, DisagreementPoint};
use crate::patterns::{PatternSpec, SeedPolicy};
use crate::provider::{score_tasks, InstanceError, ScoreOptions};
use crate::types::{CandidateScores, MaskPattern};

/// Parses `a..b` (inclusive), `a..=b`, a comma list, or a single value.
pub fn parse_m_values(s: &str) -> Result<Vec<usize>> {
    let bad = |reason: &str| Error::Spec {
        spec: s.to_string(),
        reason: reason.to_string(),
    };
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad("expected integers"));
    let values: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a > b {
            return Err(bad("empty range"));
        }
        (a..=b).collect()
    } else {
        s.split(',').map(num).collect::<Result<_>>()?
    };
    let unique: BTreeSet<usize> = values.iter().copied().collect();
    if unique.len() != values.len() {
        return Err(bad("repeated value"));
    }
    Ok(unique.into_iter().collect())
}

fn default_true() -> bool {
    true
}

fn default_policy() -> SeedPolicy {
    SeedPolicy::PerQuestion
}

fn default_cap() -> usize {
    1_000_000
}

fn default_budget() -> f64 {
    0.01
}

/// Everything needed to reproduce a run; also the JSON config file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub provider: ProviderSpec,
    /// Joint for `perturbed` and `calibrated` providers.
    #[serde(default)]
    pub joint: Option<JointSource>,
    pub patterns: PatternSpec,
    #[serde(default)]
    pub tasks: Vec<PathBuf>,
    /// Quadruple JSONL for the bigram diagnostic.
    #[serde(default)]
    pub quadruples: Option<PathBuf>,
    pub m: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_policy")]
    pub seed_policy: SeedPolicy,
    pub out: PathBuf,
    #[serde(default)]
    pub score: ScoreOptions,
    #[serde(default)]
    pub bigram: InferOptions,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default = "default_true")]
    pub disagreement: bool,
    #[serde(default = "default_true")]
    pub accuracy: bool,
    /// Drop task files whose Baseline accuracy is at or below this from the
    /// aggregates.
    #[serde(default)]
    pub accuracy_filter: Option<f64>,
    /// Score matrices are stored in the record only below this many entries.
    #[serde(default = "default_cap")]
    pub matrix_cap: usize,
    #[serde(default)]
    pub jobs: Option<usize>,
    /// Largest tolerated fraction of failed instances.
    #[serde(default = "default_budget")]
    pub error_budget: f64,
}

impl ExperimentConfig {
    pub fn new(provider: ProviderSpec, patterns: PatternSpec, m: &str, out: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            provider,
            joint: None,
            patterns,
            tasks: Vec::new(),
            quadruples: None,
            m: m.to_string(),
            seed: 0,
            seed_policy: default_policy(),
            out: out.into(),
            score: ScoreOptions::default(),
            bigram: InferOptions {
                extraction: Extraction::SingleMask,
                pairwise_normalize: false,
            },
            pooling: Pooling::Max,
            disagreement: true,
            accuracy: true,
            accuracy_filter: None,
            matrix_cap: default_cap(),
            jobs: None,
            error_budget: default_budget(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileResult {
    pub path: PathBuf,
    /// Stem used for this file's CSV names.
    pub name: String,
    pub instances: usize,
    pub scored: usize,
    pub errors: Vec<InstanceError>,
    pub disagreement: Option<Vec<DisagreementPoint>>,
    pub accuracy: Option<AccuracyCurve>,
    pub matrices: Option<Vec<Option<CandidateScores>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatePoint {
    pub m: usize,
    pub macro_rate: Option<f64>,
    pub micro_rate: Option<f64>,
    pub macro_accuracy: Option<f64>,
    pub micro_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub files: Vec<String>,
    pub points: Vec<AggregatePoint>,
}

impl Aggregate {
    /// CSV with columns `m,macro_rate,micro_rate,macro_accuracy,micro_accuracy`.
    pub fn to_csv(&self) -> String {
        let f = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("m,macro_rate,micro_rate,macro_accuracy,micro_accuracy\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.m,
                f(p.macro_rate),
                f(p.micro_rate),
                f(p.macro_accuracy),
                f(p.micro_accuracy)
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub scoring_secs: f64,
    pub total_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub patterns: Vec<MaskPattern>,
    pub m_values: Vec<usize>,
    pub files: Vec<FileResult>,
    /// Files left out of the aggregates by the accuracy filter.
    pub excluded: Vec<String>,
    pub aggregate: Option<Aggregate>,
    pub bigram: Option<QuadrupleStats>,
    pub failed_instances: usize,
    pub total_instances: usize,
    pub violations: Vec<String>,
    pub timing: Timing,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn aggregate(files: &[&FileResult], m_values: &[usize]) -> Aggregate {
    let points = m_values
        .iter()
        .map(|&m| {
            let dpoints: Vec<&DisagreementPoint> = files
                .iter()
                .filter_map(|f| f.disagreement.as_ref()?.iter().find(|p| p.m == m))
                .collect();
            let (d, e) = dpoints
                .iter()
                .fold((0u64, 0u64), |(d, e), p| (d + p.disagreements, e + p.evaluated));
            let acc: Vec<(f64, usize)> = files
                .iter()
                .filter_map(|f| Some((f.accuracy.as_ref()?.mean_at(m)?, f.scored)))
                .collect();
            let weight: usize = acc.iter().map(|a| a.1).sum();
            AggregatePoint {
                m,
                macro_rate: mean(dpoints.iter().filter_map(|p| p.rate)),
                micro_rate: (e > 0).then(|| d as f64 / e as f64),
                macro_accuracy: mean(acc.iter().map(|a| a.0)),
                micro_accuracy: (weight > 0)
                    .then(|| acc.iter().map(|(a, n)| a * *n as f64).sum::<f64>() / weight as f64),
            }
        })
        .collect();
    Aggregate {
        files: files.iter().map(|f| f.name.clone()).collect(),
        points,
    }
}

fn check_invariants(file: &FileResult, out: &mut Vec<String>) {
    if let Some(points) = &file.disagreement {
        let curve = DisagreementCurve {
            points: points.clone(),
            errors: vec![],
        };
        for p in points {
            if let Some(r) = p.rate {
                if !(0.0..=1.0).contains(&r) {
                    out.push(format!("{}: disagreement rate {r} at m={}", file.name, p.m));
                }
                if p.m == 1 && r != 0.0 {
                    out.push(format!("{}: nonzero disagreement {r} at m=1", file.name));
                }
            }
        }
        if !curve.has_skips() && !curve.is_monotone() {
            out.push(format!("{}: disagreement decreases with m", file.name));
        }
    }
    if let Some(acc) = &file.accuracy {
        for p in &acc.points {
            for a in [p.mean_accuracy, p.min_accuracy, p.max_accuracy].into_iter().flatten() {
                if !(0.0..=1.0).contains(&a) {
                    out.push(format!("{}: accuracy {a} at m={}", file.name, p.m));
                }
            }
        }
    }
}

fn unique_name(path: &Path, taken: &mut BTreeSet<String>) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "tasks".into());
    let mut name = stem.clone();
    let mut i = 2;
    while !taken.insert(name.clone()) {
        name = format!("{stem}-{i}");
        i += 1;
    }
    name
}

/// Runs every configured diagnostic and writes, under `config.out`:
///
/// - `disagreement_<name>.csv` and `accuracy_<name>.csv` per task file;
/// - `aggregate.csv` with macro and micro averages over task files;
/// - `bigram.json` when quadruples are given;
/// - `run_record.json`.
///
/// The record is written even when the run then fails its error budget or an
/// invariant check.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecord> {
    let started = Instant::now();
    let patterns = config.patterns.resolve()?;
    let m_values = parse_m_values(&config.m)?;
    check_m_values(&m_values, patterns.len())?;
    if config.provider.needs_joint() && config.joint.is_none() {
        return Err(Error::Spec {
            spec: config.provider.to_string(),
            reason: "this provider needs a joint".into(),
        });
    }
    if !(0.0..=1.0).contains(&config.error_budget) {
        return Err(Error::Domain(format!(
            "error budget {} outside [0, 1]",
            config.error_budget
        )));
    }
    for path in config.tasks.iter().chain(&config.quadruples) {
        if !path.exists() {
            return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
    }
    if config.tasks.is_empty() && config.quadruples.is_none() {
        return Err(Error::Domain("nothing to run: no task files and no quadruples".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Domain(format!("thread pool: {e}")))?;
    std::fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    let provider = build_provider(&config.provider, config.joint.as_ref())?;

    let mut files = Vec::new();
    let mut names = BTreeSet::new();
    let scoring_started = Instant::now();
    for path in &config.tasks {
        let tasks = load_tasks(path)?;
        let scored = pool.install(|| {
            score_tasks(
                &tasks,
                provider.as_ref(),
                &patterns,
                config.seed,
                config.seed_policy,
                config.score,
            )
        });
        let (matrices, golds): (Vec<&CandidateScores>, Vec<usize>) =
            scored.scored().map(|(i, m)| (m, tasks[i].gold)).unzip();
        let name = unique_name(path, &mut names);
        let disagreement = match (config.disagreement, matrices.is_empty()) {
            (true, false) => Some(disagreement_from_scores(&matrices, patterns.len(), &m_values)?),
            _ => None,
        };
        let accuracy = match (config.accuracy, matrices.is_empty()) {
            (true, false) => {
                let (points, baseline_row, baseline_accuracy) =
                    accuracy_from_scores(&matrices, &golds, &patterns, &m_values, config.pooling)?;
                Some(AccuracyCurve {
                    points,
                    baseline_row,
                    baseline_accuracy,
                    errors: scored.errors.clone(),
                })
            }
            _ => None,
        };
        let entries: usize = matrices.iter().map(|m| m.rows() * m.candidates.len()).sum();
        let scored_count = matrices.len();
        files.push(FileResult {
            path: path.clone(),
            name,
            instances: tasks.len(),
            scored: scored_count,
            errors: scored.errors.clone(),
            disagreement,
            accuracy,
            matrices: (entries <= config.matrix_cap).then_some(scored.matrices),
        });
    }
    let bigram = match &config.quadruples {
        Some(path) => {
            let quads = load_quadruples(path)?;
            let (stats, _) = pool.install(|| quadruple_stats(&quads, provider.as_ref(), config.bigram))?;
            Some(stats)
        }
        None => None,
    };
    let scoring_secs = scoring_started.elapsed().as_secs_f64();

    let mut excluded = Vec::new();
    let mut kept = Vec::new();
    for f in &files {
        let base = f.accuracy.as_ref().and_then(|a| a.baseline_accuracy);
        match (config.accuracy_filter, base) {
            (Some(th), Some(b)) if b <= th => excluded.push(f.name.clone()),
            _ => kept.push(f),
        }
    }
    let aggregate = (!files.is_empty()).then(|| aggregate(&kept, &m_values));

    let mut violations = Vec::new();
    for f in &files {
        check_invariants(f, &mut violations);
    }
    let total_instances: usize = files.iter().map(|f| f.instances).sum();
    let failed_instances: usize = files.iter().map(|f| f.errors.len()).sum();

    for f in &files {
        if let Some(points) = &f.disagreement {
            let curve = DisagreementCurve {
                points: points.clone(),
                errors: vec![],
            };
            write_file(
                &config.out.join(format!("disagreement_{}.csv", f.name)),
                curve.to_csv().as_bytes(),
            )?;
        }
        if let Some(acc) = &f.accuracy {
            write_file(
                &config.out.join(format!("accuracy_{}.csv", f.name)),
                acc.to_csv().as_bytes(),
            )?;
        }
    }
    if let Some(a) = &aggregate {
        write_file(&config.out.join("aggregate.csv"), a.to_csv().as_bytes())?;
    }
    if let Some(b) = &bigram {
        write_file(&config.out.join("bigram.json"), &serde_json::to_vec_pretty(b)?)?;
    }
    let record = RunRecord {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        patterns,
        m_values,
        files,
        excluded,
        aggregate,
        bigram,
        failed_instances,
        total_instances,
        violations,
        timing: Timing {
            scoring_secs,
            total_secs: started.elapsed().as_secs_f64(),
        },
    };
    write_file(
        &config.out.join("run_record.json"),
        &serde_json::to_vec_pretty(&record)?,
    )?;

    if failed_instances as f64 > config.error_budget * total_instances as f64 {
        return Err(Error::ErrorBudget {
            failed: failed_instances,
            total: total_instances,
        });
    }
    if !record.violations.is_empty() {
        return Err(Error::InvariantViolated(record.violations.join("; ")));
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn m_value_forms() {
        assert_eq!(parse_m_values("2..5").unwrap(), vec![2, 3, 4, 5]);
        assert_eq!(parse_m_values("2..=3").unwrap(), vec![2, 3]);
        assert_eq!(parse_m_values("1,10").unwrap(), vec![1, 10]);
        assert_eq!(parse_m_values("4").unwrap(), vec![4]);
        assert!(parse_m_values("5..2").is_err());
        assert!(parse_m_values("1,1").is_err());
        assert!(parse_m_values("a").is_err());
    }

    #[test]
    fn config_defaults_from_json() {
        let c: ExperimentConfig = serde_json::from_str(
            r#"{"provider":"oracle:random:3:4:1","patterns":"compact","m":"1..3","out":"o","tasks":["t.jsonl"]}"#,
        )
        .unwrap();
        assert_eq!(c.seed_policy, SeedPolicy::PerQuestion);
        assert!(c.disagreement && c.accuracy);
        assert_eq!(c.error_budget, 0.01);
        assert_eq!(c.matrix_cap, 1_000_000);
    }

    #[test]
    fn unknown_provider_fails_at_startup() {
        let r: std::result::Result<ExperimentConfig, _> =
            serde_json::from_str(r#"{"provider":"magic:1","patterns":"compact","m":"1..3","out":"o"}"#);
        assert!(r.is_err());
    }
}
