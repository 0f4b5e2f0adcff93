use std::path::Path;
use std::sync::Arc;

use mlmc::bigram::{
    cross_ratio_residual, generate_quadruples, infer_eight, quadruple_stats, Extraction, InferOptions, TopTokens,
};
use mlmc::harness::{
    run_experiment, synth_quadruples, synth_tasks, write_jsonl, ExperimentConfig, JointSource, ProviderSpec,
};
use mlmc::metrics::disagreement_curve;
use mlmc::oracle::{consistent_provider, exact_conditionals, perturbed_provider, random_joint, JointTable, NoiseSpec};
use mlmc::patterns::{apply_pattern, preset_patterns, PatternSpec, PresetKey, SeedPolicy};
use mlmc::{score_candidates, score_matrix, Error, MaskPattern, ScoreOptions, TaskInstance, TokenSeq, Vocabulary};

fn vocab(n: usize) -> Vocabulary {
    Vocabulary::numbered(n).unwrap()
}

fn singles(v: u32) -> Vec<TokenSeq> {
    (0..v).map(|t| TokenSeq(vec![t])).collect()
}

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x.exp() - y.exp()).abs()).sum::<f64>()
}

#[test]
fn random_joint_four_by_six() {
    let j = random_joint(vocab(4), 6, 7).unwrap();
    assert_eq!(j.probs.len(), 4096);
    assert!(j.probs.iter().all(|&p| p > 0.0));
    assert!((j.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn provider_contract_examples() {
    let j = Arc::new(random_joint(vocab(5), 5, 1).unwrap());
    let p = consistent_provider(j.clone());
    let ctx = TokenSeq(vec![0, 3, 1, 4]);
    let q = apply_pattern(&ctx, &MaskPattern::Baseline, 0).unwrap();
    let s = score_candidates(&p, &q, &singles(5)).unwrap();
    assert!((s.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
    let same = score_candidates(&p, &q, &[TokenSeq(vec![2]), TokenSeq(vec![2])]).unwrap();
    assert_eq!(same[0], same[1]);
    assert!(score_candidates(&p, &q, &[]).is_err());

    // two-token candidate on the shorter context is the chain rule
    let short = apply_pattern(&TokenSeq(vec![0, 3, 1]), &MaskPattern::Baseline, 0).unwrap();
    let two = score_candidates(&p, &short, &[TokenSeq(vec![2, 4])]).unwrap()[0];
    let first = j.condition(&[(0, 0), (1, 3), (2, 1)], &[3]).unwrap().probs[2];
    let second = j.condition(&[(0, 0), (1, 3), (2, 1), (3, 2)], &[4]).unwrap().probs[4];
    assert!((two - (first.ln() + second.ln())).abs() < 1e-12);
}

#[test]
fn patterns_agree_under_the_oracle() {
    let j = Arc::new(random_joint(vocab(4), 6, 2).unwrap());
    let p = consistent_provider(j);
    let ctx = TokenSeq(vec![1, 0, 3, 3, 2]);
    let base = score_candidates(
        &p,
        &apply_pattern(&ctx, &MaskPattern::Baseline, 0).unwrap(),
        &singles(4),
    )
    .unwrap();
    for pat in [
        MaskPattern::KOffset { k: 2 },
        MaskPattern::Multimask { n: 1, s: 2, g: 1 },
    ] {
        for seed in 0..5 {
            let s = score_candidates(&p, &apply_pattern(&ctx, &pat, seed).unwrap(), &singles(4)).unwrap();
            for (a, b) in s.iter().zip(&base) {
                assert!((a.exp() - b.exp()).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn presets_skip_what_does_not_fit() {
    let j = Arc::new(random_joint(vocab(2), 21, 3).unwrap());
    let p = consistent_provider(j);
    let pats = preset_patterns(PresetKey::ALL[1]);
    assert!(pats.contains(&MaskPattern::Multimask { n: 3, s: 10, g: 1 }));
    let ctx20 = TokenSeq((0..20).map(|i| (i % 2) as u32).collect());
    let m = score_matrix(&p, &ctx20, &pats, &singles(2), 0, ScoreOptions::default()).unwrap();
    assert_eq!((m.present_rows().len(), m.skipped.len()), (9, 1));
    assert_eq!(m.skipped[0].row, 9);
    let rows: Vec<&[f64]> = m.present_rows().into_iter().map(|i| m.row(i).unwrap()).collect();
    for r in &rows[1..] {
        assert!(tv(r, rows[0]) < 1e-9);
    }
    // on 8 tokens all three multimask patterns miss
    let ctx8 = TokenSeq(vec![0; 8]);
    let m = score_matrix(&p, &ctx8, &pats, &singles(2), 0, ScoreOptions::default()).unwrap();
    assert_eq!((m.present_rows().len(), m.skipped.len()), (7, 3));
    let ctx0 = TokenSeq(vec![]);
    let only_mm = vec![MaskPattern::Multimask { n: 3, s: 10, g: 1 }];
    assert!(matches!(
        score_matrix(&p, &ctx0, &only_mm, &singles(2), 0, ScoreOptions::default()),
        Err(Error::EmptyMatrix)
    ));
}

#[test]
fn perturbed_rows_differ() {
    let j = Arc::new(random_joint(vocab(4), 8, 5).unwrap());
    let p = perturbed_provider(j, NoiseSpec::new(0.5, 1).unwrap());
    let ctx = TokenSeq(vec![0, 1, 2, 3, 0, 1, 2]);
    let pats = mlmc::patterns::compact_patterns();
    let m = score_matrix(&p, &ctx, &pats, &singles(4), 0, ScoreOptions::default()).unwrap();
    let mut worst: f64 = 0.0;
    for a in 0..m.rows() {
        for b in 0..a {
            worst = worst.max(tv(m.row(a).unwrap(), m.row(b).unwrap()));
        }
    }
    assert!(worst > 0.0);
}

#[test]
fn oracle_disagreement_over_presets_is_zero() {
    let j = random_joint(vocab(2), 21, 8).unwrap();
    let tasks = synth_tasks(&j, 20, 2, 1).unwrap();
    let p = consistent_provider(Arc::new(j));
    let pats = preset_patterns(PresetKey::ALL[1]);
    let c = disagreement_curve(
        &tasks,
        &p,
        &pats,
        &[1, 2, 5, 10],
        3,
        SeedPolicy::PerQuestion,
        ScoreOptions::default(),
    )
    .unwrap();
    assert!(c.points[..3].iter().all(|pt| pt.rate == Some(0.0)));
    // the pattern that never fits removes every subset containing it
    assert_eq!(c.points[1].skipped, 20 * 9);
    assert_eq!((c.points[3].rate, c.points[3].evaluated), (None, 0));
}

#[test]
fn perturbed_disagreement_is_monotone() {
    let j = random_joint(vocab(4), 8, 9).unwrap();
    let tasks = synth_tasks(&j, 200, 4, 2).unwrap();
    let p = perturbed_provider(Arc::new(j), NoiseSpec::new(1.0, 4).unwrap());
    let pats = mlmc::patterns::compact_patterns();
    let m: Vec<usize> = (1..=10).collect();
    let c = disagreement_curve(
        &tasks,
        &p,
        &pats,
        &m,
        0,
        SeedPolicy::PerQuestion,
        ScoreOptions::default(),
    )
    .unwrap();
    assert!(!c.has_skips());
    assert!(c.is_monotone());
    assert_eq!(c.rate_at(1), Some(0.0));
    assert!(c.rate_at(10).unwrap() > 0.0 && c.rate_at(10).unwrap() <= 1.0);
}

#[test]
fn inferred_conditionals_match_the_joint() {
    let j = Arc::new(random_joint(vocab(4), 5, 6).unwrap());
    let p = consistent_provider(j.clone());
    for q in synth_quadruples(&j, 50, 3).unwrap() {
        let got = infer_eight(&p, &q, InferOptions::default()).unwrap();
        let want = exact_conditionals(&j, &q).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(cross_ratio_residual(&got).unwrap() < 1e-9);
    }
}

#[test]
fn uniform_joint_conditionals() {
    let j = Arc::new(JointTable::uniform(vocab(5), 4).unwrap());
    let p = consistent_provider(j.clone());
    let q = &synth_quadruples(&j, 1, 0).unwrap()[0];
    let raw = infer_eight(&p, q, InferOptions::default()).unwrap();
    assert!(raw.iter().all(|&c| (c - 0.2).abs() < 1e-12));
    let pair = infer_eight(
        &p,
        q,
        InferOptions {
            pairwise_normalize: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(pair.iter().all(|&c| (c - 0.5).abs() < 1e-12));
}

#[test]
fn both_masked_reads_marginals() {
    let j = Arc::new(random_joint(vocab(3), 5, 12).unwrap());
    let p = consistent_provider(j.clone());
    let opts = InferOptions {
        extraction: Extraction::BothMasked,
        pairwise_normalize: false,
    };
    for q in synth_quadruples(&j, 20, 1).unwrap() {
        let c = infer_eight(&p, &q, opts).unwrap();
        // the conditioning token is masked, so it cannot matter
        assert!((c[0] - c[2]).abs() < 1e-12 && (c[1] - c[3]).abs() < 1e-12);
        assert!((c[4] - c[6]).abs() < 1e-12 && (c[5] - c[7]).abs() < 1e-12);
    }
}

#[test]
fn perturbed_conditionals_carry_noise_of_the_right_scale() {
    let j = Arc::new(random_joint(vocab(4), 5, 13).unwrap());
    let sigma = 0.5;
    let p = perturbed_provider(j.clone(), NoiseSpec::new(sigma, 2).unwrap());
    let mut total = 0.0;
    let mut n = 0.0;
    for q in synth_quadruples(&j, 200, 5).unwrap() {
        let got = infer_eight(&p, &q, InferOptions::default()).unwrap();
        let want = exact_conditionals(&j, &q).unwrap();
        for (a, b) in got.iter().zip(&want) {
            total += (a.ln() - b.ln()).abs();
            n += 1.0;
        }
    }
    let mean = total / n;
    // E|N(0, s^2)| = 0.8 s before renormalization shifts it
    assert!(mean > 0.3 * sigma && mean < 2.0 * sigma, "{mean}");
}

#[test]
fn quadruple_gap_grows_with_noise() {
    let j = Arc::new(random_joint(vocab(4), 6, 14).unwrap());
    let quads = synth_quadruples(&j, 300, 7).unwrap();
    let (exact, _) = quadruple_stats(&quads, &consistent_provider(j.clone()), InferOptions::default()).unwrap();
    assert!(exact.mean < 1e-9);
    let mut last = exact.mean;
    for sigma in [0.1, 0.3] {
        let p = perturbed_provider(j.clone(), NoiseSpec::new(sigma, 3).unwrap());
        let (s, _) = quadruple_stats(&quads, &p, InferOptions::default()).unwrap();
        assert!(s.mean > last);
        assert!(s.q25 <= s.median && s.median <= s.q75);
        last = s.mean;
    }
}

#[test]
fn top_token_quadruples_close_the_loop() {
    let j = Arc::new(random_joint(vocab(4), 5, 15).unwrap());
    let p = consistent_provider(j.clone());
    let corpus: Vec<TokenSeq> = (0..10).map(|i| TokenSeq(j.sample(&mut mlmc::seed::rng(i)))).collect();
    let generator = TopTokens {
        provider: &p,
        vocab_size: 4,
        k: 2,
    };
    let quads = generate_quadruples(&corpus, &generator, 1000, 1).unwrap();
    assert!(!quads.is_empty());
    for q in &quads {
        let c = infer_eight(&p, q, InferOptions::default()).unwrap();
        assert!(cross_ratio_residual(&c).unwrap() < 1e-9);
    }
    assert_eq!(quads, generate_quadruples(&corpus, &generator, 1000, 1).unwrap());
}

fn write_tasks(dir: &Path, name: &str, tasks: &[TaskInstance]) -> std::path::PathBuf {
    let p = dir.join(name);
    write_jsonl(&p, tasks).unwrap();
    p
}

fn config(provider: &str, dir: &Path, out: &str, tasks: Vec<std::path::PathBuf>) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(provider.parse().unwrap(), PatternSpec::Compact, "1..10", dir.join(out));
    c.joint = Some("random:4:8:3".parse::<JointSource>().unwrap());
    c.tasks = tasks;
    c.seed = 5;
    c
}

#[test]
fn oracle_run_is_flat_and_agreeing() {
    let dir = tempfile::tempdir().unwrap();
    let j = JointSource::Random {
        vocab: 4,
        len: 8,
        seed: 3,
    }
    .load()
    .unwrap();
    let t = write_tasks(dir.path(), "a.jsonl", &synth_tasks(&j, 60, 4, 1).unwrap());
    let r = run_experiment(&config("oracle:random:4:8:3", dir.path(), "out", vec![t])).unwrap();
    let f = &r.files[0];
    assert!(f.disagreement.as_ref().unwrap().iter().all(|p| p.rate == Some(0.0)));
    let acc = f.accuracy.as_ref().unwrap();
    assert_eq!(acc.baseline_accuracy, Some(1.0));
    assert!(acc.points.iter().all(|p| p.mean_accuracy == Some(1.0)));
    for name in [
        "disagreement_a.csv",
        "accuracy_a.csv",
        "aggregate.csv",
        "run_record.json",
    ] {
        assert!(dir.path().join("out").join(name).exists(), "{name}");
    }
}

#[test]
fn perturbed_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let j = JointSource::Random {
        vocab: 4,
        len: 8,
        seed: 3,
    }
    .load()
    .unwrap();
    let a = write_tasks(dir.path(), "a.jsonl", &synth_tasks(&j, 80, 4, 1).unwrap());
    let b = write_tasks(dir.path(), "b.jsonl", &synth_tasks(&j, 40, 4, 2).unwrap());
    let mut c1 = config("perturbed:0.7:11", dir.path(), "one", vec![a.clone(), b.clone()]);
    c1.jobs = Some(1);
    let mut c2 = config("perturbed:0.7:11", dir.path(), "two", vec![a, b]);
    c2.jobs = Some(4);
    let r1 = run_experiment(&c1).unwrap();
    run_experiment(&c2).unwrap();
    for name in [
        "disagreement_a.csv",
        "disagreement_b.csv",
        "accuracy_a.csv",
        "accuracy_b.csv",
        "aggregate.csv",
    ] {
        let x = std::fs::read(dir.path().join("one").join(name)).unwrap();
        let y = std::fs::read(dir.path().join("two").join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
    let agg = r1.aggregate.unwrap();
    assert_eq!(agg.files, vec!["a", "b"]);
    // micro pools 80 + 40 instances, macro weighs files equally
    let pa = r1.files[0].disagreement.as_ref().unwrap()[4].rate.unwrap();
    let pb = r1.files[1].disagreement.as_ref().unwrap()[4].rate.unwrap();
    let point = &agg.points[4];
    assert!((point.macro_rate.unwrap() - (pa + pb) / 2.0).abs() < 1e-12);
    assert!((point.micro_rate.unwrap() - (80.0 * pa + 40.0 * pb) / 120.0).abs() < 1e-12);
}

#[test]
fn accuracy_filter_excludes_weak_files() {
    let dir = tempfile::tempdir().unwrap();
    let j = JointSource::Random {
        vocab: 4,
        len: 8,
        seed: 3,
    }
    .load()
    .unwrap();
    let good = synth_tasks(&j, 30, 4, 1).unwrap();
    let bad: Vec<TaskInstance> = good
        .iter()
        .map(|t| TaskInstance {
            gold: (t.gold + 1) % t.candidates.len(),
            ..t.clone()
        })
        .collect();
    let g = write_tasks(dir.path(), "good.jsonl", &good);
    let b = write_tasks(dir.path(), "bad.jsonl", &bad);
    let mut c = config("oracle:random:4:8:3", dir.path(), "out", vec![g, b]);
    c.accuracy_filter = Some(0.4);
    let r = run_experiment(&c).unwrap();
    assert_eq!(r.excluded, vec!["bad"]);
    assert_eq!(r.aggregate.unwrap().points[0].macro_accuracy, Some(1.0));
}

#[test]
fn error_budget_fails_the_run_but_keeps_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let j = JointSource::Random {
        vocab: 4,
        len: 8,
        seed: 3,
    }
    .load()
    .unwrap();
    let mut tasks = synth_tasks(&j, 50, 4, 1).unwrap();
    // a context longer than the joint cannot be answered
    tasks[7].context = TokenSeq(vec![0; 12]);
    let t = write_tasks(dir.path(), "t.jsonl", &tasks);
    let c = config("oracle:random:4:8:3", dir.path(), "out", vec![t.clone()]);
    match run_experiment(&c) {
        Err(Error::ErrorBudget { failed: 1, total: 50 }) => {}
        other => panic!("{other:?}"),
    }
    assert!(dir.path().join("out/run_record.json").exists());
    let mut c = c;
    c.error_budget = 0.05;
    let r = run_experiment(&c).unwrap();
    assert_eq!(r.failed_instances, 1);
}

#[test]
fn startup_errors_precede_scoring() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(
        "oracle:random:4:8:3",
        dir.path(),
        "out",
        vec![dir.path().join("missing.jsonl")],
    );
    assert!(matches!(run_experiment(&c), Err(Error::Io { .. })));
    c.tasks.clear();
    c.m = "1..11".into();
    assert!(run_experiment(&c).is_err());
    let mut c = config("perturbed:0.1:1", dir.path(), "out", vec![]);
    c.joint = None;
    assert!(matches!(run_experiment(&c), Err(Error::Spec { .. })));
    assert!(!dir.path().join("out").exists());
    assert!("warp:1".parse::<ProviderSpec>().is_err());
}
