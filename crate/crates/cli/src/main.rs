use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mlmc::bigram::{quadruple_stats, Extraction, InferOptions};
use mlmc::counting;
use mlmc::ensemble::{eoc_accuracy_curve, Pooling};
use mlmc::harness::{
    build_provider, load_quadruples, load_tasks, run_experiment, synth_quadruples, synth_tasks, write_jsonl,
    ExperimentConfig, JointSource, ProviderSpec, ENDPOINT_ENV,
};
use mlmc::metrics::disagreement_curve;
use mlmc::oracle::check::run_invariant_suite;
use mlmc::patterns::{PatternSpec, SeedPolicy};
use mlmc::remote::{blocking_client, fetch_info, remote_score, to_wire, RemoteConfig};
use mlmc::{MaskPattern, ScoreOptions, TaskInstance, TokenSeq};

#[derive(Parser)]
#[command(
    name = "mlmc",
    version,
    about = "Self-inconsistency diagnostics for masked language models"
)]
struct Cli {
    /// Base seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: one per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output file (directory for `run`); stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Joint degrees of freedom vs. MLM conditional counts.
    Count {
        #[arg(long)]
        v: u64,
        #[arg(long)]
        l: u64,
        /// Masked positions per conditional.
        #[arg(long, default_value_t = 1)]
        k: u64,
    },
    /// Brute-force consistency checks on random joints.
    OracleCheck {
        #[arg(long)]
        vocab: usize,
        #[arg(long)]
        len: usize,
        #[arg(long, default_value_t = 20)]
        joints: usize,
    },
    /// Disagreement rate of conditionals vs. m (CSV).
    Disagree(CurveArgs),
    /// Ensemble-of-conditionals accuracy vs. m (CSV).
    Eoc {
        #[command(flatten)]
        curve: CurveArgs,
        #[arg(long, value_enum, default_value_t = PoolingArg::Max)]
        pooling: PoolingArg,
    },
    /// Cross-ratio gap statistics over bigram quadruples (JSON).
    Bigram {
        #[arg(long)]
        quads: PathBuf,
        #[command(flatten)]
        provider: ProviderArgs,
        #[arg(long)]
        pairwise_normalize: bool,
        #[arg(long, value_enum, default_value_t = ExtractionArg::SingleMask)]
        extraction: ExtractionArg,
    },
    /// Synthetic tasks (or quadruples) drawn from a joint (JSONL).
    Synth {
        /// `random:<V>:<L>:<seed>` or a joint table JSON file.
        #[arg(long)]
        joint: JointSource,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        candidates: usize,
        /// Emit bigram quadruples instead of tasks.
        #[arg(long)]
        quadruples: bool,
    },
    /// Checks a remote server: info, one request, repeatability.
    ServeCheck {
        /// Server URL; falls back to the endpoint environment variable.
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Runs an experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct ProviderArgs {
    /// `oracle:<joint>`, `perturbed:<sigma>:<seed>`, `calibrated:<sw>:<sr>:<flatten>:<seed>` or `remote:<url>`.
    #[arg(long)]
    provider: ProviderSpec,
    /// Joint for perturbed and calibrated providers.
    #[arg(long)]
    joint: Option<JointSource>,
}

#[derive(Args)]
struct CurveArgs {
    #[arg(long, required = true, num_args = 1..)]
    tasks: Vec<PathBuf>,
    #[command(flatten)]
    provider: ProviderArgs,
    /// `preset:<model>-<task>`, `compact` or `file:<path>`.
    #[arg(long, default_value = "compact")]
    patterns: PatternSpec,
    /// `a..b`, a comma list, or one value.
    #[arg(long)]
    m: String,
    #[arg(long, value_enum, default_value_t = SeedPolicyArg::PerQuestion)]
    seed_policy: SeedPolicyArg,
    #[arg(long)]
    length_normalize: bool,
    #[arg(long)]
    renormalize: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Max,
    Mean,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExtractionArg {
    SingleMask,
    BothMasked,
}

#[derive(Clone, Copy, ValueEnum)]
enum SeedPolicyArg {
    PerQuestion,
    Fixed,
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<TaskInstance>> {
    let mut tasks = Vec::new();
    for p in paths {
        tasks.extend(load_tasks(p)?);
    }
    Ok(tasks)
}

struct CurveInputs {
    tasks: Vec<TaskInstance>,
    patterns: Vec<MaskPattern>,
    m: Vec<usize>,
    policy: SeedPolicy,
    opts: ScoreOptions,
}

fn curve_inputs(args: &CurveArgs) -> Result<CurveInputs> {
    let patterns = args.patterns.resolve()?;
    let m = mlmc::harness::parse_m_values(&args.m)?;
    let policy = match args.seed_policy {
        SeedPolicyArg::PerQuestion => SeedPolicy::PerQuestion,
        SeedPolicyArg::Fixed => SeedPolicy::Fixed,
    };
    let opts = ScoreOptions {
        length_normalize: args.length_normalize,
        renormalize: args.renormalize,
    };
    Ok(CurveInputs {
        tasks: load_all(&args.tasks)?,
        patterns,
        m,
        policy,
        opts,
    })
}

fn report_errors(errors: &[mlmc::provider::InstanceError], total: usize) -> Result<()> {
    for e in errors.iter().take(10) {
        log::warn!("{}: {}", e.id, e.error);
    }
    if errors.len() as f64 > 0.01 * total as f64 {
        bail!("{} of {total} instances failed", errors.len());
    }
    Ok(())
}

fn serve_check(endpoint: Option<String>) -> Result<(String, bool)> {
    let endpoint = endpoint
        .or_else(|| std::env::var(ENDPOINT_ENV).ok())
        .context("no endpoint given")?;
    let config = RemoteConfig::new(endpoint);
    let client = blocking_client(&config)?;
    let backoff = std::time::Duration::from_millis(config.backoff_ms);
    let info = fetch_info(&client, &config.endpoint, config.retries, backoff)?;
    let context = TokenSeq(vec![0, 1, 2, 3]);
    let candidates = vec![TokenSeq(vec![4]), TokenSeq(vec![5])];
    let mut checks = Vec::new();
    for pattern in [MaskPattern::Baseline, MaskPattern::KOffset { k: 2 }] {
        let query = mlmc::patterns::apply_pattern(&context, &pattern, 0)?;
        let request = to_wire(&query, &candidates, "", false);
        let a = remote_score(&client, &config.endpoint, &request, config.retries, backoff)?;
        let b = remote_score(&client, &config.endpoint, &request, config.retries, backoff)?;
        let drift = a
            .log_probs
            .iter()
            .zip(&b.log_probs)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        checks.push(serde_json::json!({
            "pattern": pattern.to_string(),
            "log_probs": a.log_probs,
            "repeat_drift": drift,
            "passed": drift <= 1e-6,
        }));
    }
    let passed = checks.iter().all(|c| c["passed"] == true);
    let text = serde_json::to_string_pretty(&serde_json::json!({ "info": info, "checks": checks }))? + "\n";
    Ok((text, passed))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    let out = cli.out.as_deref();
    match cli.command {
        Command::Count { v, l, k } => {
            let r = counting::report(v, l, k)?;
            emit(out, &(serde_json::to_string_pretty(&r)? + "\n"))?;
        }
        Command::OracleCheck { vocab, len, joints } => {
            let r = run_invariant_suite(vocab, len, joints, cli.seed)?;
            emit(out, &(serde_json::to_string_pretty(&r)? + "\n"))?;
            if !r.passed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Disagree(args) => {
            let CurveInputs {
                tasks,
                patterns,
                m,
                policy,
                opts,
            } = curve_inputs(&args)?;
            let provider = build_provider(&args.provider.provider, args.provider.joint.as_ref())?;
            let curve = disagreement_curve(&tasks, provider.as_ref(), &patterns, &m, cli.seed, policy, opts)?;
            report_errors(&curve.errors, tasks.len())?;
            if !curve.has_skips() && !curve.is_monotone() {
                bail!("disagreement decreased with m");
            }
            emit(out, &curve.to_csv())?;
        }
        Command::Eoc { curve, pooling } => {
            let CurveInputs {
                tasks,
                patterns,
                m,
                policy,
                opts,
            } = curve_inputs(&curve)?;
            let provider = build_provider(&curve.provider.provider, curve.provider.joint.as_ref())?;
            let pooling = match pooling {
                PoolingArg::Max => Pooling::Max,
                PoolingArg::Mean => Pooling::Mean,
            };
            let acc = eoc_accuracy_curve(
                &tasks,
                provider.as_ref(),
                &patterns,
                &m,
                cli.seed,
                policy,
                opts,
                pooling,
            )?;
            report_errors(&acc.errors, tasks.len())?;
            emit(out, &acc.to_csv())?;
        }
        Command::Bigram {
            quads,
            provider,
            pairwise_normalize,
            extraction,
        } => {
            let quads = load_quadruples(&quads)?;
            let p = build_provider(&provider.provider, provider.joint.as_ref())?;
            let opts = InferOptions {
                extraction: match extraction {
                    ExtractionArg::SingleMask => Extraction::SingleMask,
                    ExtractionArg::BothMasked => Extraction::BothMasked,
                },
                pairwise_normalize,
            };
            let (stats, _) = quadruple_stats(&quads, p.as_ref(), opts)?;
            emit(out, &(serde_json::to_string_pretty(&stats)? + "\n"))?;
        }
        Command::Synth {
            joint,
            n,
            candidates,
            quadruples,
        } => {
            let table = joint.load()?;
            let path = out.context("synth needs --out")?;
            if quadruples {
                write_jsonl(path, &synth_quadruples(&table, n, cli.seed)?)?;
            } else {
                write_jsonl(path, &synth_tasks(&table, n, candidates, cli.seed)?)?;
            }
        }
        Command::ServeCheck { endpoint } => {
            let (text, passed) = serve_check(endpoint)?;
            emit(out, &text)?;
            if !passed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Run { config } => {
            let mut config = ExperimentConfig::load(&config)?;
            if let Some(o) = out {
                config.out = o.to_path_buf();
            }
            if cli.jobs.is_some() {
                config.jobs = cli.jobs;
            }
            let record = run_experiment(&config)?;
            eprintln!(
                "wrote {} ({} instances, {} failed)",
                config.out.display(),
                record.total_instances,
                record.failed_instances
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}
