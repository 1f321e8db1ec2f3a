use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use stepcredit_core::credit::{grpo_advantages, step_advantages_for_ledgers, CreditConfig, StepAdvantages};
use stepcredit_core::executor::{DatabaseRegistry, SqlExecutor, DEFAULT_WORKERS};
use stepcredit_core::fixtures;
use stepcredit_core::harness::{evaluate, run_scenario, EvalMetrics, HarnessConfig, Scenario};
use stepcredit_core::objective::{surrogate_gradient, surrogate_objective, ObjectiveConfig, TokenTensor};
use stepcredit_core::rewards::{RewardLedger, Scorer};
use stepcredit_core::trajectory::{group_records, ParseConfig, TrajectoryRecord, DEFAULT_MAX_TURNS};
use stepcredit_service::{AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "stepcredit", version, about = "Step-level credit assignment for tool-using Text-to-SQL rollouts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Play scenario policies against the databases and write transcripts as JSONL.
    Simulate {
        /// Scenario JSON file; repeat to simulate several questions.
        #[arg(long, required = true)]
        scenario: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "STEPCREDIT_REGISTRY")]
        registry: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_TURNS)]
        max_turns: usize,
    },
    /// Score transcripts into reward ledgers and, optionally, step advantages.
    Score {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output JSONL; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "STEPCREDIT_REGISTRY")]
        registry: PathBuf,
        #[arg(long)]
        advantages: bool,
        #[arg(long, default_value_t = DEFAULT_MAX_TURNS)]
        max_turns: usize,
        #[arg(long, default_value_t = 0.98)]
        gamma: f64,
        #[arg(long, default_value_t = 0.5)]
        beta_smooth: f64,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
    },
    /// Evaluation metrics over transcript groups.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, env = "STEPCREDIT_REGISTRY")]
        registry: PathBuf,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        #[arg(long, default_value_t = DEFAULT_MAX_TURNS)]
        max_turns: usize,
    },
    /// Clipped surrogate objective of a token tensor file.
    Objective {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        clip_eps: f64,
        #[arg(long, default_value_t = 1e-3)]
        kl_coef: f64,
        /// Also print d value / d logp_new per token.
        #[arg(long)]
        gradient: bool,
    },
    /// Run the HTTP tool endpoint.
    Serve {
        #[arg(long, env = "STEPCREDIT_REGISTRY")]
        registry: PathBuf,
        #[arg(long, env = "STEPCREDIT_HOST", default_value = "127.0.0.1")]
        host: String,
        #[arg(long, env = "STEPCREDIT_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "STEPCREDIT_TIMEOUT_MS", default_value_t = 5000)]
        timeout_ms: u64,
        #[arg(long, env = "STEPCREDIT_MAX_ROWS", default_value_t = 50)]
        max_rows: usize,
        #[arg(long, env = "STEPCREDIT_FEEDBACK_CAP", default_value_t = 1024)]
        feedback_cap: usize,
        #[arg(long, env = "STEPCREDIT_WORKERS", default_value_t = DEFAULT_WORKERS)]
        workers: usize,
    },
    /// Write the fixture databases, manifest and scenario files.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Table,
}

/// One line of `score` output.
#[derive(Debug, Serialize, Deserialize)]
struct ScoredRecord {
    prompt_id: String,
    group_index: usize,
    sample_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    policy: Option<String>,
    ledger: RewardLedger,
    grpo_advantage: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    advantages: Option<StepAdvantages>,
}

fn main() {
    if let Err(err) = run(Cli::parse()) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { scenario, out, registry, max_turns } => simulate(&scenario, &out, &registry, max_turns),
        Command::Score { input, out, registry, advantages, max_turns, gamma, beta_smooth, lambda } => {
            let credit = CreditConfig { gamma, beta_smooth, lambda, ..Default::default() };
            score(&input, out.as_deref(), &registry, advantages, max_turns, &credit)
        }
        Command::Report { input, registry, k, format, max_turns } => report(&input, &registry, k, format, max_turns),
        Command::Objective { input, clip_eps, kl_coef, gradient } => {
            objective(&input, &ObjectiveConfig { clip_eps, kl_coef, ..Default::default() }, gradient)
        }
        Command::Serve { registry, host, port, timeout_ms, max_rows, feedback_cap, workers } => {
            let config = ServiceConfig {
                timeout: Duration::from_millis(timeout_ms),
                max_rows,
                feedback_cap,
            };
            serve(&registry, &host, port, config, workers)
        }
        Command::Fixtures { out } => write_fixtures(&out),
    }
}

fn open_executor(registry: &Path) -> Result<SqlExecutor> {
    let reg = DatabaseRegistry::from_dir(registry)
        .with_context(|| format!("loading registry {}", registry.display()))?;
    Ok(SqlExecutor::new(reg))
}

fn writer(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_records(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        records.push(rec);
    }
    if records.is_empty() {
        bail!("{} holds no trajectory records", path.display());
    }
    Ok(records)
}

fn simulate(scenarios: &[PathBuf], out: &Path, registry: &Path, max_turns: usize) -> Result<()> {
    let executor = open_executor(registry)?;
    let config = HarnessConfig { max_turns, ..Default::default() };
    let mut sink = writer(Some(out))?;
    for (group_index, path) in scenarios.iter().enumerate() {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let scenario: Scenario =
            serde_json::from_str(&raw).with_context(|| format!("parsing scenario {}", path.display()))?;
        let group = run_scenario(&scenario, group_index, &executor, &config)
            .with_context(|| format!("simulating {}", path.display()))?;
        for (mut record, policy) in group.records().into_iter().zip(&scenario.policies) {
            record.policy = Some(policy.name.clone());
            serde_json::to_writer(&mut sink, &record)?;
            sink.write_all(b"\n")?;
        }
    }
    sink.flush()?;
    Ok(())
}

fn score(
    input: &Path,
    out: Option<&Path>,
    registry: &Path,
    with_advantages: bool,
    max_turns: usize,
    credit: &CreditConfig,
) -> Result<()> {
    credit.validate()?;
    let records = read_records(input)?;
    let groups = group_records(&records, &ParseConfig::with_max_turns(max_turns))?;
    let scorer = Scorer::new(open_executor(registry)?);
    let mut sink = writer(out)?;
    let mut cursor = 0usize;
    for group in &groups {
        let gold = scorer
            .gold_result(&group.gold_sql, &group.database_id)
            .with_context(|| format!("gold SQL of {}", group.prompt_id))?;
        let ledgers: Vec<RewardLedger> = group
            .trajectories
            .iter()
            .map(|t| scorer.score_with_gold(t, &gold, &group.database_id))
            .collect();
        let outcomes: Vec<f64> = ledgers.iter().map(|l| l.outcome.total).collect();
        let grpo = grpo_advantages(&outcomes, credit.eps);
        let advantages = if with_advantages {
            Some(step_advantages_for_ledgers(&ledgers, credit)?)
        } else {
            None
        };
        let members = records
            .iter()
            .filter(|r| r.prompt_id == group.prompt_id && r.group_index == group.group_index);
        for (i, (ledger, rec)) in ledgers.into_iter().zip(members).enumerate() {
            let line = ScoredRecord {
                prompt_id: group.prompt_id.clone(),
                group_index: group.group_index,
                sample_index: rec.sample_index.unwrap_or(i),
                policy: rec.policy.clone(),
                ledger,
                grpo_advantage: grpo[i],
                advantages: advantages.as_ref().map(|a| a[i].clone()),
            };
            serde_json::to_writer(&mut sink, &line)?;
            sink.write_all(b"\n")?;
            cursor += 1;
        }
    }
    debug_assert_eq!(cursor, records.len());
    sink.flush()?;
    Ok(())
}

const METRIC_NAMES: [&str; 8] = [
    "questions",
    "k",
    "ex",
    "voting_ex",
    "pass_at_k",
    "ves",
    "mean_tool_calls",
    "mean_response_chars",
];

fn metric_values(m: &EvalMetrics) -> [String; 8] {
    [
        m.questions.to_string(),
        m.k.to_string(),
        format!("{:.4}", m.ex),
        format!("{:.4}", m.voting_ex),
        format!("{:.4}", m.pass_at_k),
        format!("{:.4}", m.ves),
        format!("{:.2}", m.mean_tool_calls),
        format!("{:.1}", m.mean_response_chars),
    ]
}

fn render_report(m: &EvalMetrics, format: Format) -> Result<String> {
    let values = metric_values(m);
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(METRIC_NAMES)?;
            w.write_record(&values)?;
            Ok(String::from_utf8(w.into_inner()?)?)
        }
        Format::Table => {
            let width = METRIC_NAMES.iter().map(|n| n.len()).max().unwrap_or(0);
            Ok(METRIC_NAMES
                .iter()
                .zip(&values)
                .map(|(name, value)| format!("{name:<width$}  {value:>10}\n"))
                .collect())
        }
    }
}

fn report(input: &Path, registry: &Path, k: usize, format: Format, max_turns: usize) -> Result<()> {
    let records = read_records(input)?;
    let groups = group_records(&records, &ParseConfig::with_max_turns(max_turns))?;
    let executor = open_executor(registry)?;
    let metrics = evaluate(&groups, k, &executor)?;
    print!("{}", render_report(&metrics, format)?);
    Ok(())
}

#[derive(Serialize)]
struct ObjectiveOutput {
    value: f64,
    clipped_fraction: f64,
    kl: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    gradient: Option<Vec<f64>>,
}

fn objective(input: &Path, cfg: &ObjectiveConfig, with_gradient: bool) -> Result<()> {
    let raw = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let tensor: TokenTensor = serde_json::from_str(&raw).context("parsing token tensor")?;
    let value = surrogate_objective(&tensor, cfg)?;
    let gradient = if with_gradient { Some(surrogate_gradient(&tensor, cfg)?) } else { None };
    let out = ObjectiveOutput {
        value: value.value,
        clipped_fraction: value.clipped_fraction,
        kl: value.kl,
        gradient,
    };
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

fn serve(registry: &Path, host: &str, port: u16, config: ServiceConfig, workers: usize) -> Result<()> {
    let reg = DatabaseRegistry::from_dir(registry)
        .with_context(|| format!("loading registry {}", registry.display()))?;
    let executor = SqlExecutor::with_workers(reg, workers);
    let addr: SocketAddr = format!("{host}:{port}").parse().context("parsing listen address")?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        eprintln!(
            "serving {} databases on http://{}",
            executor.database_ids().len(),
            listener.local_addr()?
        );
        stepcredit_service::serve(listener, AppState::new(executor, config)).await?;
        Ok(())
    })
}

fn write_fixtures(out: &Path) -> Result<()> {
    fixtures::materialize(out)?;
    let dir = out.join("scenarios");
    std::fs::create_dir_all(&dir)?;
    for name in fixtures::scenario_names() {
        let raw = fixtures::scenario_json(name).expect("listed scenario exists");
        std::fs::write(dir.join(format!("{name}.json")), raw)?;
    }
    println!("{}", out.display());
    Ok(())
}
