mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use viewroute_core::config::parse_scalar;

#[derive(Parser, Debug)]
#[command(
    name = "viewroute",
    version,
    about = "Multi-view retrieval with learned query routing"
)]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override any configuration key, e.g. `--set train.lr=0.001`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train encoder and router on query/document triplets.
    Train(TrainArgs),
    /// Encode a corpus into an embedding dump.
    Encode(EncodeArgs),
    /// Build a flat or IVF index from an embedding dump.
    Index(IndexArgs),
    /// Retrieve documents for queries into a TREC run file.
    Search(SearchArgs),
    /// Score a TREC run against qrels.
    Eval(EvalArgs),
    /// Time sum-max, routed and single-view search on one index.
    Bench(BenchArgs),
    /// Count distinct views per matrix by agglomerative clustering.
    Analyze(AnalyzeArgs),
    /// Generate the synthetic routing corpus.
    Synth(SynthArgs),
}

const SCORERS: [&str; 5] = ["routed", "sum_max", "max_max", "single_view", "static_cls"];

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    triplets: PathBuf,
    /// Query file the triplets refer to.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, requires = "dev_qrels")]
    dev_queries: Option<PathBuf>,
    #[arg(long, requires = "dev_queries")]
    dev_qrels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = SCORERS)]
    scorer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "document", value_parser = ["document", "query"])]
    tower: String,
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, value_parser = ["flat", "ivf"])]
    kind: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, value_parser = SCORERS)]
    scorer: Option<String>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    nprobe: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Comma-separated, e.g. `mrr@10,ndcg@10`.
    #[arg(long)]
    metrics: Option<String>,
    /// Also write the values as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    nprobe: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_parser = ["average", "complete"])]
    linkage: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Per-matrix cluster assignments as JSON lines.
    #[arg(long)]
    assignments: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    docs: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    intents: Option<usize>,
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    ambiguity: Option<f64>,
    #[arg(long)]
    train_queries: Option<usize>,
    #[arg(long)]
    dev_queries: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Raised for bad invocations that clap cannot detect; exits with 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn push<T: Into<Value>>(flags: &mut Vec<(String, Value)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        flags.push((key.to_string(), v.into()));
    }
}

/// Configuration keys set by dedicated flags.
fn flag_overrides(cli: &Cli) -> anyhow::Result<Vec<(String, Value)>> {
    let mut f = Vec::new();
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--set {kv}: expected KEY=VALUE")))?;
        f.push((k.trim().to_string(), parse_scalar(v.trim())));
    }
    if let Some(s) = cli.seed {
        for k in ["seed", "train.seed", "synth.seed"] {
            f.push((k.into(), s.into()));
        }
    }
    match &cli.command {
        Command::Train(a) => {
            push(&mut f, "train.scorer", a.scorer.clone());
            push(&mut f, "train.lr", a.lr);
            push(&mut f, "train.total_steps", a.steps);
            push(&mut f, "train.batch_size", a.batch_size);
        }
        Command::Index(a) => {
            push(&mut f, "index.kind", a.kind.clone());
            push(&mut f, "index.k", a.k);
        }
        Command::Search(a) => {
            push(&mut f, "search.scorer", a.scorer.clone());
            push(&mut f, "search.top_k", a.topk);
            push(&mut f, "search.nprobe", a.nprobe);
        }
        Command::Eval(a) => {
            let list = a.metrics.as_ref().map(|m| {
                Value::from(
                    m.split(',')
                        .map(|s| s.trim().to_string())
                        .collect::<Vec<_>>(),
                )
            });
            push(&mut f, "eval.metrics", list);
        }
        Command::Bench(a) => {
            push(&mut f, "bench.reps", a.reps);
            push(&mut f, "search.top_k", a.topk);
            push(&mut f, "search.nprobe", a.nprobe);
        }
        Command::Analyze(a) => {
            push(&mut f, "analysis.threshold", a.threshold);
            push(&mut f, "analysis.linkage", a.linkage.clone());
        }
        Command::Synth(a) => {
            push(&mut f, "synth.n_docs", a.docs);
            push(&mut f, "synth.views_per_doc", a.views);
            push(&mut f, "synth.n_intents", a.intents);
            push(&mut f, "synth.dims", a.dims);
            push(&mut f, "synth.ambiguity_rate", a.ambiguity);
            push(&mut f, "synth.n_train_queries", a.train_queries);
            push(&mut f, "synth.n_dev_queries", a.dev_queries);
        }
        Command::Encode(_) => {}
    }
    Ok(f)
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<UsageError>()
            || matches!(
                c.downcast_ref::<viewroute_core::Error>(),
                Some(viewroute_core::Error::Config(_))
            )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
    }
}
