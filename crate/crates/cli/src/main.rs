//! `lexcourt` command-line interface.
//!
//! Exit codes: 0 success, 2 validation error, 3 external-service failure,
//! 4 data-format error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "lexcourt", version, about = "Legal retrieval, entailment and judgment pipelines")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Run config (TOML) for `run`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for cached service replies.
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Seed forwarded to chat requests.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Validate inputs and report what would happen; no service calls or writes.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Disable data-parallel execution.
    #[arg(long, global = true)]
    pub sequential: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Clean a case corpus (or filter a tort corpus) into JSON Lines.
    Ingest(IngestArgs),
    /// Build a BM25 index over a case corpus.
    Index(IndexArgs),
    /// Embed a corpus through an embedding service into a vector file.
    Embed(EmbedArgs),
    /// Score queries against candidates with BM25 or stored vectors.
    Score(ScoreArgs),
    /// Combine score tables by weights or by quorum voting.
    Fuse(FuseArgs),
    /// Grid-search fusion weights or a selection threshold on dev qrels.
    Tune(TuneArgs),
    /// Select entailing paragraphs with one or two chat models.
    Entail(EntailArgs),
    /// Predict tort decisions by claim clustering, or post-process predictions.
    Judge(JudgeArgs),
    /// Score a run, answer file or prediction file against gold labels.
    Eval(EvalArgs),
    /// Execute a run config or preset.
    Run(RunArgs),
    /// Tort corpus statistics.
    Stats(StatsArgs),
    /// Serve deterministic mock embedding and chat endpoints.
    MockServe(MockServeArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// JSON Lines file or directory of .txt files.
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Cleaning rules (TOML); built-in defaults otherwise.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Input is a tort corpus; drop cases missing two of facts, plaintiff and defendant claims.
    #[arg(long)]
    pub tort: bool,
    /// Keep documents whose text repeats an earlier one.
    #[arg(long)]
    pub keep_duplicates: bool,
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServiceArgs {
    #[arg(long, default_value = "http://localhost:8000")]
    pub endpoint: String,
    #[arg(long)]
    pub model: String,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub service: ServiceArgs,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Query corpus (BM25) or vector file (dense).
    #[arg(long)]
    pub queries: PathBuf,
    /// BM25 index built by `index`.
    #[arg(long, conflicts_with = "vectors")]
    pub index: Option<PathBuf>,
    /// Candidate vector file; `--queries` is then a vector file too.
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long, default_value = "cosine")]
    pub similarity: String,
    #[arg(short, long, default_value_t = 100)]
    pub k: usize,
    #[arg(long, default_value_t = 1.2)]
    pub k1: f64,
    #[arg(long, default_value_t = 0.75)]
    pub b: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Scorer name recorded in the table header.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Norm {
    Minmax,
    Zscore,
    None,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    /// Score table files, in order.
    #[arg(long = "table", required = true)]
    pub tables: Vec<PathBuf>,
    /// `name=weight` pairs summing to 1.
    #[arg(long, value_delimiter = ',', conflicts_with = "vote_m")]
    pub weights: Vec<String>,
    /// Majority vote over each table's top-m.
    #[arg(long = "vote")]
    pub vote_m: Option<usize>,
    #[arg(long, requires = "vote_m")]
    pub quorum: Option<usize>,
    #[arg(long, requires = "vote_m")]
    pub max_out: Option<usize>,
    #[arg(long, value_enum, default_value = "none")]
    pub normalize: Norm,
    #[arg(long, conflicts_with = "threshold")]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Keep the best candidate when nothing clears the threshold.
    #[arg(long)]
    pub fallback_top1: bool,
    #[arg(long, default_value = "fused")]
    pub tag: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TuneTarget {
    Weights,
    Threshold,
}

#[derive(Args, Debug)]
pub struct TuneArgs {
    #[arg(value_enum)]
    pub target: TuneTarget,
    #[arg(long = "table", required = true)]
    pub tables: Vec<PathBuf>,
    #[arg(long)]
    pub qrels: PathBuf,
    #[arg(long, default_value = "micro_f1")]
    pub metric: String,
    #[arg(long, value_enum, default_value = "none")]
    pub normalize: Norm,
    #[arg(long, default_value_t = 0.1)]
    pub step: f64,
    /// Cut used while searching weights: `top:K` or `threshold:T`.
    #[arg(long, default_value = "top:1")]
    pub selection: String,
    #[arg(long)]
    pub fallback_top1: bool,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct EntailArgs {
    /// Query JSON Lines (`id`, `text`).
    #[arg(long)]
    pub queries: PathBuf,
    /// Per-query paragraphs, JSON Lines `{query, id, text}`.
    #[arg(long)]
    pub paragraphs: PathBuf,
    /// Candidate ranking (TREC run); BM25 over each query's paragraphs otherwise.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Keep this many ranked candidates per query.
    #[arg(short, long)]
    pub k: Option<usize>,
    /// `endpoint=model`, given once or twice.
    #[arg(long = "llm", required = true)]
    pub llms: Vec<String>,
    #[arg(long, default_value = "entail")]
    pub tag: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct JudgeArgs {
    /// Tort cases to judge with claim clustering.
    #[arg(long, conflicts_with = "predictions")]
    pub cases: Option<PathBuf>,
    /// Predictions to post-process with the claim heuristics.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Chat model as `endpoint=model`.
    #[arg(long)]
    pub llm: Option<String>,
    /// Claim embedder as `endpoint=model`.
    #[arg(long)]
    pub embedder: Option<String>,
    /// Precomputed cluster assignments.
    #[arg(long)]
    pub clusters: Option<PathBuf>,
    #[arg(long, default_value_t = 0.75)]
    pub theta: f64,
    #[arg(long)]
    pub no_tp_reversal: bool,
    #[arg(long)]
    pub no_re_refine: bool,
    #[arg(long, default_value_t = 2.0)]
    pub ratio: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// TREC run to score against `--qrels`.
    #[arg(long, requires = "qrels")]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    /// Yes/no answer file (`id Y|N tag`) to score against `--gold`.
    #[arg(long, requires = "gold")]
    pub answers: Option<PathBuf>,
    /// Prediction JSON Lines to score against `--gold` tort cases.
    #[arg(long, requires = "gold")]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Recall cut-offs reported for runs.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10, 100])]
    pub recall_at: Vec<usize>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Config file or preset name; `--config` also works.
    pub target: Option<String>,
    /// Dotted overrides, e.g. `--set stages.0.k=50`.
    #[arg(long = "set")]
    pub overrides: Vec<String>,
    /// List the built-in presets and exit.
    #[arg(long)]
    pub list_presets: bool,
    /// Print the resolved config as TOML and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// One or more tort corpora; a combined row is added for several.
    #[arg(required = true)]
    pub corpora: Vec<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct MockServeArgs {
    #[arg(long, default_value = "127.0.0.1:8000")]
    pub addr: String,
    #[arg(long, default_value_t = lexcourt::mock::DEFAULT_MOCK_DIM)]
    pub dim: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
