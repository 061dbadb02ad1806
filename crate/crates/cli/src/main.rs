//! `compmech`: dataset construction, tracing, interventions and similarity
//! analyses over a GPT-2 checkpoint, emitting tidy CSV and JSON.
//!
//! Usage:
//!   compmech dataset build --counterfact counterfact.json --model gpt2/ --seed 0 --out runs/data
//!   compmech trace --model gpt2/ --dataset runs/data/dataset.jsonl --seed 0 --out runs/trace
//!   compmech intervene --model gpt2/ --dataset runs/data/dataset.jsonl --seed 0 --alpha 5 --out runs/alpha
//!   compmech similarity --model gpt2/ --dataset runs/data/dataset.jsonl --embeddings w2v.bin --out runs/sim
//!   compmech fixtures verify --model fixtures/reference_model

mod commands;
mod config;
mod failure;
mod inputs;
mod manifest;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::failure::Category;

#[derive(Parser)]
#[command(name = "compmech", version)]
#[command(about = "Trace and intervene on the factual and counterfactual mechanisms of GPT-2")]
struct Cli {
    /// JSON experiment configuration; command-line flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (results do not depend on this)
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prompt dataset construction
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Logit lens, block and head attribution, attention profiles and rank curves
    Trace(TraceArgs),
    /// Attention-entry scaling, head ablation and α grid search
    Intervene(InterveneArgs),
    /// Factual win rate per attribute-similarity bin
    Similarity(SimilarityArgs),
    /// Reference-output checks
    Fixtures {
        #[command(subcommand)]
        action: FixturesAction,
    },
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Filter CounterFact records, sample, and write a JSON-lines dataset
    Build(BuildArgs),
}

#[derive(Subcommand)]
enum FixturesAction {
    /// Compare model logits (and optionally tokenizer encodings) to reference files
    Verify(VerifyArgs),
}

#[derive(Args, Clone, Default)]
struct ModelArgs {
    /// Model directory holding model.safetensors and config.json, or a weights file
    #[arg(long)]
    model: Option<PathBuf>,

    /// Model config.json when it is not next to the weights
    #[arg(long)]
    model_config: Option<PathBuf>,

    /// Directory with vocab.json and merges.txt (default: next to the model, else bundled GPT-2)
    #[arg(long)]
    tokenizer: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Dataset written by `dataset build`
    #[arg(long)]
    dataset: Option<PathBuf>,

    /// Seed for any sampling step
    #[arg(long)]
    seed: Option<u64>,

    /// Instances to subsample (0 keeps all; default 1000)
    #[arg(long)]
    sample: Option<usize>,
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    model: ModelArgs,

    /// CounterFact JSON file
    #[arg(long)]
    counterfact: Option<PathBuf>,

    /// JSON object overriding the dotted field paths of each record
    #[arg(long)]
    field_paths: Option<PathBuf>,

    /// Instances to draw from the filtered pool (default 10000)
    #[arg(long)]
    n: Option<usize>,

    /// Sampling seed (required)
    #[arg(long)]
    seed: Option<u64>,

    /// Text opening the first sentence (default "Redefine:")
    #[arg(long)]
    prefix: Option<String>,

    /// Word vectors used to score attribute similarity (.bin word2vec or text)
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    model: ModelArgs,

    #[command(flatten)]
    data: DataArgs,

    /// Comma-separated analyses: lens, blocks, heads, attention, ranks
    #[arg(long)]
    analyses: Option<String>,

    /// Component projection: bare or final-norm
    #[arg(long)]
    projection: Option<String>,

    /// Heads for the attention profile, e.g. L10H7,L11H10
    #[arg(long)]
    heads: Option<String>,

    /// Also write lens values for every token of every span
    #[arg(long)]
    per_token: bool,

    /// Write the full attention maps of the profiled heads, one archive per prompt
    #[arg(long)]
    attention_maps: bool,

    /// Comma-separated groups whose representative position gets rank curves
    #[arg(long)]
    rank_groups: Option<String>,

    /// Upper bound on concurrent trace memory in MiB (default 4096)
    #[arg(long)]
    max_capture_mb: Option<usize>,
}

#[derive(Args)]
struct InterveneArgs {
    #[command(flatten)]
    model: ModelArgs,

    #[command(flatten)]
    data: DataArgs,

    /// Heads whose last-to-attribute entry is scaled (default L10H7,L11H10)
    #[arg(long)]
    heads: Option<String>,

    /// Scale factor for the selected entries
    #[arg(long)]
    alpha: Option<f32>,

    /// Search α over these candidates (default 2,5,10,100 when given without values)
    #[arg(long, num_args = 0.., value_delimiter = ',')]
    grid: Option<Vec<f32>>,

    /// Heads to ablate, e.g. L10H7,L11H10
    #[arg(long)]
    ablate: Option<String>,

    /// JSON intervention spec (one object or an array)
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct SimilarityArgs {
    #[command(flatten)]
    model: ModelArgs,

    #[command(flatten)]
    data: DataArgs,

    /// Word vectors used to (re)score attribute similarity
    #[arg(long)]
    embeddings: Option<PathBuf>,

    /// Number of equal-count bins (default 10)
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    model: ModelArgs,

    /// Reference logits (default: logits.json next to the model)
    #[arg(long)]
    fixtures: Option<PathBuf>,

    /// Reference tokenizer encodings to check as well
    #[arg(long)]
    encodings: Option<PathBuf>,
}

impl ModelArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        cfg.model = self.model.clone();
        cfg.model_config = self.model_config.clone();
        cfg.tokenizer = self.tokenizer.clone();
    }
}

impl DataArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        cfg.dataset = self.dataset.clone();
        cfg.seed = self.seed;
        cfg.sample = self.sample;
    }
}

impl Cli {
    /// Flags as a config layer, plus the command name.
    fn flags(&self) -> (&'static str, ExperimentConfig) {
        let mut c = ExperimentConfig { out: self.out.clone(), workers: self.workers, ..Default::default() };
        let name = match &self.command {
            Command::Dataset { action: DatasetAction::Build(a) } => {
                a.model.apply(&mut c);
                c.counterfact = a.counterfact.clone();
                c.field_paths = a.field_paths.clone();
                c.n = a.n;
                c.seed = a.seed;
                c.prefix = a.prefix.clone();
                c.embeddings = a.embeddings.clone();
                "dataset build"
            }
            Command::Trace(a) => {
                a.model.apply(&mut c);
                a.data.apply(&mut c);
                c.analyses = a.analyses.clone();
                c.projection = a.projection.clone();
                c.heads = a.heads.clone();
                c.per_token = a.per_token.then_some(true);
                c.attention_maps = a.attention_maps.then_some(true);
                c.rank_groups = a.rank_groups.clone();
                c.max_capture_mb = a.max_capture_mb;
                "trace"
            }
            Command::Intervene(a) => {
                a.model.apply(&mut c);
                a.data.apply(&mut c);
                c.heads = a.heads.clone();
                c.alpha = a.alpha;
                c.grid = a.grid.clone();
                c.ablate = a.ablate.clone();
                c.spec = a.spec.clone();
                "intervene"
            }
            Command::Similarity(a) => {
                a.model.apply(&mut c);
                a.data.apply(&mut c);
                c.embeddings = a.embeddings.clone();
                c.bins = a.bins;
                "similarity"
            }
            Command::Fixtures { action: FixturesAction::Verify(a) } => {
                a.model.apply(&mut c);
                c.fixtures = a.fixtures.clone();
                c.encodings = a.encodings.clone();
                "fixtures verify"
            }
        };
        (name, c)
    }
}

fn run(cli: &Cli) -> Result<()> {
    let (name, flags) = cli.flags();
    let cfg = match &cli.config {
        Some(path) => flags.overlay(ExperimentConfig::load(path)?),
        None => flags,
    };
    cfg.check_paths()?;
    if let Some(workers) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    match name {
        "dataset build" => commands::dataset::build(&cfg),
        "trace" => commands::trace::run(&cfg),
        "intervene" => commands::intervene::run(&cfg),
        "similarity" => commands::similarity::run(&cfg),
        _ => commands::fixtures::verify(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let category = failure::classify(&err);
            eprintln!("error: {err:#}");
            if category != Category::Other {
                eprintln!("({} error)", category.name());
            }
            ExitCode::from(category.code())
        }
    }
}
