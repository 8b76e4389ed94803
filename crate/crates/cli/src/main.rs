//! Command-line front end: data preparation, training, evaluation, generation and inspection.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "scanpath", version, about = "Scanpath prediction for reading")]
pub struct Cli {
    /// Worker threads for parallel evaluation and gradient shards (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a cross-validation plan.
    Split(SplitArgs),
    /// Trains a model on one fold.
    Train(TrainArgs),
    /// Continues training a checkpoint on a few instances of another corpus.
    Finetune(FinetuneArgs),
    /// Evaluates a checkpoint on the test part of a fold.
    Eval(EvalArgs),
    /// Evaluates a constant baseline on the test part of a fold.
    Baseline(BaselineArgs),
    /// Samples scanpaths for the sentences of a file.
    Generate(GenerateArgs),
    /// Exports an attention heatmap or a per-saccade-range NLL table.
    Inspect(InspectArgs),
    /// Samples a synthetic corpus from a planted policy.
    Synth(SynthArgs),
    /// Trains and evaluates a grid of model variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Kind {
    NewSentence,
    NewReader,
    NewReaderNewSentence,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Directory holding sentences.jsonl and scanpaths.jsonl.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum)]
    pub kind: Kind,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FoldArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
}

#[derive(Debug, Args)]
#[group(id = "embedding_source", multiple = false)]
pub struct EmbeddingArgs {
    /// EYEMB1 file of frozen embeddings.
    #[arg(long, group = "embedding_source")]
    pub embeddings: Option<PathBuf>,
    /// Learn a token embedding table instead (the default).
    #[arg(long, group = "embedding_source")]
    pub trainable_embeddings: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub fold: FoldArgs,
    #[command(flatten)]
    pub embedding: EmbeddingArgs,
    /// ModelConfig JSON; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// TrainConfig JSON; defaults apply to missing fields.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    /// Reader-specific model with this embedding size.
    #[arg(long, value_parser = ["16", "32", "64"])]
    pub reader_embedding: Option<String>,
    /// Overrides the seed of the training configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Number of scanpaths drawn from the corpus.
    #[arg(long)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub fold: FoldArgs,
    /// Comma-separated subset of nll, nld, multimatch.
    #[arg(long, default_value = "nll")]
    pub metrics: String,
    /// Seed of the generated scanpaths behind nld and multimatch.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BaselineKind {
    Uniform,
    TrainLabelDist,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub kind: BaselineKind,
    #[command(flatten)]
    pub fold: FoldArgs,
    /// Additive smoothing of train-label-dist.
    #[arg(long, default_value_t = scanpath::eval::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Class-space M; the longest training sentence when unset.
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// sentences.jsonl file.
    #[arg(long)]
    pub sentences: PathBuf,
    /// Samples per sentence.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Maximum path length; 4·m when unset.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Sample from the raw distribution; out-of-sentence draws end the path.
    #[arg(long)]
    pub no_mask: bool,
    /// Reader to condition on (reader-specific models).
    #[arg(long)]
    pub reader: Option<String>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// `READER/SENTENCE` or the 0-based line number in scanpaths.jsonl.
    #[arg(long)]
    pub scanpath_id: Option<String>,
    /// Bucket list such as `...-3,-2:-1,0,1:3,4:...,eos`.
    #[arg(long)]
    pub buckets: Option<String>,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Policy description (JSON).
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub readers: usize,
    #[arg(long)]
    pub sentences: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Variant grid (JSON); the standard nine-row matrix when unset.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[command(flatten)]
    pub fold: FoldArgs,
    #[command(flatten)]
    pub embedding: EmbeddingArgs,
    /// Base ModelConfig JSON the variants modify.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Problems with the invocation itself, as opposed to the data.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(e: &anyhow::Error) -> u8 {
    use scanpath::Error as E;
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(lib) = cause.downcast_ref::<E>() {
            return match lib {
                E::Diverged { .. } | E::Numeric(_) | E::Nn(_) => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
