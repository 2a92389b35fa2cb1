//! Operator surface for the dialogue LM pipeline: train, generate, evaluate,
//! chat, and botchat. Every subcommand accepts a key=value --config file;
//! explicit flags win, and GUYU_SEED overrides --seed when set.

mod cmd_botchat;
mod cmd_chat;
mod cmd_evaluate;
mod cmd_generate;
mod cmd_train;
mod common;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "guyu",
    version,
    about = "Auto-regressive dialogue generation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (pretrain on plain text or finetune on dialogue JSONL)
    Train(TrainArgs),
    /// Decode responses for a test corpus into aligned hyp/ref files
    Generate(GenerateArgs),
    /// Score aligned hypothesis/reference files
    Evaluate(EvaluateArgs),
    /// Interactive REPL against a checkpoint
    Chat(ChatArgs),
    /// Bot-to-bot interaction from a seed query
    Botchat(BotchatArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Held-out validation corpus (defaults to a tail holdout of --corpus)
    #[arg(long)]
    pub corpus_valid: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Build the vocabulary from the corpus first: char|bpe
    #[arg(long)]
    pub build_vocab: Option<String>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub min_count: Option<usize>,
    /// Continue from this checkpoint (e.g. finetune after pretrain)
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory for model.ckpt and train_log.jsonl
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// pretrain|finetune
    #[arg(long)]
    pub stage: Option<String>,
    #[arg(long)]
    pub lambda: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_positions: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_context: Option<usize>,
    #[arg(long)]
    pub max_response: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub lr_scale: Option<f64>,
    #[arg(long)]
    pub val_interval: Option<usize>,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory for hyps.txt / refs.txt
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// greedy|bm|tk|tp
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub b: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
    /// Parallel candidates per query, ranked by likelihood
    #[arg(long)]
    pub copies: Option<usize>,
    #[arg(long)]
    pub max_new: Option<usize>,
    #[arg(long)]
    pub max_context: Option<usize>,
    /// Decode only the first N samples
    #[arg(long)]
    pub limit: Option<usize>,
    /// Write every ranked candidate to this JSONL file
    #[arg(long)]
    pub dump: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Hypothesis file (plain text, or candidate-dump .jsonl)
    pub hyp: PathBuf,
    /// Reference file (plain text, one per line)
    pub reference: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// char|word
    #[arg(long)]
    pub metric_unit: Option<String>,
    /// Write the JSON report here as well
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ChatArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub b: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub copies: Option<usize>,
    #[arg(long)]
    pub max_new: Option<usize>,
    /// Context-memory window in tokens
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct BotchatArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Second bot's checkpoint (self-chat when omitted)
    #[arg(long)]
    pub checkpoint_b: Option<PathBuf>,
    /// Seed query opening the conversation
    #[arg(long)]
    pub query: Option<String>,
    /// Number of generated turns
    #[arg(long)]
    pub turns: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub b: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub copies: Option<usize>,
    #[arg(long)]
    pub max_new: Option<usize>,
    /// Write the transcript JSON here
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => cmd_train::run(args),
        Command::Generate(args) => cmd_generate::run(args),
        Command::Evaluate(args) => cmd_evaluate::run(args),
        Command::Chat(args) => cmd_chat::run(args),
        Command::Botchat(args) => cmd_botchat::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', "; ");
            eprintln!("error[{}]: {}", e.code(), msg);
            ExitCode::FAILURE
        }
    }
}
