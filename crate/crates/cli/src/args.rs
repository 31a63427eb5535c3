use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use forestnmt::Mode;

#[derive(Debug, Parser)]
#[command(
    name = "forestnmt",
    version,
    about = "Forest-to-sequence neural machine translation",
    args_override_self = true
)]
pub struct Cli {
    /// Cap on worker threads for batch-parallel loss evaluation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, metrics and manifest.
    Train(TrainArgs),
    /// Greedy-decode a source file with a trained checkpoint.
    Translate(TranslateArgs),
    /// Score hypotheses: BLEU, length buckets, attention ratios.
    Eval(EvalArgs),
    /// Run the gradient-check and forest-oracle suites.
    Check(CheckArgs),
    /// Build a vocabulary file from a tokenized corpus.
    Vocab(VocabArgs),
    /// Write the synthetic bracketing corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "forest")]
    pub mode: Mode,
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    /// Forest file aligned with --src; required for tree and forest modes.
    #[arg(long)]
    pub forests: Option<PathBuf>,
    #[arg(long)]
    pub dev_src: PathBuf,
    #[arg(long)]
    pub dev_tgt: PathBuf,
    #[arg(long)]
    pub dev_forests: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub hidden: usize,
    /// Word embedding size (default: --hidden).
    #[arg(long)]
    pub embed: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Learning-rate factor after an epoch without dev improvement.
    #[arg(long, default_value_t = 0.5)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Epochs without dev improvement before stopping; 0 disables early stopping.
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long, default_value_t = forestnmt::model::INIT_SCALE)]
    pub init_scale: f64,
    #[arg(long, default_value_t = forestnmt::corpus::DEFAULT_MIN_FREQ)]
    pub min_freq: usize,
    /// Training pairs with a longer side are dropped.
    #[arg(long, default_value_t = forestnmt::corpus::DEFAULT_MAX_LEN)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub src: PathBuf,
    /// Required iff the checkpoint was trained in tree or forest mode.
    #[arg(long)]
    pub forests: Option<PathBuf>,
    /// Hypothesis file, one translation per line.
    #[arg(long)]
    pub out: PathBuf,
    /// Write per-sentence attention records (JSON lines) here.
    #[arg(long)]
    pub dump_attention: Option<PathBuf>,
    /// Decoding length cap (default: 2 * source length + 5).
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub hyp: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Source file; enables --buckets.
    #[arg(long)]
    pub src: Option<PathBuf>,
    /// Report BLEU per source-length bucket.
    #[arg(long, requires = "src")]
    pub buckets: bool,
    /// Attention dump written by `translate --dump-attention`.
    #[arg(long)]
    pub attention: Option<PathBuf>,
    /// Print CSV instead of text.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Gradient-check instances per mode.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 1000)]
    pub forest_trials: usize,
    /// Debug hook: corrupt the analytic gradient of this parameter.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    /// Tokenized text, one sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = forestnmt::corpus::DEFAULT_MIN_FREQ)]
    pub min_freq: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub pairs: usize,
    #[arg(long, default_value_t = 8)]
    pub vocab: usize,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 7)]
    pub max_len: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Writes PREFIX.src, PREFIX.tgt, PREFIX.forest and PREFIX.gold.
    #[arg(long)]
    pub out_prefix: PathBuf,
}
