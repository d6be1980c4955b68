//! `nmrmos`: corpus generation, training, MOS prediction, evaluation,
//! retrieval and embedding export.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Prefix of every diagnostic printed on failure.
pub const ERROR_PREFIX: &str = "nmrmos: error:";

#[derive(Parser)]
#[command(name = "nmrmos", version, about = "Speech quality estimation with non-matching references")]
struct Cli {
    /// Flat key = value settings file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run on a single thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a rated corpus with clean references.
    GenCorpus(GenCorpusArgs),
    /// Train a model on a corpus manifest.
    Train(TrainArgs),
    /// Estimate MOS of a WAV file or of a manifest split.
    Predict(PredictArgs),
    /// Score predictions against manifest labels.
    Evaluate(EvaluateArgs),
    /// Quality-level retrieval precision over embeddings.
    Retrieve(RetrieveArgs),
    /// Write per-utterance embeddings with 2-D PCA coordinates as CSV.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    sources: Option<usize>,
    /// Comma-separated degradation kinds.
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<String>>,
    #[arg(long)]
    duration_s: Option<f64>,
    #[arg(long)]
    nmr_count: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    dev_fraction: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    clean_manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    clean_fraction: Option<f64>,
    #[arg(long)]
    lambda_q: Option<f64>,
    #[arg(long)]
    pairs_per_epoch: Option<usize>,
    #[arg(long)]
    dev_nmrs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    conv_channels: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    kernel_sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    strides: Option<Vec<usize>>,
    #[arg(long)]
    head_hidden: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// A WAV file, or a manifest (`.jsonl`) whose split is scored.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Directory of clean reference WAVs, or a manifest of references.
    #[arg(long)]
    nmr: Option<PathBuf>,
    /// Number of references; defaults to min(100, available).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    split: Option<String>,
    /// Combine references of known quality using the preference head.
    #[arg(long)]
    signed: Option<bool>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// CSV of predicted vs target MOS per utterance.
    #[arg(long)]
    scatter: Option<PathBuf>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
}

fn path_str(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

impl Cli {
    fn flags(&self) -> (settings::Flags, &'static [&'static str]) {
        use settings::Flags;
        let base = Flags::default()
            .set("seed", self.seed)
            .set("deterministic", self.deterministic.then_some(true));
        match &self.command {
            Command::GenCorpus(a) => (
                base.set("corpus.out_dir", path_str(a.out_dir.clone()))
                    .set("corpus.sources", a.sources)
                    .list("corpus.kinds", a.kinds.clone())
                    .set("corpus.duration_s", a.duration_s)
                    .set("corpus.nmr_count", a.nmr_count)
                    .set("corpus.train_fraction", a.train_fraction)
                    .set("corpus.dev_fraction", a.dev_fraction),
                &["corpus"],
            ),
            Command::Train(a) => (
                base.set("train.manifest", path_str(a.manifest.clone()))
                    .set("train.clean_manifest", path_str(a.clean_manifest.clone()))
                    .set("train.out_dir", path_str(a.out_dir.clone()))
                    .set("train.batch_size", a.batch_size)
                    .set("train.lr", a.lr)
                    .set("train.epochs", a.epochs)
                    .set("train.clean_fraction", a.clean_fraction)
                    .set("train.lambda_q", a.lambda_q)
                    .set("train.pairs_per_epoch", a.pairs_per_epoch)
                    .set("train.dev_nmrs", a.dev_nmrs)
                    .list("model.conv_channels", a.conv_channels.clone())
                    .list("model.kernel_sizes", a.kernel_sizes.clone())
                    .list("model.strides", a.strides.clone())
                    .set("model.head_hidden", a.head_hidden),
                &["train", "model"],
            ),
            Command::Predict(a) => (
                base.set("predict.checkpoint", path_str(a.checkpoint.clone()))
                    .set("predict.input", path_str(a.input.clone()))
                    .set("predict.nmr", path_str(a.nmr.clone()))
                    .set("predict.n", a.n)
                    .set("predict.split", a.split.clone())
                    .set("predict.signed", a.signed)
                    .set("predict.output", path_str(a.output.clone())),
                &["predict"],
            ),
            Command::Evaluate(a) => (
                base.set("evaluate.predictions", path_str(a.predictions.clone()))
                    .set("evaluate.manifest", path_str(a.manifest.clone()))
                    .set("evaluate.output", path_str(a.output.clone()))
                    .set("evaluate.scatter", path_str(a.scatter.clone())),
                &["evaluate"],
            ),
            Command::Retrieve(a) => (
                base.set("retrieve.checkpoint", path_str(a.checkpoint.clone()))
                    .set("retrieve.manifest", path_str(a.manifest.clone()))
                    .set("retrieve.k", a.k)
                    .set("retrieve.split", a.split.clone()),
                &["retrieve"],
            ),
            Command::ExportEmbeddings(a) => (
                base.set("export.checkpoint", path_str(a.checkpoint.clone()))
                    .set("export.manifest", path_str(a.manifest.clone()))
                    .set("export.output", path_str(a.output.clone()))
                    .set("export.split", a.split.clone()),
                &["export"],
            ),
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (flags, sections) = cli.flags();
    let s = settings::Settings::resolve(cli.config.as_ref(), flags.done(), sections)?;
    eprint!("effective config:\n{}", s.effective());
    if s.get::<bool>("deterministic")? {
        rayon::ThreadPoolBuilder::new().num_threads(1).build_global()?;
    }
    match cli.command {
        Command::GenCorpus(_) => commands::gen_corpus(&s),
        Command::Train(_) => commands::train(&s),
        Command::Predict(_) => commands::predict(&s),
        Command::Evaluate(_) => commands::evaluate(&s),
        Command::Retrieve(_) => commands::retrieve(&s),
        Command::ExportEmbeddings(_) => commands::export_embeddings(&s),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{ERROR_PREFIX} {e:#}");
            ExitCode::FAILURE
        }
    }
}
