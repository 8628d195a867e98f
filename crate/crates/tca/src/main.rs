use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tca::commands::{
    cmd_attention, cmd_embed, cmd_evaluate, cmd_extract, cmd_fit_whitening, cmd_synth, cmd_train,
};
use tca::config::{EncoderOptions, EvaluateOptions, ExtractOptions, RunConfig, SynthOptions, TrainingOptions};
use tca::json::{measure_name, ReportFile};
use tca::{TcaError, TcaResult};

#[derive(Parser)]
#[command(name = "tca", version, about = "Temporal context aggregation for video retrieval")]
struct Cli {
    /// Seed for every random choice (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file supplying defaults for any option.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel encoding and extraction (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pool, whiten and normalize feature-map files into a descriptor corpus.
    Extract {
        /// One feature-map file per video; the file stem becomes the video id.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        whitening: Option<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
        #[command(flatten)]
        options: ExtractOptions,
    },
    /// Fit a PCA whitening model on pooled frame descriptors.
    FitWhitening {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
        #[command(flatten)]
        options: ExtractOptions,
    },
    /// Generate a synthetic dataset (manifest, corpus, ground truth).
    Synth {
        #[arg(long, short)]
        output: PathBuf,
        #[command(flatten)]
        options: SynthOptions,
    },
    /// Train the encoder with the memory-bank contrastive objective.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Continue from the trainer state in the output directory.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        encoder: EncoderOptions,
        #[command(flatten)]
        training: TrainingOptions,
    },
    /// Refine a corpus with a trained encoder.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Refined frame-level corpus.
        #[arg(long)]
        frames_out: PathBuf,
        /// Video-level descriptors, one row per video.
        #[arg(long)]
        videos_out: PathBuf,
    },
    /// Rank a corpus for every ground-truth query and report AP / mAP.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        /// Report file; printed to stdout when omitted.
        #[arg(long, short)]
        output: Option<PathBuf>,
        #[command(flatten)]
        options: EvaluateOptions,
    },
    /// Export the mean attention each frame of a video receives.
    Attention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        video: String,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> TcaResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| TcaError::Data(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> TcaResult<()> {
    let file = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    if let Some(n) = cli.threads.or(file.threads) {
        if n == 0 {
            return Err(TcaError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| TcaError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Extract { inputs, whitening, output, options } => {
            let options = options.overlay(&file.extract);
            let corpus = cmd_extract(&inputs, options.pooling(), whitening.as_deref(), &output)?;
            log::info!("wrote {} videos to {}", corpus.len(), output.display());
        }
        Command::FitWhitening { inputs, output, options } => {
            let options = options.overlay(&file.extract);
            let model = cmd_fit_whitening(&inputs, options.pooling(), options.whitened_dim(), &output)?;
            log::info!("whitening {} -> {}", model.input_dim(), model.output_dim());
        }
        Command::Synth { output, options } => {
            let spec = options.overlay(&file.synth).resolve(seed)?;
            cmd_synth(&spec, &output)?;
        }
        Command::Train { manifest, output, resume, encoder, training } => {
            let encoder = encoder.overlay(&file.encoder);
            let training = training.overlay(&file.training).resolve(seed)?;
            cmd_train(&manifest, &encoder, seed, &training, &output, resume)?;
        }
        Command::Embed { checkpoint, corpus, frames_out, videos_out } => {
            cmd_embed(&checkpoint, &corpus, &frames_out, &videos_out)?;
        }
        Command::Evaluate { corpus, ground_truth, output, options } => {
            let measure = options.overlay(&file.evaluate).measure();
            let report = cmd_evaluate(&corpus, &ground_truth, measure, output.as_deref())?;
            log::info!("{} mAP {:.4}", measure_name(measure), report.map);
            if output.is_none() {
                print_json(&ReportFile::from(&report))?;
            }
        }
        Command::Attention { checkpoint, corpus, video, output } => {
            let out = cmd_attention(&checkpoint, &corpus, &video, output.as_deref())?;
            if output.is_none() {
                print_json(&out)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
