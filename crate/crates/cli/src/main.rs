mod manifest;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tricoat_core::config::Config;
use tricoat_core::explain::LlmMode;
use tricoat_core::models::ModelKind;
use tricoat_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "tricoat", version, about = "Tri-modal co-attention subtyping pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Configuration document (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the document-level seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Root of every input and output path.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads for fold-level parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort.
    Synth(Common),
    /// Derive subtype labels from MMSE trajectories.
    Labels(Common),
    /// Train one checkpoint per outer fold and model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Comma-separated model list.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<ModelKind>>,
    },
    /// Score trained checkpoints and external predictions.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<ModelKind>>,
        /// External predictions as `name=path`; repeatable.
        #[arg(long, value_parser = parse_external)]
        external: Vec<(String, PathBuf)>,
    },
    /// Export mean co-attention maps as chord CSVs.
    Attention(Common),
    /// Integrated-gradients attribution per subject.
    Attribute {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        subject: Vec<String>,
    },
    /// Build explanation prompts and optionally query a language model.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        subject: Vec<String>,
        /// Enables the language-model client in the given mode.
        #[arg(long)]
        llm: Option<LlmMode>,
    },
}

fn parse_external(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
        _ => Err(format!("expected name=path, got {s:?}")),
    }
}

fn load_config(common: &Common) -> Result<Config> {
    let mut config = Config::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Synth(c) | Command::Labels(c) | Command::Attention(c) => c,
        Command::Train { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Attribute { common, .. }
        | Command::Explain { common, .. } => common,
    };
    if let Some(jobs) = common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("--jobs {jobs}: {e}")))?;
    }
    let mut config = load_config(common)?;
    let ctx = pipeline::Context::new(common, &config)?;
    match cli.command {
        Command::Synth(_) => pipeline::synth(ctx),
        Command::Labels(_) => pipeline::labels(ctx),
        Command::Train { models, .. } => pipeline::train(ctx, models),
        Command::Evaluate { models, external, .. } => pipeline::evaluate(ctx, models, external),
        Command::Attention(_) => pipeline::attention(ctx),
        Command::Attribute { subject, .. } => pipeline::attribute(ctx, subject),
        Command::Explain { subject, llm, .. } => {
            if let Some(mode) = llm {
                config.llm.enabled = true;
                config.llm.mode = mode;
            }
            pipeline::explain(ctx.with_config(&config), subject)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
