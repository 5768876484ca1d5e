//! `glyphsim`: prepare corpora, train ensembles, embed, analyse and report.

mod commands;
mod config;
mod layout;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// A problem with the user's input: bad config, missing upstream artifact,
/// refused guard. Exits with status 1.
#[derive(Debug)]
pub struct UserError(pub String);

impl UserError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

impl fmt::Display for UserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

#[derive(Parser, Debug)]
#[command(name = "glyphsim", version, about = "Cross-script visual similarity with contrastive encoder ensembles")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Run configuration (TOML). Without it every setting takes its default.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(short, long, global = true, env = config::OUT_ENV)]
    pub out: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.max_epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Root seed (same as `--set seed=N`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Encoder preset (same as `--set preset=NAME`).
    #[arg(long, global = true, value_parser = ["paper", "tiny"])]
    pub preset: Option<String>,
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic script families and their corpus manifest.
    Synth {
        /// Destination directory (default: <run>/synthetic).
        #[arg(long)]
        dir: Option<PathBuf>,
        /// Glyphs per family, overriding the configured counts.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Load, preprocess, split and store every corpus in the manifest.
    Prepare,
    /// Train one ensemble per target script.
    Train {
        /// Train only these targets.
        #[arg(long = "target")]
        targets: Vec<String>,
        /// Allow the full-size `paper` preset.
        #[arg(long)]
        force: bool,
    },
    /// Embed every needed script with each ensemble member and the consensus.
    Embed {
        /// Use ensembles with failed members.
        #[arg(long)]
        allow_partial: bool,
    },
    /// Similarity distributions, statistical tests and tables.
    Analyze,
    /// Hierarchical clustering of script centroids and similarity heatmaps.
    Cluster,
    /// PCA and t-SNE scatter plots of consensus embeddings.
    Project {
        #[arg(long, default_value = "both", value_parser = ["pca", "tsne", "both"])]
        method: String,
    },
    /// Grad-CAM overlays for both encoder pathways.
    Gradcam {
        /// Explain these glyph ids (default: the first few of every script).
        #[arg(long = "glyph")]
        glyphs: Vec<String>,
        /// Glyphs per script when none are named.
        #[arg(long)]
        per_script: Option<usize>,
        /// Ensemble member to explain.
        #[arg(long)]
        member: Option<usize>,
    },
    /// Collect tables and figures into the run index.
    Report,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Prepare => "prepare",
            Command::Train { .. } => "train",
            Command::Embed { .. } => "embed",
            Command::Analyze => "analyze",
            Command::Cluster => "cluster",
            Command::Project { .. } => "project",
            Command::Gradcam { .. } => "gradcam",
            Command::Report => "report",
        }
    }
}

/// 1 for user errors, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UserError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<glyphsim::Error>() {
            use glyphsim::Error as E;
            return match e {
                E::InvalidInput(_) | E::Config(_) | E::PartialEnsemble { .. } | E::UnknownLinkage(_) => 1,
                E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.global.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
