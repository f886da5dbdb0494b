//! `tabbin`: generate corpora, pretrain segment models, embed and evaluate.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tabbin_core::{Recipe, SegmentKind, Task};

#[derive(Parser, Debug)]
#[command(name = "tabbin", version, about = "Structure-aware table embeddings")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// More logging (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_segment(s: &str) -> Result<SegmentKind, String> {
    s.parse().map_err(|e: tabbin_core::Error| e.to_string())
}

fn parse_recipe(s: &str) -> Result<Recipe, String> {
    s.parse().map_err(|e: tabbin_core::Error| e.to_string())
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: tabbin_core::Error| e.to_string())
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate tabjson tables and write them back normalized.
    Ingest {
        /// Table files or directories of `.json` tables.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Generate a synthetic corpus with ground truth.
    Gen {
        /// Corpus spec JSON; defaults to the config's corpus section.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Override the number of tables.
        #[arg(long)]
        tables: Option<usize>,
    },
    /// Pretrain segment models and save a bundle.
    Pretrain {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Segments to train (row, col, hmd, vmd); all when omitted.
        #[arg(long, value_delimiter = ',', value_parser = parse_segment)]
        segment: Vec<SegmentKind>,
        #[arg(long)]
        steps: Option<usize>,
        /// Start from this bundle and replace the trained segments.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Compute composite embeddings for a corpus.
    Embed {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// colcomp, tblcomp1, tblcomp2, numeric or range.
        #[arg(long, value_parser = parse_recipe)]
        recipe: Recipe,
    },
    /// Score a clustering task and emit a JSON report.
    Eval {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// cc, tc or ec.
        #[arg(long, value_parser = parse_task)]
        task: Task,
        /// Ground-truth CSV; defaults to `truth_<task>.csv` in the corpus.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        /// Also score random vectors of the same shape.
        #[arg(long)]
        random_baseline: bool,
    },
    /// Retrain without a model component and compare MAP/MRR.
    Ablate {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// visibility, type, units, coords or all.
        #[arg(long, value_delimiter = ',', required = true)]
        drop: Vec<String>,
        /// Tasks to compare; tc and cc when omitted.
        #[arg(long, value_delimiter = ',', value_parser = parse_task)]
        task: Vec<Task>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        /// Coordinates checked per tensor.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Fail above this relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
