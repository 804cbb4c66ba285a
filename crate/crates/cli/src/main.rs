//! `mcm`: command-line entry point for the distillation pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration or data error,
//! 3 numerical abort.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "mcm",
    version,
    about = "Multilingual code-mixed VQA distillation at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command that writes a run directory.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed of the section the command uses.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Where the dataset comes from.
#[derive(Debug, Clone, Args)]
pub struct DataArg {
    /// Dataset directory written by `synth`; generated from the config when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct LanguagesArg {
    /// Comma-separated language ids.
    #[arg(long, value_delimiter = ',')]
    pub languages: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct StudentArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArg,
    /// Teacher checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub languages: LanguagesArg,
    /// Objective to switch off.
    #[arg(long, value_parser = ["cls", "object", "pred", "nll"])]
    pub ablate: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the word aligner per language and score it against gold links.
    Align {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        languages: LanguagesArg,
    },
    /// Generate code-mixed questions from English/foreign pairs.
    Codemix {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        languages: LanguagesArg,
    },
    /// Code-mixing complexity and similarity of the code-mixed questions.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        languages: LanguagesArg,
    },
    /// Train the English teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Distill the teacher into a multilingual student.
    Distill(StudentArgs),
    /// Train the student on the same stream with the answer loss only.
    Baseline(StudentArgs),
    /// Accuracy of a checkpoint per language and answer type.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        languages: LanguagesArg,
    },
    /// Partial-question, zero-shot and representation-alignment analyses.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// One or more checkpoints.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[command(flatten)]
        languages: LanguagesArg,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the table as CSV under this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the evaluation results of several run directories.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    /// Validation or data problem.
    Data(String),
    /// Non-finite loss or gradient, or a failed gradient check.
    Numerical(String),
}

impl From<mcm_core::Error> for Failure {
    fn from(e: mcm_core::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth { common } => commands::synth(&common),
        Command::Align {
            common,
            data,
            languages,
        } => commands::align(&common, &data, &languages.languages),
        Command::Codemix {
            common,
            data,
            languages,
        } => commands::codemix(&common, &data, &languages.languages),
        Command::Metrics {
            common,
            data,
            languages,
        } => commands::metrics(&common, &data, &languages.languages),
        Command::TrainTeacher { common, data } => commands::train_teacher(&common, &data),
        Command::Distill(a) => commands::student(&a, mcm_core::trainer::Mode::Distill),
        Command::Baseline(a) => commands::student(&a, mcm_core::trainer::Mode::JointBaseline),
        Command::Eval {
            common,
            data,
            checkpoint,
            languages,
        } => commands::eval(&common, &data, &checkpoint, &languages.languages),
        Command::Analyze {
            common,
            data,
            checkpoint,
            languages,
        } => commands::analyze(&common, &data, &checkpoint, &languages.languages),
        Command::Gradcheck { seed, out } => commands::gradcheck(seed, out.as_deref()),
        Command::Report { runs, out } => commands::report(&runs, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical abort: {m}");
            ExitCode::from(3)
        }
    }
}
