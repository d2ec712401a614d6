//! Command implementations behind the `memtangle` binary.
//!
//! Every command is a thin wrapper over `memtangle_core`; the functions here
//! are what the binary calls, so tests can drive them without spawning a
//! process.

mod commands;
mod config;
mod io;
mod manifest;
mod pipeline;

pub use commands::{
    analyze, cmd_analyze, cmd_decode, cmd_evaluate, cmd_generate, cmd_train, decode_run, run_tag,
    train_run, AnalyzeArgs, AnalyzeMode, AnalyzeSummary, CurvePoint, DecodeArgs, EvaluateArgs,
    GenerateArgs, LabeledRecord, TrainArgs, TrainedRun,
};
pub use config::{load_json, threads_from_env, AnalysisConfig, ExperimentConfig, PipelineConfig};
pub use io::{read_labeled_jsonl, sha256_hex, write_atomic};
pub use manifest::RunManifest;
pub use pipeline::{cmd_pipeline, PipelineOutputs};

use memtangle_core::{Error, ErrorClass};

/// A failed command, optionally tagged with the pipeline stage it came from.
#[derive(Debug)]
pub struct CliError {
    pub stage: Option<&'static str>,
    pub error: Error,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self.error.class() {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Incomplete => 5,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.stage {
            Some(stage) => write!(f, "stage `{stage}` failed: {}", self.error),
            None => write!(f, "{}", self.error),
        }
    }
}

impl std::error::Error for CliError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for CliError {
    fn from(error: Error) -> Self {
        CliError { stage: None, error }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T> StageExt<T> for memtangle_core::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|error| CliError {
            stage: Some(stage),
            error,
        })
    }
}
