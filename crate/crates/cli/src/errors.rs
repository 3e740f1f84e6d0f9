use std::io;

use thiserror::Error;

/// Exit codes: 0 ok, 2 config error, 3 missing or unusable input artifact,
/// 4 numeric failure.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    MissingArtifact(String),
    #[error("{0}")]
    Numeric(String),
    /// Output-side failures count as config errors: a writable output
    /// directory is part of a valid run configuration.
    #[error("{0}")]
    Output(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Output(_) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingArtifact(_) => "missing_artifact",
            CliError::Numeric(_) => "numeric",
            CliError::Output(_) => "output",
        }
    }
}

pub fn read_context(what: &str, path: &std::path::Path, detail: impl std::fmt::Display) -> CliError {
    CliError::MissingArtifact(format!("{what} at {}: {detail}", path.display()))
}

pub fn write_context(path: &std::path::Path, err: io::Error) -> CliError {
    CliError::Output(format!("writing {}: {err}", path.display()))
}

use precedent_core::analysis::AnalysisError;
use precedent_core::citegraph::CiteError;
use precedent_core::corpus::CorpusError;
use precedent_core::influence::InfluenceError;
use precedent_core::model::ModelError;
use precedent_core::synth::SynthError;
use precedent_core::taxonomy::TaxonomyError;

pub fn from_synth(err: SynthError) -> CliError {
    match err {
        SynthError::BadConfig(_) => CliError::Config(err.to_string()),
        SynthError::InfeasibleCitation { .. } | SynthError::ExhaustedRetries { .. } => {
            CliError::Numeric(err.to_string())
        }
    }
}

/// Corpus failures while reading an input file: missing, malformed, or
/// schema-violating data all count against the artifact.
pub fn from_corpus_read(err: CorpusError, path: &std::path::Path) -> CliError {
    read_context("corpus", path, err)
}

pub fn from_corpus_write(err: CorpusError, path: &std::path::Path) -> CliError {
    CliError::Output(format!("writing corpus {}: {err}", path.display()))
}

pub fn from_filter(err: CorpusError) -> CliError {
    CliError::Numeric(err.to_string())
}

pub fn from_cite(err: CiteError) -> CliError {
    CliError::Config(err.to_string())
}

pub fn from_model(err: ModelError) -> CliError {
    match err {
        ModelError::NonFiniteLoss { .. } => CliError::Numeric(err.to_string()),
        ModelError::BadCheckpoint(_) | ModelError::Io(_) => {
            CliError::MissingArtifact(err.to_string())
        }
        // Shape disagreements mean the configured corpus and checkpoint do
        // not belong together.
        _ => CliError::Config(err.to_string()),
    }
}

pub fn from_influence(err: InfluenceError) -> CliError {
    match err {
        InfluenceError::SingularHessian { .. }
        | InfluenceError::NotConverged { .. }
        | InfluenceError::NotStationary { .. } => CliError::Numeric(err.to_string()),
        InfluenceError::BadArtifact(_) | InfluenceError::Io(_) => {
            CliError::MissingArtifact(err.to_string())
        }
        _ => CliError::Config(err.to_string()),
    }
}

pub fn from_taxonomy(err: TaxonomyError) -> CliError {
    match err {
        TaxonomyError::MissingPrediction { .. } => CliError::MissingArtifact(err.to_string()),
        _ => CliError::Config(err.to_string()),
    }
}

pub fn from_analysis(err: AnalysisError) -> CliError {
    match err {
        AnalysisError::LengthMismatch { .. } | AnalysisError::ShapeMismatch { .. } => {
            CliError::Config(err.to_string())
        }
        AnalysisError::MissingPredictions => CliError::MissingArtifact(err.to_string()),
        AnalysisError::Labeling(inner) => from_taxonomy(inner),
        _ => CliError::Numeric(err.to_string()),
    }
}
