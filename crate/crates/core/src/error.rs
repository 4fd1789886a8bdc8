//! Pipeline-level errors tagged with the stage that produced them.

use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::decode::DecodeError;
use crate::embed::EmbedError;
use crate::knn::KnnError;
use crate::metrics::MetricsError;
use crate::sampler::SampleError;
use crate::transitions::TransitionError;

/// Pipeline stages, used to prefix diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Remap,
    Featurize,
    Sample,
    Transitions,
    Predict,
    Evaluate,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Remap => "remap",
            Stage::Featurize => "featurize",
            Stage::Sample => "sample-support",
            Stage::Transitions => "estimate-transitions",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::Write => "write",
        })
    }
}

#[derive(Debug, Error)]
pub enum ErrorKind {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Knn(#[from] KnnError),
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Config(String),
    #[error("embeddings missing or misaligned for sentences {0:?}")]
    MissingEmbeddings(Vec<usize>),
}

#[derive(Debug, Error)]
#[error("[{stage}] {kind}")]
pub struct Error {
    pub stage: Stage,
    #[source]
    pub kind: ErrorKind,
}

impl Error {
    pub fn new(stage: Stage, kind: impl Into<ErrorKind>) -> Self {
        Self {
            stage,
            kind: kind.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::new(Stage::Config, ErrorKind::Config(msg.into()))
    }

    pub fn io(stage: Stage, path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::new(
            stage,
            ErrorKind::Io {
                path: path.into(),
                source,
            },
        )
    }
}

/// Attaches a stage to module-level errors.
pub trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T, Error>;
}

impl<T, E: Into<ErrorKind>> StageExt<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, Error> {
        self.map_err(|e| Error::new(stage, e))
    }
}
