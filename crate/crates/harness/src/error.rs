use std::fmt;
use thiserror::Error;

/// Pipeline stage an error came from; printed as the error tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingest,
    Normalize,
    Difference,
    Reservoir,
    Supervised,
    Pca,
    Train,
    Predict,
    Recalibrate,
    Evaluate,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Config => "config",
            Self::Ingest => "ingest",
            Self::Normalize => "normalize",
            Self::Difference => "difference",
            Self::Reservoir => "reservoir",
            Self::Supervised => "supervised",
            Self::Pca => "pca",
            Self::Train => "train",
            Self::Predict => "predict",
            Self::Recalibrate => "recalibrate",
            Self::Evaluate => "evaluate",
            Self::Output => "output",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    /// The inner message is part of this one, so it is not chained as a source.
    #[error("[{stage}] {error}")]
    Stage {
        stage: Stage,
        error: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("[config] {0}")]
    Config(String),
    #[error("[compare] configs disagree on {0}")]
    Mismatch(&'static str),
    #[error("[grid] all {0} candidates failed")]
    AllFailed(usize),
}

impl HarnessError {
    pub fn stage(&self) -> Stage {
        match self {
            Self::Stage { stage, .. } => *stage,
            _ => Stage::Config,
        }
    }
}

/// Tags any error with the stage that produced it.
pub(crate) trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, HarnessError>;
}

impl<T, E: std::error::Error + Send + Sync + 'static> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, HarnessError> {
        self.map_err(|e| HarnessError::Stage { stage, error: Box::new(e) })
    }
}
