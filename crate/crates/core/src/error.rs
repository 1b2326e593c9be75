use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("training error in {component} (index {index}): {reason}")]
    Training {
        component: &'static str,
        index: usize,
        reason: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("state error: {0}")]
    State(String),

    #[error("inference error: {0}")]
    Inference(String),

    #[error("contrastive error: {0}")]
    Contrastive(String),

    #[error("planning error at depth {depth}, node {node}: {reason}")]
    Planning {
        depth: usize,
        node: usize,
        reason: String,
    },

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("statistics error: {0}")]
    Stat(String),

    #[error("uncertainty error: {0}")]
    Uncertainty(String),

    #[error("dataset generation error: {0}")]
    Generation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn training(component: &'static str, index: usize, reason: impl Into<String>) -> Self {
        Error::Training {
            component,
            index,
            reason: reason.into(),
        }
    }

    /// Wraps `self` with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors a user can fix by editing their configuration.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Json(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
