use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorNetError {
    #[error("shape mismatch at {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite activation produced by node `{node}`")]
    NonFiniteActivation { node: String },
    #[error("forward cache is stale: model was mutated after the cached forward pass")]
    StaleCache,
    #[error("unknown input `{0}`")]
    UnknownInput(String),
    #[error("model config error: {0}")]
    ConfigError(String),
    #[error("model file error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
