use thiserror::Error;

use svllm_core::prompt::{GatewayError, PredictError};
use svllm_core::retrieval::RetrievalError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("data error: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Provider(_) => 3,
            CliError::Data(_) => 4,
        }
    }

    pub fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Config(m) => CliError::Config(m),
            RetrievalError::Cache(m) => CliError::Data(m),
            other => CliError::Provider(other.to_string()),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Config(m) => CliError::Config(m),
            GatewayError::MissingTruth { .. } => CliError::Data(e.to_string()),
            other => CliError::Provider(other.to_string()),
        }
    }
}

impl From<PredictError> for CliError {
    fn from(e: PredictError) -> Self {
        match e {
            PredictError::Gateway { source, sample_id } => match CliError::from(source) {
                CliError::Config(m) => CliError::Config(format!("sample {sample_id}: {m}")),
                CliError::Data(m) => CliError::Data(format!("sample {sample_id}: {m}")),
                CliError::Provider(m) => CliError::Provider(format!("sample {sample_id}: {m}")),
            },
            other => CliError::Provider(other.to_string()),
        }
    }
}
