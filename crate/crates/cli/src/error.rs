//! Error classification for the exit-code contract.

use isochron_core::config::ConfigError;
use isochron_core::data::DataError;
use isochron_core::inference::InferenceError;
use isochron_core::metrics::MetricsError;
use isochron_core::model::ModelError;
use isochron_core::tensor::KernelError;
use isochron_core::training::TrainError;
use isochron_core::vocab::VocabError;

#[derive(Debug)]
pub enum CliError {
    /// Exit 1: unreadable/unwritable/corrupt files.
    Io(String),
    /// Exit 2: configuration or validation failures.
    Config(String),
    /// Exit 3: numeric failure (non-finite loss).
    Numeric(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Io(m) => write!(f, "I/O error: {m}"),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

pub fn exit_code(e: &CliError) -> i32 {
    match e {
        CliError::Io(_) => 1,
        CliError::Config(_) => 2,
        CliError::Numeric(_) => 3,
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(_) | DataError::Parse { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<VocabError> for CliError {
    fn from(e: VocabError) -> Self {
        match e {
            VocabError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => CliError::Io(e.to_string()),
            ModelError::Data(d) => d.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<KernelError> for CliError {
    fn from(e: KernelError) -> Self {
        match e {
            KernelError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Io(_) | InferenceError::Parse { .. } => CliError::Io(e.to_string()),
            InferenceError::Model(m) => m.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Io(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Kernel(k) => k.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Config(c) => c.into(),
            TrainError::Inference(i) => i.into(),
            TrainError::Metrics(m) => m.into(),
            TrainError::EmptyCorpus | TrainError::Resume(_) => CliError::Config(e.to_string()),
        }
    }
}
