use std::path::Path;

use tfrestore_core::adversary::AdversaryError;
use tfrestore_core::degrade::DegradeError;
use tfrestore_core::metrics::MetricsError;
use tfrestore_core::nn::NnError;
use tfrestore_core::restormer::ModelError;
use tfrestore_core::sfi_stft::SfiError;
use tfrestore_core::trainer::TrainError;
use tfrestore_core::wav::WavError;

/// Failure of a subcommand, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments or an invalid config file.
    #[error("{0}")]
    Usage(String),
    /// Missing or unusable input data.
    #[error("{0}")]
    Data(String),
    /// Training or inference produced non-finite values.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    /// Prefixes the message, keeping the kind.
    pub fn context(self, what: &str) -> Self {
        match self {
            CliError::Usage(m) => CliError::Usage(format!("{what}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{what}: {m}")),
            CliError::Numeric(m) => CliError::Numeric(format!("{what}: {m}")),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DegradeError> for CliError {
    fn from(e: DegradeError) -> Self {
        match e {
            DegradeError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Degrade(d) => d.into(),
            TrainError::Adversary(AdversaryError::InvalidConfig(m)) => CliError::Usage(m),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AdversaryError> for CliError {
    fn from(e: AdversaryError) -> Self {
        match e {
            AdversaryError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(WavError, MetricsError, NnError, SfiError, csv::Error);
