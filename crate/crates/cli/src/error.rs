//! Error categories mapped to exit codes: 2 config, 3 data, 4 numeric,
//! 5 I/O.

use std::fmt;

use fprnet_core::cascade::CascadeError;
use fprnet_core::checkpoint::CheckpointError;
use fprnet_core::losses::LossError;
use fprnet_core::metrics::MetricsError;
use fprnet_core::networks::NetworkError;
use fprnet_core::nifti::NiftiError;
use fprnet_core::phantom::PhantomError;
use fprnet_core::preprocess::PreprocessError;
use fprnet_core::pretrain::PretrainError;
use fprnet_core::trainer::TrainError;
use fprnet_core::volume::VolumeError;

use crate::config::ConfigError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io(_) => 5,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
            CliError::Io(_) => "io",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) | CliError::Io(m) => {
                f.write_str(m)
            }
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<NiftiError> for CliError {
    fn from(e: NiftiError) -> Self {
        match e {
            NiftiError::IoFailure(io) => CliError::Io(format!("nifti: {io}")),
            other => CliError::Data(format!("nifti: {other}")),
        }
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        CliError::Data(format!("volume: {e}"))
    }
}

impl From<PhantomError> for CliError {
    fn from(e: PhantomError) -> Self {
        match e {
            PhantomError::SpecInvalid(_) => CliError::Config(format!("phantom: {e}")),
            PhantomError::Volume(_) => CliError::Data(format!("phantom: {e}")),
        }
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        match e {
            PreprocessError::DegenerateWindow { .. }
            | PreprocessError::BadPatch { .. }
            | PreprocessError::PatchTooLarge { .. }
            | PreprocessError::ZeroStd
            | PreprocessError::MissingDatasetStats => CliError::Config(format!("preprocess: {e}")),
            other => CliError::Data(format!("preprocess: {other}")),
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::ConfigInvalid(_) => CliError::Config(format!("networks: {e}")),
            other => CliError::Data(format!("networks: {other}")),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Data(format!("losses: {e}"))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(format!("trainer: {e}")),
            // Non-finite network outputs surface as out-of-range
            // probabilities at the loss head; that is a numeric blow-up,
            // not bad input data.
            TrainError::Loss(LossError::ProbabilityOutOfRange { value, .. })
                if !value.is_finite() =>
            {
                CliError::Numeric(format!("trainer: {e}"))
            }
            TrainError::BadPlan(_) | TrainError::BadEpoch { .. } => {
                CliError::Config(format!("trainer: {e}"))
            }
            other => CliError::Data(format!("trainer: {other}")),
        }
    }
}

impl From<PretrainError> for CliError {
    fn from(e: PretrainError) -> Self {
        match e {
            PretrainError::Train(t) => CliError::from(t),
            PretrainError::BadTemperature(_) | PretrainError::BatchTooSmall(_) => {
                CliError::Config(format!("pretrain: {e}"))
            }
            other => CliError::Data(format!("pretrain: {other}")),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(io) => CliError::Io(format!("checkpoint: {io}")),
            other => CliError::Data(format!("checkpoint: {other}")),
        }
    }
}

impl From<CascadeError> for CliError {
    fn from(e: CascadeError) -> Self {
        match e {
            CascadeError::BadWeight(_) => CliError::Config(format!("cascade: {e}")),
            other => CliError::Data(format!("cascade: {other}")),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(format!("metrics: {e}"))
    }
}
