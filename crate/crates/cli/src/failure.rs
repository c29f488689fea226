//! Errors mapped onto exit codes.

use std::fmt;

use sisa_core::data::DataError;
use sisa_core::engine::EngineError;
use sisa_core::learner::LearnerError;
use sisa_core::metrics::MetricsError;
use sisa_core::partition::PartitionError;
use sisa_core::requests::RequestError;
use sisa_core::store::StoreError;

#[derive(Debug)]
pub enum Failure {
    /// Bad flags or configuration: exit 1.
    Usage(String),
    /// Unreadable or inconsistent input data: exit 2.
    Data(String),
    /// Missing or inconsistent run-directory state: exit 3.
    State(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::State(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::State(m) => f.write_str(m),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<RequestError> for Failure {
    fn from(e: RequestError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<PartitionError> for Failure {
    fn from(e: PartitionError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        Failure::State(e.to_string())
    }
}

impl From<LearnerError> for Failure {
    fn from(e: LearnerError) -> Self {
        match e {
            LearnerError::Dims(_) | LearnerError::AdapterTooLarge { .. } | LearnerError::Config(_) => {
                Failure::Usage(e.to_string())
            }
            LearnerError::PayloadLength { .. } => Failure::State(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Learner(l) => l.into(),
            EngineError::Partition(p) => p.into(),
            EngineError::Store(s) => s.into(),
            EngineError::NoRequests | EngineError::UnknownId(_) => Failure::Data(e.to_string()),
            EngineError::Config(_) => Failure::Usage(e.to_string()),
            EngineError::StaleCheckpoint { .. } | EngineError::ModeMismatch { .. } => Failure::State(e.to_string()),
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Engine(x) => x.into(),
            MetricsError::Learner(x) => x.into(),
            MetricsError::Partition(x) => x.into(),
            MetricsError::Requests(x) => x.into(),
            MetricsError::Store(x) => x.into(),
            MetricsError::Grid(_) => Failure::Usage(e.to_string()),
            MetricsError::EmptyTest => Failure::Data(e.to_string()),
            MetricsError::Io(_) | MetricsError::Csv(_) => Failure::State(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::State(format!("io error: {e}"))
    }
}
