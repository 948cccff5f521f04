//! Request and response bodies shared by the service and its client.

use base64::Engine;
use serde::{Deserialize, Serialize};

use renewqif_core::bench::{Scale, Table};
use renewqif_core::gee::GeeNuisance;
use renewqif_core::monitor::MonitorDecision;
use renewqif_core::qif::NewtonConfig;
use renewqif_core::renew::{CoefficientReport, InferenceReport};
use renewqif_core::simulate::SimConfig;
use renewqif_core::stream::{BatchReport, StreamConfig};
use renewqif_core::{ErrorKind, ModelSpec};

/// Error body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: WireErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WireErrorKind {
    Parse,
    Invalid,
    Numerical,
    StateVersion,
    StateCorrupt,
    Io,
    NotFound,
    Internal,
}

impl From<ErrorKind> for WireErrorKind {
    fn from(k: ErrorKind) -> Self {
        match k {
            ErrorKind::Parse => WireErrorKind::Parse,
            ErrorKind::Invalid => WireErrorKind::Invalid,
            ErrorKind::Numerical => WireErrorKind::Numerical,
            ErrorKind::StateVersion => WireErrorKind::StateVersion,
            ErrorKind::StateCorrupt => WireErrorKind::StateCorrupt,
            ErrorKind::Io => WireErrorKind::Io,
        }
    }
}

/// One batch in the batch-file format. Without `batch_id` the service numbers
/// batches after the state's batch counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_id: Option<u64>,
    pub csv: String,
}

/// A state file, base64 encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBlob {
    pub state: String,
}

impl StateBlob {
    pub fn encode(bytes: &[u8]) -> Self {
        StateBlob { state: base64::engine::general_purpose::STANDARD.encode(bytes) }
    }

    pub fn decode(&self) -> Result<Vec<u8>, base64::DecodeError> {
        base64::engine::general_purpose::STANDARD.decode(&self.state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateRequest {
    pub config: SimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateResponse {
    pub batches: Vec<BatchPayload>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    Gee,
    Qif,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRequest {
    pub method: FitMethod,
    pub model: ModelSpec,
    pub batch: BatchPayload,
    #[serde(default)]
    pub newton: Option<NewtonConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResponse {
    pub method: FitMethod,
    pub clusters: usize,
    pub coefficients: Vec<CoefficientReport>,
    pub iterations: u32,
    pub converged: bool,
    /// QIF objective at the estimate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nuisance: Option<GeeNuisance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenRequest {
    pub model: ModelSpec,
    pub reference: BatchPayload,
    pub candidate: BatchPayload,
    pub alpha: f64,
    /// Starting value; the offline QIF fit of the reference when absent.
    #[serde(default)]
    pub beta_init: Option<Vec<f64>>,
}

pub type ScreenResponse = MonitorDecision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamInitRequest {
    pub model: ModelSpec,
    pub config: StreamConfig,
    pub batch: BatchPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamUpdateRequest {
    pub state: StateBlob,
    pub batches: Vec<BatchPayload>,
}

/// State after the last processed batch. `halted` is set when a batch failed;
/// batches after it were not attempted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamResponse {
    pub state: StateBlob,
    pub reports: Vec<BatchReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halted: Option<ErrorBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportResponse {
    pub model: ModelSpec,
    pub config: StreamConfig,
    pub report: InferenceReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gee: Option<Vec<CoefficientReport>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub model: ModelSpec,
    pub config: StreamConfig,
    pub batch: BatchPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: u64,
    pub report: BatchReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionList {
    pub ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRequest {
    pub table: Table,
    pub reps: usize,
    pub scale: Scale,
    pub seed: u64,
    /// Directory on the service host for `-log10 p` trace files.
    #[serde(default)]
    pub trace_dir: Option<std::path::PathBuf>,
}
