//! Blocking client for the renewqif HTTP service.

use reqwest::blocking::{Client as Http, RequestBuilder};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub use renewqif_server::api;
use renewqif_server::api::*;

use renewqif_core::bench::BenchReport;
use renewqif_core::stream::BatchReport;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("{}: {}", .status, .body.message)]
    Api { status: u16, body: ErrorBody },
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
}

impl ClientError {
    /// Kind reported by the service; `None` for transport failures.
    pub fn kind(&self) -> Option<WireErrorKind> {
        match self {
            ClientError::Api { body, .. } => Some(body.kind),
            ClientError::Transport(_) => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: Http,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:7878`.
    pub fn new(base: impl Into<String>) -> Result<Self> {
        let http = Http::builder().timeout(None).build()?;
        Ok(Client { base: base.into().trim_end_matches('/').to_string(), http })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn send<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T> {
        let resp = req.send()?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json()?);
        }
        let text = resp.text()?;
        let body = serde_json::from_str(&text)
            .unwrap_or(ErrorBody { kind: WireErrorKind::Internal, message: format!("unexpected response: {text}") });
        Err(ClientError::Api { status: status.as_u16(), body })
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        self.send(self.http.post(format!("{}{path}", self.base)).json(body))
    }

    fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        self.send(self.http.get(format!("{}{path}", self.base)))
    }

    pub fn health(&self) -> Result<Health> {
        self.get("/health")
    }

    pub fn simulate(&self, req: &SimulateRequest) -> Result<SimulateResponse> {
        self.post("/v1/simulate", req)
    }

    pub fn fit(&self, req: &FitRequest) -> Result<FitResponse> {
        self.post("/v1/fit", req)
    }

    pub fn screen(&self, req: &ScreenRequest) -> Result<ScreenResponse> {
        self.post("/v1/screen", req)
    }

    pub fn stream_init(&self, req: &StreamInitRequest) -> Result<StreamResponse> {
        self.post("/v1/stream/init", req)
    }

    pub fn stream_update(&self, req: &StreamUpdateRequest) -> Result<StreamResponse> {
        self.post("/v1/stream/update", req)
    }

    pub fn stream_report(&self, state: &StateBlob) -> Result<ReportResponse> {
        self.post("/v1/stream/report", state)
    }

    pub fn create_session(&self, req: &CreateSessionRequest) -> Result<SessionCreated> {
        self.post("/v1/sessions", req)
    }

    pub fn list_sessions(&self) -> Result<SessionList> {
        self.get("/v1/sessions")
    }

    pub fn add_batch(&self, id: u64, batch: &BatchPayload) -> Result<BatchReport> {
        self.post(&format!("/v1/sessions/{id}/batches"), batch)
    }

    pub fn session_report(&self, id: u64) -> Result<ReportResponse> {
        self.get(&format!("/v1/sessions/{id}/report"))
    }

    pub fn session_state(&self, id: u64) -> Result<StateBlob> {
        self.get(&format!("/v1/sessions/{id}/state"))
    }

    pub fn delete_session(&self, id: u64) -> Result<()> {
        let resp = self.http.delete(format!("{}/v1/sessions/{id}", self.base)).send()?;
        if resp.status().is_success() {
            return Ok(());
        }
        let status = resp.status().as_u16();
        let body = resp.json().unwrap_or(ErrorBody { kind: WireErrorKind::Internal, message: format!("status {status}") });
        Err(ClientError::Api { status, body })
    }

    pub fn bench(&self, req: &BenchRequest) -> Result<BenchReport> {
        self.post("/v1/bench", req)
    }
}
