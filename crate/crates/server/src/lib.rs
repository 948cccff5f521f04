//! HTTP/JSON service over the estimation engine.
//!
//! Stateless endpoints take and return state files as base64 blobs; the
//! `/v1/sessions` family keeps sessions in memory for long-running clients.

pub mod api;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nalgebra::DVector;
use tokio::net::TcpListener;

use renewqif_core::bench::{run_benchmark, BenchReport};
use renewqif_core::gee::fit_offline_gee;
use renewqif_core::glm::fit_irls;
use renewqif_core::monitor::screen_batch;
use renewqif_core::qif::{fit_offline_qif, NewtonConfig};
use renewqif_core::renew::{init_state, wald, RenewConfig};
use renewqif_core::simulate::make_stream;
use renewqif_core::stream::statefile::{decode_state, encode_state};
use renewqif_core::stream::{read_batch, write_batch, Session};
use renewqif_core::{ClusterBatch, Error, ModelSpec};

use api::*;

/// Error response: status plus `{kind, message}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, kind: WireErrorKind, message: impl Into<String>) -> Self {
        ApiError { status, body: ErrorBody { kind, message: message.into() } }
    }

    fn not_found(id: u64) -> Self {
        Self::new(StatusCode::NOT_FOUND, WireErrorKind::NotFound, format!("no session {id}"))
    }
}

pub fn error_body(e: &Error) -> ErrorBody {
    ErrorBody { kind: e.kind().into(), message: e.to_string() }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let body = error_body(&e);
        let status = match body.kind {
            WireErrorKind::Parse | WireErrorKind::StateVersion | WireErrorKind::StateCorrupt => StatusCode::BAD_REQUEST,
            WireErrorKind::Invalid | WireErrorKind::Numerical => StatusCode::UNPROCESSABLE_ENTITY,
            WireErrorKind::NotFound => StatusCode::NOT_FOUND,
            WireErrorKind::Io | WireErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError { status, body }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Default)]
pub struct AppState {
    sessions: Mutex<HashMap<u64, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

type Shared = Arc<AppState>;

/// Runs CPU-bound work off the async workers.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, WireErrorKind::Internal, e.to_string()))?
}

fn parse_batch(payload: &BatchPayload, default_id: u64, p: usize) -> Result<ClusterBatch, Error> {
    read_batch(payload.csv.as_bytes(), payload.batch_id.unwrap_or(default_id), Some(p))
}

fn batch_csv(batch: &ClusterBatch) -> String {
    let mut buf = Vec::new();
    write_batch(&mut buf, batch).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is utf-8")
}

fn decode_blob(blob: &StateBlob) -> Result<Session, ApiError> {
    let bytes = blob
        .decode()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, WireErrorKind::StateCorrupt, format!("state is not base64: {e}")))?;
    let stored = decode_state(&bytes)?;
    Ok(Session { state: stored.renew, gee: stored.gee })
}

fn encode_blob(session: &Session) -> StateBlob {
    StateBlob::encode(&encode_state(&session.state, session.gee.as_ref()))
}

fn report_of(session: &Session) -> Result<ReportResponse, Error> {
    Ok(ReportResponse {
        model: session.state.model,
        config: renewqif_core::stream::StreamConfig { renew: session.state.config, track_gee: session.gee.is_some() },
        report: session.state.report()?,
        gee: session.gee_report()?,
    })
}

async fn health() -> Json<Health> {
    Json(Health { status: "ok".into(), version: env!("CARGO_PKG_VERSION").into() })
}

async fn simulate(Json(req): Json<SimulateRequest>) -> ApiResult<SimulateResponse> {
    blocking(move || {
        let stream = make_stream(&req.config)?;
        let batches = stream.iter().map(|b| BatchPayload { batch_id: Some(b.batch_id), csv: batch_csv(b) }).collect();
        Ok(Json(SimulateResponse { batches }))
    })
    .await
}

fn fit(req: FitRequest) -> Result<FitResponse, Error> {
    let model = req.model;
    let data = parse_batch(&req.batch, 1, model.p)?;
    let newton = req.newton.unwrap_or_default();
    match req.method {
        FitMethod::Qif => {
            let start = fit_irls(&model, &data, 1e-8, 100)?;
            let f = fit_offline_qif(&model, &data, &start.beta, &newton)?;
            let cov = f.covariance()?;
            Ok(FitResponse {
                method: FitMethod::Qif,
                clusters: data.len(),
                coefficients: (0..model.p).map(|k| wald(f.beta_hat[k], cov[(k, k)].max(0.0).sqrt())).collect(),
                iterations: f.iterations,
                converged: f.converged,
                q: Some(f.q),
                nuisance: None,
            })
        }
        FitMethod::Gee => {
            let f = fit_offline_gee(&model, &data, &newton)?;
            Ok(FitResponse {
                method: FitMethod::Gee,
                clusters: data.len(),
                coefficients: (0..model.p).map(|k| wald(f.beta_hat[k], f.sandwich[(k, k)].max(0.0).sqrt())).collect(),
                iterations: f.iterations,
                converged: f.converged,
                q: None,
                nuisance: Some(f.nuisance),
            })
        }
    }
}

async fn fit_handler(Json(req): Json<FitRequest>) -> ApiResult<FitResponse> {
    blocking(move || Ok(Json(fit(req)?))).await
}

fn screen(req: ScreenRequest) -> Result<ScreenResponse, Error> {
    let model: ModelSpec = req.model;
    let reference = parse_batch(&req.reference, 1, model.p)?;
    let candidate = parse_batch(&req.candidate, 2, model.p)?;
    let newton = NewtonConfig::default();
    let beta = match req.beta_init {
        Some(b) if b.len() == model.p => DVector::from_vec(b),
        Some(b) => return Err(Error::Dimension(format!("beta_init has {} entries, model has p = {}", b.len(), model.p))),
        None => init_state(&model, reference.clone(), RenewConfig::default())?.0.agg.beta,
    };
    screen_batch(&model, &reference, &candidate, req.alpha, &beta, &newton)
}

async fn screen_handler(Json(req): Json<ScreenRequest>) -> ApiResult<ScreenResponse> {
    blocking(move || Ok(Json(screen(req)?))).await
}

async fn stream_init(Json(req): Json<StreamInitRequest>) -> ApiResult<StreamResponse> {
    blocking(move || {
        let batch = parse_batch(&req.batch, 1, req.model.p)?;
        let (session, report) = Session::start(&req.model, &req.config, batch)?;
        Ok(Json(StreamResponse { state: encode_blob(&session), reports: vec![report], halted: None }))
    })
    .await
}

async fn stream_update(Json(req): Json<StreamUpdateRequest>) -> ApiResult<StreamResponse> {
    blocking(move || {
        let mut session = decode_blob(&req.state)?;
        let mut reports = Vec::new();
        let mut halted = None;
        for payload in &req.batches {
            let step = parse_batch(payload, session.state.b + 1, session.state.model.p).and_then(|b| session.process(&b));
            match step {
                Ok(r) => reports.push(r),
                Err(e) => {
                    halted = Some(error_body(&e));
                    break;
                }
            }
        }
        Ok(Json(StreamResponse { state: encode_blob(&session), reports, halted }))
    })
    .await
}

async fn stream_report(Json(blob): Json<StateBlob>) -> ApiResult<ReportResponse> {
    blocking(move || Ok(Json(report_of(&decode_blob(&blob)?)?))).await
}

fn session(app: &AppState, id: u64) -> Result<Arc<Mutex<Session>>, ApiError> {
    app.sessions.lock().expect("session table").get(&id).cloned().ok_or_else(|| ApiError::not_found(id))
}

async fn create_session(State(app): State<Shared>, Json(req): Json<CreateSessionRequest>) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let (session, report) = blocking(move || {
        let batch = parse_batch(&req.batch, 1, req.model.p)?;
        Ok(Session::start(&req.model, &req.config, batch)?)
    })
    .await?;
    let id = app.next_id.fetch_add(1, Ordering::Relaxed) + 1;
    app.sessions.lock().expect("session table").insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(SessionCreated { id, report })))
}

async fn list_sessions(State(app): State<Shared>) -> Json<SessionList> {
    let mut ids: Vec<u64> = app.sessions.lock().expect("session table").keys().copied().collect();
    ids.sort_unstable();
    Json(SessionList { ids })
}

async fn add_batch(
    State(app): State<Shared>,
    Path(id): Path<u64>,
    Json(payload): Json<BatchPayload>,
) -> ApiResult<renewqif_core::stream::BatchReport> {
    let s = session(&app, id)?;
    blocking(move || {
        let mut s = s.lock().expect("session");
        let batch = parse_batch(&payload, s.state.b + 1, s.state.model.p)?;
        Ok(Json(s.process(&batch)?))
    })
    .await
}

async fn session_report(State(app): State<Shared>, Path(id): Path<u64>) -> ApiResult<ReportResponse> {
    let s = session(&app, id)?;
    blocking(move || Ok(Json(report_of(&s.lock().expect("session"))?))).await
}

async fn session_state(State(app): State<Shared>, Path(id): Path<u64>) -> ApiResult<StateBlob> {
    let s = session(&app, id)?;
    let blob = encode_blob(&s.lock().expect("session"));
    Ok(Json(blob))
}

async fn delete_session(State(app): State<Shared>, Path(id): Path<u64>) -> Result<StatusCode, ApiError> {
    match app.sessions.lock().expect("session table").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(id)),
    }
}

async fn bench(Json(req): Json<BenchRequest>) -> ApiResult<BenchReport> {
    blocking(move || Ok(Json(run_benchmark(req.table, req.reps, req.scale, req.seed, req.trace_dir.as_deref())?))).await
}

pub fn router() -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/simulate", post(simulate))
        .route("/v1/fit", post(fit_handler))
        .route("/v1/screen", post(screen_handler))
        .route("/v1/stream/init", post(stream_init))
        .route("/v1/stream/update", post(stream_update))
        .route("/v1/stream/report", post(stream_report))
        .route("/v1/sessions", get(list_sessions).post(create_session))
        .route("/v1/sessions/{id}", axum::routing::delete(delete_session))
        .route("/v1/sessions/{id}/batches", post(add_batch))
        .route("/v1/sessions/{id}/report", get(session_report))
        .route("/v1/sessions/{id}/state", get(session_state))
        .route("/v1/bench", post(bench))
        .layer(DefaultBodyLimit::max(512 * 1024 * 1024))
        .with_state(Arc::new(AppState::default()))
}

pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router()).await
}

/// Binds `addr` and serves in a background task; returns the bound address.
pub async fn spawn(addr: SocketAddr) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((local, tokio::spawn(serve(listener))))
}
