//! The stream driver: monitoring layer, speed layer, inference layer, in that order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gee::{init_gee, renew_gee_update, GeeState};
use crate::model::{ClusterBatch, ModelSpec};
use crate::monitor::{screen_batch, MonitorDecision};
use crate::renew::{init_state, wald, CoefficientReport, InferenceReport, RenewConfig, RenewState, UpdateOutcome};
use crate::stream::statefile::{load_state, save_state};

/// Observes batch lifetimes so memory use can be asserted.
pub trait DriverHooks {
    fn batch_loaded(&mut self, _clusters: usize) {}
    fn batch_released(&mut self, _clusters: usize) {}
}

pub struct NoHooks;

impl DriverHooks for NoHooks {}

/// Tracks live and peak cluster counts held by the driver.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct LiveClusters {
    pub live: usize,
    pub peak: usize,
}

impl DriverHooks for LiveClusters {
    fn batch_loaded(&mut self, clusters: usize) {
        self.live += clusters;
        self.peak = self.peak.max(self.live);
    }

    fn batch_released(&mut self, clusters: usize) {
        self.live -= clusters;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub renew: RenewConfig,
    /// Also run RenewGEE on accepted batches.
    pub track_gee: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { renew: RenewConfig::default(), track_gee: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub b: u64,
    pub batch_id: u64,
    pub clusters: usize,
    pub accepted: bool,
    pub decision: Option<MonitorDecision>,
    pub outcome: Option<UpdateOutcome>,
    pub report: InferenceReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gee: Option<Vec<CoefficientReport>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub state: RenewState,
    pub gee: Option<GeeState>,
}

fn gee_report(gee: &GeeState) -> Result<Vec<CoefficientReport>> {
    let v = gee.sandwich()?;
    Ok((0..gee.model.p).map(|k| wald(gee.beta[k], v[(k, k)].max(0.0).sqrt())).collect())
}

impl Session {
    /// Initializes from the first batch; the monitoring layer is idle here.
    pub fn start(model: &ModelSpec, config: &StreamConfig, first: ClusterBatch) -> Result<(Self, BatchReport)> {
        let gee = if config.track_gee { Some(init_gee(model, &first, &config.renew.newton)?.0) } else { None };
        let (batch_id, clusters) = (first.batch_id, first.len());
        let (state, outcome) = init_state(model, first, config.renew)?;
        let session = Session { state, gee };
        let report = session.report_line(batch_id, clusters, true, None, Some(outcome))?;
        Ok((session, report))
    }

    fn report_line(
        &self,
        batch_id: u64,
        clusters: usize,
        accepted: bool,
        decision: Option<MonitorDecision>,
        outcome: Option<UpdateOutcome>,
    ) -> Result<BatchReport> {
        Ok(BatchReport {
            b: self.state.b,
            batch_id,
            clusters,
            accepted,
            decision,
            outcome,
            report: self.state.report()?,
            gee: self.gee_report()?,
        })
    }

    /// Screens, then renews on acceptance. On error the session is unchanged.
    pub fn process(&mut self, batch: &ClusterBatch) -> Result<BatchReport> {
        let cfg = self.state.config;
        let decision = if cfg.monitor && !batch.is_empty() {
            Some(screen_batch(&self.state.model, &self.state.reference, batch, cfg.alpha, &self.state.agg.beta, &cfg.newton)?)
        } else {
            None
        };
        if decision.as_ref().is_some_and(|d| d.reject) {
            self.state.record_rejection();
            tracing::info!(batch = batch.batch_id, "batch rejected by the monitoring screen");
            return self.report_line(batch.batch_id, batch.len(), false, decision, None);
        }
        let gee = match &self.gee {
            Some(g) => Some(renew_gee_update(g, batch, &cfg.newton)?.0),
            None => None,
        };
        let outcome = self.state.update(batch)?;
        if gee.is_some() {
            self.gee = gee;
        }
        self.report_line(batch.batch_id, batch.len(), true, decision, Some(outcome))
    }

    /// Wald summaries of the RenewGEE estimate when it is tracked.
    pub fn gee_report(&self) -> Result<Option<Vec<CoefficientReport>>> {
        self.gee.as_ref().map(gee_report).transpose()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_state(&self.state, self.gee.as_ref(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let stored = load_state(path)?;
        Ok(Session { state: stored.renew, gee: stored.gee })
    }
}

/// Outcome of a driver run: the per-batch reports and, if the stream halted, why.
#[derive(Debug)]
pub struct StreamRun {
    pub session: Option<Session>,
    pub reports: Vec<BatchReport>,
    pub halted: Option<Error>,
}

/// Runs batches through the pipeline. Resumes from `state_path` when it exists,
/// otherwise initializes from the first batch; the state file is rewritten after
/// every batch so a halt leaves it at the last processed batch.
pub fn run_stream<I>(
    model: &ModelSpec,
    config: &StreamConfig,
    sources: I,
    state_path: Option<&Path>,
    hooks: &mut dyn DriverHooks,
) -> Result<StreamRun>
where
    I: IntoIterator<Item = Result<ClusterBatch>>,
{
    let mut session = match state_path {
        Some(p) if p.exists() => {
            let s = Session::load(p)?;
            if s.state.model != *model {
                return Err(Error::Invalid(format!("state file holds a {:?} model, requested {:?}", s.state.model, model)));
            }
            Some(s)
        }
        _ => None,
    };
    let mut reports = Vec::new();
    for source in sources {
        let batch = match source {
            Ok(b) => b,
            Err(e) => return Ok(StreamRun { session, reports, halted: Some(e) }),
        };
        let n = batch.len();
        hooks.batch_loaded(n);
        let step = match session.as_mut() {
            Some(s) => s.process(&batch),
            None => Session::start(model, config, batch).map(|(s, r)| {
                session = Some(s);
                r
            }),
        };
        hooks.batch_released(n);
        let report = match step {
            Ok(r) => r,
            Err(e) => return Ok(StreamRun { session, reports, halted: Some(e) }),
        };
        if let (Some(path), Some(s)) = (state_path, session.as_ref()) {
            s.save(path)?;
        }
        reports.push(report);
    }
    Ok(StreamRun { session, reports, halted: None })
}

/// Report lines as delimiter-separated text with a stable column order.
pub fn report_header(p: usize) -> String {
    let mut cols = vec!["b", "batch_id", "clusters", "accepted", "n_total", "batches_rejected", "lambda", "df", "monitor_p", "iterations", "converged"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    for k in 1..=p {
        for f in ["estimate", "se", "z", "p", "neg_log10_p"] {
            cols.push(format!("{f}_{k}"));
        }
    }
    cols.join(",")
}

pub fn report_row(r: &BatchReport) -> String {
    let opt = |v: Option<String>| v.unwrap_or_default();
    let mut cols = vec![
        r.b.to_string(),
        r.batch_id.to_string(),
        r.clusters.to_string(),
        u8::from(r.accepted).to_string(),
        r.report.n_total.to_string(),
        r.report.batches_rejected.to_string(),
        opt(r.decision.as_ref().map(|d| format!("{:e}", d.lambda))),
        opt(r.decision.as_ref().map(|d| d.df.to_string())),
        opt(r.decision.as_ref().map(|d| format!("{:e}", d.p_value))),
        opt(r.outcome.as_ref().map(|o| o.iterations.to_string())),
        opt(r.outcome.as_ref().map(|o| u8::from(o.converged).to_string())),
    ];
    for c in &r.report.coefficients {
        cols.extend([c.estimate, c.std_error, c.z, c.p_value, c.neg_log10_p].iter().map(|v| format!("{v:e}")));
    }
    cols.join(",")
}
