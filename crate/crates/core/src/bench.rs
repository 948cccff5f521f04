//! Monte-Carlo harness reproducing the simulation tables: offline GEE, RenewGEE,
//! offline QIF and RenewQIF on simulated streams.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gee::{fit_offline_gee, init_gee, renew_gee_update};
use crate::glm::fit_irls;
use crate::model::{ClusterBatch, CorrStructure, Family, ModelSpec};
use crate::numerics::is_symmetric_psd;
use crate::qif::{fit_offline_qif, NewtonConfig};
use crate::renew::{RenewConfig, UpdateOutcome};
use crate::simulate::{gen_batch, SimConfig};
use crate::stream::{Session, StreamConfig};

/// Two-sided 95% normal quantile.
const Z975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    OfflineGee,
    RenewGee,
    OfflineQif,
    RenewQif,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::OfflineGee, Method::RenewGee, Method::OfflineQif, Method::RenewQif];

    pub fn name(self) -> &'static str {
        match self {
            Method::OfflineGee => "offline-gee",
            Method::RenewGee => "renew-gee",
            Method::OfflineQif => "offline-qif",
            Method::RenewQif => "renew-qif",
        }
    }
}

/// One estimator run on one simulated stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    /// Data generation ("loading") time.
    pub load: Duration,
    /// Estimation time.
    pub compute: Duration,
    pub used_clusters: u64,
    pub total_clusters: u64,
    /// Per-batch update iteration counts (renewable methods).
    pub iterations: Vec<u32>,
    pub all_converged: bool,
    /// Per-batch `-log10 p` of every coefficient (RenewQIF only).
    pub trace: Vec<Vec<f64>>,
    /// Every accepted RenewQIF state had a symmetric PSD variance.
    #[serde(default)]
    pub variance_psd: bool,
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn se_from(cov: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    (0..cov.nrows()).map(|k| cov[(k, k)].max(0.0).sqrt()).collect()
}

/// Runs `method` on the stream described by `sim`. `monitor` enables screening
/// at the given level (RenewQIF only).
pub fn run_replication(sim: &SimConfig, corr: CorrStructure, method: Method, monitor: Option<f64>) -> Result<Replication> {
    let model = ModelSpec::new(sim.family, sim.p(), corr)?;
    let newton = NewtonConfig::default();
    let total_clusters = sim.batches * sim.n_b as u64;
    match method {
        Method::OfflineQif | Method::OfflineGee => {
            let (data, load) = timed(|| -> Result<ClusterBatch> {
                let parts = (1..=sim.batches).map(|b| gen_batch(sim, b)).collect::<Result<Vec<_>>>()?;
                Ok(ClusterBatch::concat(0, model.p, &parts))
            });
            let data = data?;
            let (fit, compute) = timed(|| -> Result<(DVector<f64>, Vec<f64>, bool)> {
                if method == Method::OfflineQif {
                    let start = fit_irls(&model, &data, 1e-8, 100)?;
                    let fit = fit_offline_qif(&model, &data, &start.beta, &newton)?;
                    Ok((fit.beta_hat.clone(), se_from(&fit.covariance()?), fit.converged))
                } else {
                    let fit = fit_offline_gee(&model, &data, &newton)?;
                    Ok((fit.beta_hat, se_from(&fit.sandwich), fit.converged))
                }
            });
            let (beta, se, converged) = fit?;
            Ok(Replication {
                beta: beta.iter().copied().collect(),
                se,
                load,
                compute,
                used_clusters: total_clusters,
                total_clusters,
                iterations: Vec::new(),
                all_converged: converged,
                trace: Vec::new(),
                variance_psd: true,
            })
        }
        Method::RenewQif => {
            let cfg = StreamConfig {
                renew: RenewConfig { newton, monitor: monitor.is_some(), alpha: monitor.unwrap_or(0.05) },
                track_gee: false,
            };
            let (mut load, mut compute) = (Duration::ZERO, Duration::ZERO);
            let mut session: Option<Session> = None;
            let mut iterations = Vec::new();
            let mut trace = Vec::new();
            let mut all_converged = true;
            let mut variance_psd = true;
            for b in 1..=sim.batches {
                let (batch, t) = timed(|| gen_batch(sim, b));
                load += t;
                let batch = batch?;
                let (report, t) = timed(|| -> Result<_> {
                    match session.as_mut() {
                        Some(s) => s.process(&batch),
                        None => {
                            let (s, r) = Session::start(&model, &cfg, batch)?;
                            session = Some(s);
                            Ok(r)
                        }
                    }
                });
                compute += t;
                let report = report?;
                if let Some(UpdateOutcome { iterations: it, converged, .. }) = report.outcome {
                    if b > 1 {
                        iterations.push(it);
                    }
                    all_converged &= converged;
                }
                if report.accepted {
                    if let Some(s) = &session {
                        variance_psd &= is_symmetric_psd(&s.state.variance()?, 1e-10);
                    }
                }
                trace.push(report.report.coefficients.iter().map(|c| c.neg_log10_p).collect());
            }
            let s = session.ok_or_else(|| Error::Invalid("empty stream".into()))?;
            let report = s.state.report()?;
            Ok(Replication {
                beta: report.coefficients.iter().map(|c| c.estimate).collect(),
                se: report.coefficients.iter().map(|c| c.std_error).collect(),
                load,
                compute,
                used_clusters: report.n_total,
                total_clusters,
                iterations,
                all_converged,
                trace,
                variance_psd,
            })
        }
        Method::RenewGee => {
            let (mut load, mut compute) = (Duration::ZERO, Duration::ZERO);
            let (first, t) = timed(|| gen_batch(sim, 1));
            load += t;
            let first = first?;
            let (init, t) = timed(|| init_gee(&model, &first, &newton));
            compute += t;
            let (mut state, fit) = init?;
            let mut iterations = Vec::new();
            let mut all_converged = fit.converged;
            for b in 2..=sim.batches {
                let (batch, t) = timed(|| gen_batch(sim, b));
                load += t;
                let batch = batch?;
                let (next, t) = timed(|| renew_gee_update(&state, &batch, &newton));
                compute += t;
                let (next, outcome) = next?;
                state = next;
                iterations.push(outcome.iterations);
                all_converged &= outcome.converged;
            }
            let (sw, t) = timed(|| state.sandwich());
            compute += t;
            Ok(Replication {
                beta: state.beta.iter().copied().collect(),
                se: se_from(&sw?),
                load,
                compute,
                used_clusters: state.n_total,
                total_clusters,
                iterations,
                all_converged,
                trace: Vec::new(),
                variance_psd: true,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub a_bias: f64,
    pub ase: f64,
    pub ese: f64,
    pub cp: f64,
    pub used_fraction: f64,
    pub load_s: f64,
    pub compute_s: f64,
    pub reps: usize,
}

/// A.bias: mean |beta - beta0|; ASE: mean SE; ESE: mean over coefficients of the
/// across-replication SD; CP: share of 95% Wald intervals covering beta0. Times are
/// per-replication means.
pub fn summarize(beta0: &[f64], reps: &[Replication]) -> Metrics {
    let r = reps.len() as f64;
    let p = beta0.len();
    let cells = r * p as f64;
    let mut a_bias = 0.0;
    let mut ase = 0.0;
    let mut covered = 0.0;
    for rep in reps {
        for k in 0..p {
            let err = (rep.beta[k] - beta0[k]).abs();
            a_bias += err;
            ase += rep.se[k];
            if err <= Z975 * rep.se[k] {
                covered += 1.0;
            }
        }
    }
    let ese = (0..p)
        .map(|k| {
            let mean = reps.iter().map(|x| x.beta[k]).sum::<f64>() / r;
            (reps.iter().map(|x| (x.beta[k] - mean).powi(2)).sum::<f64>() / (r - 1.0).max(1.0)).sqrt()
        })
        .sum::<f64>()
        / p as f64;
    let used: u64 = reps.iter().map(|x| x.used_clusters).sum();
    let total: u64 = reps.iter().map(|x| x.total_clusters).sum();
    Metrics {
        a_bias: a_bias / cells,
        ase: ase / cells,
        ese,
        cp: covered / cells,
        used_fraction: used as f64 / total.max(1) as f64,
        load_s: reps.iter().map(|x| x.load.as_secs_f64()).sum::<f64>() / r,
        compute_s: reps.iter().map(|x| x.compute.as_secs_f64()).sum::<f64>() / r,
        reps: reps.len(),
    }
}

/// Runs `reps` replications in parallel; replication `i` uses seed `base.seed + i`.
pub fn replicate(base: &SimConfig, corr: CorrStructure, method: Method, monitor: Option<f64>, reps: usize) -> Result<Vec<Replication>> {
    (0..reps as u64)
        .into_par_iter()
        .map(|i| run_replication(&SimConfig { seed: base.seed.wrapping_add(i), ..base.clone() }, corr, method, monitor))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Table {
    LinearFixedN,
    LinearGrowingB,
    LogisticGrowingB,
    MonitoringGrid,
}

impl std::str::FromStr for Table {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-fixed-N" | "linear-fixed-n" => Ok(Table::LinearFixedN),
            "linear-growing-B" | "linear-growing-b" => Ok(Table::LinearGrowingB),
            "logistic-growing-B" | "logistic-growing-b" => Ok(Table::LogisticGrowingB),
            "monitoring-grid" => Ok(Table::MonitoringGrid),
            other => Err(Error::Invalid(format!("unknown benchmark table '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Smoke,
    Desk,
    Full,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Scale::Smoke),
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => Err(Error::Invalid(format!("unknown scale '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub family: Family,
    pub n_b: usize,
    pub batches: u64,
    pub n_total: u64,
    pub method: Method,
    /// Monitoring significance level; `None` means no monitoring.
    pub alpha: Option<f64>,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub table: Table,
    pub scale: Scale,
    pub reps: usize,
    pub seed: u64,
    pub rows: Vec<BenchRow>,
}

struct Scenario {
    family: Family,
    n_b: usize,
    batches: u64,
    contamination: bool,
}

fn scenarios(table: Table, scale: Scale) -> Vec<Scenario> {
    let s = |family, n_b, batches, contamination| Scenario { family, n_b, batches, contamination };
    match table {
        Table::LinearFixedN => {
            let (n, bs): (u64, &[u64]) = match scale {
                Scale::Smoke => (1_000, &[2, 5, 10]),
                Scale::Desk => (10_000, &[10, 50, 200]),
                Scale::Full => (100_000, &[100, 500, 2_000]),
            };
            bs.iter().map(|&b| s(Family::GaussianIdentity, (n / b) as usize, b, false)).collect()
        }
        Table::LinearGrowingB | Table::LogisticGrowingB => {
            let family = if table == Table::LinearGrowingB { Family::GaussianIdentity } else { Family::BinomialLogit };
            let bs: &[u64] = match scale {
                Scale::Smoke => &[10],
                Scale::Desk => &[10, 100, 1_000],
                Scale::Full => &[10, 100, 1_000, 10_000],
            };
            bs.iter().map(|&b| s(family, 100, b, false)).collect()
        }
        Table::MonitoringGrid => {
            let n: u64 = if scale == Scale::Smoke { 2_000 } else { 10_000 };
            [50usize, 100, 200, 400].iter().map(|&nb| s(Family::BinomialLogit, nb, n / nb as u64, true)).collect()
        }
    }
}

/// Departure used for the contaminated batches of the monitoring grid.
pub const GRID_DEPARTURE: f64 = 1.0;
/// Significance levels of the monitoring grid; `None` disables monitoring.
pub const GRID_ALPHAS: [Option<f64>; 6] = [None, Some(0.1), Some(0.05), Some(0.01), Some(0.001), Some(5e-6)];

pub fn contaminated(sim: SimConfig) -> SimConfig {
    let b = sim.batches;
    let positions = vec![(b / 4).max(2), (3 * b / 4).max(2)];
    sim.with_contamination(positions, GRID_DEPARTURE)
}

/// Runs one table. Per-batch `-log10 p` traces of the first RenewQIF replication of
/// every row are written to `trace_dir` when given.
pub fn run_benchmark(table: Table, reps: usize, scale: Scale, seed: u64, trace_dir: Option<&Path>) -> Result<BenchReport> {
    if reps == 0 {
        return Err(Error::Invalid("reps must be at least 1".into()));
    }
    let corr = CorrStructure::CompoundSymmetry;
    let mut rows = Vec::new();
    for sc in scenarios(table, scale) {
        let mut sim = SimConfig::standard(sc.family, sc.n_b, sc.batches, seed);
        if sc.contamination {
            sim = contaminated(sim);
        }
        let runs: Vec<(Method, Option<f64>)> = if table == Table::MonitoringGrid {
            GRID_ALPHAS.iter().map(|&a| (Method::RenewQif, a)).collect()
        } else {
            Method::ALL.iter().map(|&m| (m, None)).collect()
        };
        for (method, alpha) in runs {
            let results = replicate(&sim, corr, method, alpha, reps)?;
            if let (Some(dir), Method::RenewQif) = (trace_dir, method) {
                write_trace(dir, table, &sim, alpha, &results[0])?;
            }
            rows.push(BenchRow {
                family: sc.family,
                n_b: sc.n_b,
                batches: sc.batches,
                n_total: sc.batches * sc.n_b as u64,
                method,
                alpha,
                metrics: summarize(&sim.beta0, &results),
            });
        }
    }
    Ok(BenchReport { table, scale, reps, seed, rows })
}

fn write_trace(dir: &Path, table: Table, sim: &SimConfig, alpha: Option<f64>, rep: &Replication) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tag = serde_json::to_value(table).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    let alpha = alpha.map_or("none".to_string(), |a| format!("{a:e}"));
    let path = dir.join(format!("trace_{tag}_nb{}_B{}_alpha{alpha}.csv", sim.n_b, sim.batches));
    let mut text = String::from("batch");
    for k in 1..=sim.p() {
        let _ = write!(text, ",neg_log10_p_{k}");
    }
    text.push('\n');
    for (b, row) in rep.trace.iter().enumerate() {
        let _ = write!(text, "{}", b + 1);
        for v in row {
            let _ = write!(text, ",{v:.6}");
        }
        text.push('\n');
    }
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

impl BenchReport {
    /// Aligned plain-text rendering; bias and standard-error columns are scaled by 1e3.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "table={:?} scale={:?} reps={} seed={}", self.table, self.scale, self.reps, self.seed);
        let _ = writeln!(
            out,
            "{:<18} {:>6} {:>6} {:>8} {:>12} {:>9} {:>12} {:>9} {:>9} {:>7} {:>8} {:>9} {:>9}",
            "family", "n_b", "B", "N", "method", "alpha", "A.bias(e-3)", "ASE(e-3)", "ESE(e-3)", "CP", "N0/NB", "load(s)", "comp(s)"
        );
        for r in &self.rows {
            let m = &r.metrics;
            let alpha = r.alpha.map_or("-".to_string(), |a| format!("{a}"));
            let _ = writeln!(
                out,
                "{:<18} {:>6} {:>6} {:>8} {:>12} {:>9} {:>12.3} {:>9.3} {:>9.3} {:>7.3} {:>8.3} {:>9.4} {:>9.4}",
                r.family.name(),
                r.n_b,
                r.batches,
                r.n_total,
                r.method.name(),
                alpha,
                m.a_bias * 1e3,
                m.ase * 1e3,
                m.ese * 1e3,
                m.cp,
                m.used_fraction,
                m.load_s,
                m.compute_s
            );
        }
        out
    }
}
