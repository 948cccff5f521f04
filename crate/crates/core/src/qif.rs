//! Extended-score summaries and the offline QIF (GMM) solver.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::corrbasis::{basis_set, BasisSet};
use crate::error::{Error, Result};
use crate::model::{fill_moments, Cluster, ClusterBatch, ModelSpec};
use crate::numerics::pseudo_inverse;

/// Warning emitted when a Newton loop stops on the iteration cap.
pub const MAXIT_WARNING: &str = "algorithm reached 'maxit' but did not reach the convergence criteria";

/// Stopping rule shared by every Newton loop: decrement below `tol` or `maxit` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonConfig {
    pub tol: f64,
    pub maxit: u32,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self { tol: 1e-6, maxit: 50 }
    }
}

/// One batch's extended score `g` (pS), negative gradient `G` (pS x p),
/// sample variance `C` (pS x pS) and cluster count.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSummary {
    pub g: DVector<f64>,
    pub sensitivity: DMatrix<f64>,
    pub variability: DMatrix<f64>,
    pub n: usize,
    pub beta_at: DVector<f64>,
}

impl BatchSummary {
    pub fn zeros(model: &ModelSpec, beta: &DVector<f64>) -> Self {
        let ps = model.score_dim();
        Self {
            g: DVector::zeros(ps),
            sensitivity: DMatrix::zeros(ps, model.p),
            variability: DMatrix::zeros(ps, ps),
            n: 0,
            beta_at: beta.clone(),
        }
    }
}

/// Reusable per-cluster workspace, sized for the largest cluster seen so far.
#[derive(Default)]
struct Workspace {
    mu: Vec<f64>,
    d: Vec<f64>,
    a: Vec<f64>,
    rw: Vec<f64>,
    mrw: Vec<f64>,
    mdw: Vec<f64>,
    gi: Vec<f64>,
    bases: Vec<Option<BasisSet>>,
}

impl Workspace {
    fn basis(&mut self, model: &ModelSpec, m: usize) -> &BasisSet {
        if self.bases.len() <= m {
            self.bases.resize(m + 1, None);
        }
        self.bases[m].get_or_insert_with(|| basis_set(model.corr, m))
    }
}

/// Flat row-major accumulators.
struct Accumulator {
    p: usize,
    ps: usize,
    g: Vec<f64>,
    sens: Vec<f64>,
    var: Vec<f64>,
}

impl Accumulator {
    fn new(model: &ModelSpec) -> Self {
        let (p, ps) = (model.p, model.score_dim());
        Self { p, ps, g: vec![0.0; ps], sens: vec![0.0; ps * p], var: vec![0.0; ps * ps] }
    }

    fn into_summary(self, n: usize, beta: &DVector<f64>) -> BatchSummary {
        BatchSummary {
            g: DVector::from_vec(self.g),
            sensitivity: DMatrix::from_row_slice(self.ps, self.p, &self.sens),
            variability: DMatrix::from_row_slice(self.ps, self.ps, &self.var),
            n,
            beta_at: beta.clone(),
        }
    }
}

fn accumulate_cluster(model: &ModelSpec, cluster: &Cluster, beta: &[f64], ws: &mut Workspace, acc: &mut Accumulator) {
    let p = model.p;
    let m = cluster.size();
    ws.mu.resize(m, 0.0);
    ws.d.resize(m * p, 0.0);
    ws.a.resize(m, 0.0);
    ws.rw.resize(m, 0.0);
    ws.mrw.resize(m, 0.0);
    ws.mdw.resize(m * p, 0.0);
    ws.gi.clear();
    ws.gi.resize(acc.ps, 0.0);
    fill_moments(model.family, &cluster.x, p, beta, &mut ws.mu, &mut ws.d, &mut ws.a);
    // scale rows by A^{-1/2}
    for j in 0..m {
        let aj = ws.a[j];
        ws.rw[j] = aj * (cluster.y[j] - ws.mu[j]);
        for v in &mut ws.d[j * p..(j + 1) * p] {
            *v *= aj;
        }
    }
    let nb = ws.basis(model, m).len();
    for s in 0..nb {
        // M_s applied to the weighted residual and weighted derivative
        {
            let Workspace { mrw, mdw, rw, d, bases, .. } = &mut *ws;
            let basis = &bases[m].as_ref().expect("basis cached")
                .matrices[s];
            for i in 0..m {
                let mut r = 0.0;
                let row = &mut mdw[i * p..(i + 1) * p];
                row.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..m {
                    let w = basis[(i, j)];
                    if w != 0.0 {
                        r += w * rw[j];
                        for (dst, src) in row.iter_mut().zip(&d[j * p..(j + 1) * p]) {
                            *dst += w * src;
                        }
                    }
                }
                mrw[i] = r;
            }
        }
        for k in 0..p {
            let mut gk = 0.0;
            for j in 0..m {
                gk += ws.d[j * p + k] * ws.mrw[j];
            }
            ws.gi[s * p + k] = gk;
            let out = &mut acc.sens[(s * p + k) * p..(s * p + k + 1) * p];
            for j in 0..m {
                let dk = ws.d[j * p + k];
                if dk != 0.0 {
                    for (o, v) in out.iter_mut().zip(&ws.mdw[j * p..(j + 1) * p]) {
                        *o += dk * v;
                    }
                }
            }
        }
    }
    for (a, b) in acc.g.iter_mut().zip(&ws.gi) {
        *a += b;
    }
    let ps = acc.ps;
    for r in 0..ps {
        let gr = ws.gi[r];
        if gr == 0.0 {
            continue;
        }
        let row = &mut acc.var[r * ps..(r + 1) * ps];
        for (o, gc) in row.iter_mut().zip(&ws.gi) {
            *o += gr * gc;
        }
    }
}

fn check_beta(model: &ModelSpec, beta: &DVector<f64>) -> Result<()> {
    if beta.len() != model.p {
        return Err(Error::Dimension(format!("beta has length {}, model expects p = {}", beta.len(), model.p)));
    }
    if beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("coefficient vector".into()));
    }
    Ok(())
}

/// Extended score summary of one batch at `beta`. Clusters are reduced in
/// index order, so results are deterministic.
pub fn batch_summary(model: &ModelSpec, batch: &ClusterBatch, beta: &DVector<f64>) -> Result<BatchSummary> {
    check_beta(model, beta)?;
    if batch.p != model.p {
        return Err(Error::Dimension(format!("batch has p = {}, model expects p = {}", batch.p, model.p)));
    }
    let mut acc = Accumulator::new(model);
    let mut ws = Workspace::default();
    for (i, cluster) in batch.clusters.iter().enumerate() {
        if cluster.size() == 0 || cluster.x.len() != cluster.size() * model.p {
            return Err(Error::Dimension(format!("cluster {i} of batch {} is malformed", batch.batch_id)));
        }
        accumulate_cluster(model, cluster, beta.as_slice(), &mut ws, &mut acc);
    }
    Ok(acc.into_summary(batch.len(), beta))
}

/// `Q = g^T C^+ g`.
pub fn qif_objective(summary: &BatchSummary) -> Result<f64> {
    let cp = pseudo_inverse(&summary.variability)?;
    Ok(summary.g.dot(&(&cp.pinv * &summary.g)).max(0.0))
}

/// Quantities of one Gauss-Newton step on a GMM objective.
#[derive(Debug, Clone)]
pub(crate) struct GmmStep {
    pub step: DVector<f64>,
    pub decrement: f64,
}

/// Information `J = G^T C^+ G` and weighted score `f = G^T C^+ g` for one block.
pub(crate) fn weighted_blocks(
    g: &DVector<f64>,
    sens: &DMatrix<f64>,
    var: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>, usize)> {
    let cp = pseudo_inverse(var)?;
    let w = sens.transpose() * &cp.pinv;
    Ok((&w * sens, &w * g, cp.rank))
}

pub(crate) fn gmm_step(info: &DMatrix<f64>, score: &DVector<f64>) -> Result<GmmStep> {
    let jp = pseudo_inverse(info)?;
    let step = &jp.pinv * score;
    let decrement = score.dot(&step);
    if !decrement.is_finite() || step.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Newton step".into()));
    }
    Ok(GmmStep { step, decrement })
}

/// Offline QIF estimate of one data set.
#[derive(Debug, Clone)]
pub struct QifFit {
    pub beta_hat: DVector<f64>,
    pub summary: BatchSummary,
    pub q: f64,
    pub iterations: u32,
    pub converged: bool,
    pub decrement: f64,
}

impl QifFit {
    /// Godambe-based covariance `(G^T C^+ G)^+`.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        let (info, _, _) = weighted_blocks(&self.summary.g, &self.summary.sensitivity, &self.summary.variability)?;
        Ok(pseudo_inverse(&info)?.pinv)
    }
}

pub fn fit_offline_qif(
    model: &ModelSpec,
    data: &ClusterBatch,
    beta_init: &DVector<f64>,
    cfg: &NewtonConfig,
) -> Result<QifFit> {
    check_beta(model, beta_init)?;
    if data.is_empty() {
        return Err(Error::Invalid("offline QIF needs at least one cluster".into()));
    }
    if data.len() < model.p {
        tracing::warn!(n = data.len(), p = model.p, "fewer clusters than coefficients");
    }
    let mut beta = beta_init.clone();
    let mut iterations = 0;
    let mut converged = false;
    let mut decrement = f64::INFINITY;
    while iterations < cfg.maxit {
        iterations += 1;
        let s = batch_summary(model, data, &beta)?;
        let (info, f, _) = weighted_blocks(&s.g, &s.sensitivity, &s.variability)?;
        let st = gmm_step(&info, &f).map_err(|_| Error::Divergence(format!("offline QIF at iteration {iterations}")))?;
        beta += &st.step;
        decrement = st.decrement;
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("offline QIF at iteration {iterations}")));
        }
        if decrement < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        tracing::warn!("{MAXIT_WARNING}");
    }
    let summary = batch_summary(model, data, &beta)?;
    let q = qif_objective(&summary)?;
    Ok(QifFit { beta_hat: beta, summary, q, iterations, converged, decrement })
}
