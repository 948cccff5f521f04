//! Renewable QIF: the incremental estimating equation, online variance and Wald inference.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::fit_irls;
use crate::model::{ClusterBatch, ModelSpec};
use crate::numerics::{ln_two_sided_normal_p, pseudo_inverse};
use crate::qif::{batch_summary, fit_offline_qif, gmm_step, weighted_blocks, NewtonConfig, MAXIT_WARNING};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenewConfig {
    pub newton: NewtonConfig,
    pub monitor: bool,
    /// Significance level of the monitoring screen.
    pub alpha: f64,
}

impl Default for RenewConfig {
    fn default() -> Self {
        Self { newton: NewtonConfig::default(), monitor: true, alpha: 0.05 }
    }
}

/// Summary statistics carried between batches: `beta~`, `g~` (at `beta~`), `G~`, `C~`, `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregates {
    pub beta: DVector<f64>,
    pub score: DVector<f64>,
    pub sensitivity: DMatrix<f64>,
    pub variability: DMatrix<f64>,
    pub n_total: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenewState {
    pub model: ModelSpec,
    pub config: RenewConfig,
    pub agg: Aggregates,
    /// Batches seen, rejected ones included.
    pub b: u64,
    pub n1: u64,
    pub batches_rejected: u64,
    pub reference: ClusterBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateOutcome {
    pub iterations: u32,
    pub converged: bool,
    pub decrement: f64,
    pub warning: Option<String>,
}

/// Fits batch one offline (IRLS start, then QIF) and keeps it as the monitoring reference.
pub fn init_state(model: &ModelSpec, first_batch: ClusterBatch, config: RenewConfig) -> Result<(RenewState, UpdateOutcome)> {
    if first_batch.is_empty() {
        return Err(Error::Invalid("the first batch must contain at least one cluster".into()));
    }
    first_batch.validate(model)?;
    if first_batch.len() < model.p {
        tracing::warn!(n1 = first_batch.len(), p = model.p, "first batch has fewer clusters than coefficients");
    }
    let start = fit_irls(model, &first_batch, 1e-8, 100)?;
    let fit = fit_offline_qif(model, &first_batch, &start.beta, &config.newton)?;
    let rank = pseudo_inverse(&(fit.summary.sensitivity.transpose() * &fit.summary.sensitivity))?.rank;
    if rank < model.p {
        return Err(Error::RankDeficient { rank, required: model.p });
    }
    let n1 = first_batch.len() as u64;
    let outcome = UpdateOutcome {
        iterations: fit.iterations,
        converged: fit.converged,
        decrement: fit.decrement,
        warning: (!fit.converged).then(|| MAXIT_WARNING.to_string()),
    };
    let agg = Aggregates {
        beta: fit.beta_hat,
        score: fit.summary.g,
        sensitivity: fit.summary.sensitivity,
        variability: fit.summary.variability,
        n_total: n1,
    };
    let state = RenewState { model: *model, config, agg, b: 1, n1, batches_rejected: 0, reference: first_batch };
    Ok((state, outcome))
}

/// Adjusted score `g~_{b-1} + G~_{b-1}(beta~_{b-1} - beta) + g_b`.
fn adjusted_score(prev: &Aggregates, beta: &DVector<f64>, g_b: &DVector<f64>) -> DVector<f64> {
    &prev.score + &prev.sensitivity * (&prev.beta - beta) + g_b
}

/// One Newton-Raphson renewal. Sees only the carried aggregates and the current batch.
///
/// Stops once the last step's decrement is below `tol` and, at the new iterate, the
/// weighted score `G~^T C~^+ g~` is below `tol * max(1, |beta|)` in every coordinate.
pub fn renew_aggregates(
    model: &ModelSpec,
    prev: &Aggregates,
    batch: &ClusterBatch,
    cfg: &NewtonConfig,
) -> Result<(Aggregates, UpdateOutcome)> {
    if batch.is_empty() {
        let outcome = UpdateOutcome { iterations: 0, converged: true, decrement: 0.0, warning: None };
        return Ok((prev.clone(), outcome));
    }
    batch.validate(model)?;
    let mut beta = prev.beta.clone();
    let mut iterations = 0;
    let mut decrement = f64::INFINITY;
    let mut converged = false;
    // Each pass evaluates the batch at the current iterate; the evaluation that
    // follows the converged step doubles as the commit pass.
    let s = loop {
        let s = batch_summary(model, batch, &beta)?;
        let g = adjusted_score(prev, &beta, &s.g);
        let sens = &prev.sensitivity + &s.sensitivity;
        let var = &prev.variability + &s.variability;
        let (info, f, _) = weighted_blocks(&g, &sens, &var)?;
        let settled = f.amax() <= cfg.tol * beta.norm().max(1.0);
        if iterations > 0 && decrement < cfg.tol && settled {
            converged = true;
            break s;
        }
        if iterations == cfg.maxit {
            break s;
        }
        let st = gmm_step(&info, &f)?;
        beta += &st.step;
        decrement = st.decrement;
        iterations += 1;
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("renewal iterate of batch {}", batch.batch_id)));
        }
    };
    let warning = if converged {
        None
    } else {
        tracing::warn!(batch = batch.batch_id, "{MAXIT_WARNING}");
        Some(MAXIT_WARNING.to_string())
    };
    let next = Aggregates {
        score: adjusted_score(prev, &beta, &s.g),
        sensitivity: &prev.sensitivity + &s.sensitivity,
        variability: &prev.variability + &s.variability,
        n_total: prev.n_total + batch.len() as u64,
        beta,
    };
    Ok((next, UpdateOutcome { iterations, converged, decrement, warning }))
}

impl RenewState {
    /// Renews the state with `batch`. On error the state is left untouched.
    pub fn update(&mut self, batch: &ClusterBatch) -> Result<UpdateOutcome> {
        let (agg, outcome) = renew_aggregates(&self.model, &self.agg, batch, &self.config.newton)?;
        self.agg = agg;
        self.b += 1;
        Ok(outcome)
    }

    /// Counts a screened-out batch without touching the estimate.
    pub fn record_rejection(&mut self) {
        self.b += 1;
        self.batches_rejected += 1;
    }

    /// Adds a further normal batch to the monitoring reference.
    pub fn augment_reference(&mut self, batch: &ClusterBatch) {
        let id = self.reference.batch_id;
        self.reference = ClusterBatch::concat(id, self.model.p, [&self.reference, batch]);
    }

    /// `G~^T C~^+ g~`, zero when the estimating equation holds exactly.
    pub fn equation_residual(&self) -> Result<DVector<f64>> {
        Ok(weighted_blocks(&self.agg.score, &self.agg.sensitivity, &self.agg.variability)?.1)
    }

    pub fn variance(&self) -> Result<DMatrix<f64>> {
        variance_of(self)
    }

    pub fn report(&self) -> Result<InferenceReport> {
        inference_report(self)
    }
}

/// `V~ = (G~^T C~^+ G~)^+`.
pub fn variance_of(state: &RenewState) -> Result<DMatrix<f64>> {
    let a = &state.agg;
    let (info, _, _) = weighted_blocks(&a.score, &a.sensitivity, &a.variability)?;
    Ok(pseudo_inverse(&info)?.pinv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientReport {
    pub estimate: f64,
    pub std_error: f64,
    pub z: f64,
    pub p_value: f64,
    pub neg_log10_p: f64,
    /// Set when the standard error is zero and `p` is a guard value.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub coefficients: Vec<CoefficientReport>,
    pub n_total: u64,
    pub b: u64,
    pub batches_rejected: u64,
}

/// Wald quantities for one estimate and standard error.
pub fn wald(estimate: f64, std_error: f64) -> CoefficientReport {
    if !(std_error > 0.0) {
        return CoefficientReport {
            estimate,
            std_error,
            z: if estimate == 0.0 { 0.0 } else { f64::INFINITY.copysign(estimate) },
            p_value: if estimate == 0.0 { 1.0 } else { 0.0 },
            neg_log10_p: if estimate == 0.0 { 0.0 } else { f64::INFINITY },
            degenerate: true,
        };
    }
    let z = estimate / std_error;
    let ln_p = ln_two_sided_normal_p(z);
    CoefficientReport {
        estimate,
        std_error,
        z,
        p_value: ln_p.exp().max(f64::MIN_POSITIVE),
        neg_log10_p: -ln_p / std::f64::consts::LN_10,
        degenerate: false,
    }
}

pub fn inference_report(state: &RenewState) -> Result<InferenceReport> {
    let v = variance_of(state)?;
    let coefficients = (0..state.model.p).map(|k| wald(state.agg.beta[k], v[(k, k)].max(0.0).sqrt())).collect();
    Ok(InferenceReport {
        coefficients,
        n_total: state.agg.n_total,
        b: state.b,
        batches_rejected: state.batches_rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Cluster, CorrStructure, Family};
    use crate::numerics::two_sided_normal_p;
    use crate::qif::BatchSummary;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gaussian_batch(rng: &mut ChaCha8Rng, id: u64, n: usize, m: usize, beta: &[f64], noise: f64) -> ClusterBatch {
        let p = beta.len();
        let clusters = (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..m).flat_map(|_| {
                    let mut row = vec![1.0];
                    row.extend((1..p).map(|_| rng.random_range(-1.5..1.5)));
                    row
                }).collect();
                let shared = noise * rng.random_range(-1.0..1.0);
                let y = (0..m)
                    .map(|j| {
                        let eta: f64 = (0..p).map(|k| x[j * p + k] * beta[k]).sum();
                        eta + shared + noise * rng.random_range(-1.0..1.0)
                    })
                    .collect();
                Cluster::new(y, x)
            })
            .collect();
        ClusterBatch::new(id, p, clusters)
    }

    fn pooled(model: &ModelSpec, batches: &[ClusterBatch], beta: &DVector<f64>) -> BatchSummary {
        let all = ClusterBatch::concat(0, model.p, batches);
        batch_summary(model, &all, beta).unwrap()
    }

    const BETA0: [f64; 5] = [0.2, -0.2, 0.2, -0.2, 0.2];

    #[test]
    fn zero_noise_init_recovers_truth() {
        let model = ModelSpec::new(Family::GaussianIdentity, 5, CorrStructure::CompoundSymmetry).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = gaussian_batch(&mut rng, 1, 30, 5, &BETA0, 0.0);
        let (state, _) = init_state(&model, batch, RenewConfig::default()).unwrap();
        for (a, b) in state.agg.beta.iter().zip(BETA0) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(state.agg.score.amax() < 1e-12);
    }

    #[test]
    fn init_matches_offline_fit() {
        let model = ModelSpec::new(Family::GaussianIdentity, 5, CorrStructure::CompoundSymmetry).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = gaussian_batch(&mut rng, 1, 60, 5, &BETA0, 1.0);
        let start = fit_irls(&model, &batch, 1e-8, 100).unwrap();
        let fit = fit_offline_qif(&model, &batch, &start.beta, &NewtonConfig::default()).unwrap();
        let (state, _) = init_state(&model, batch, RenewConfig::default()).unwrap();
        assert_eq!(state.agg.beta, fit.beta_hat);
        assert_eq!(state.agg.score, fit.summary.g);
        assert_eq!(state.agg.sensitivity, fit.summary.sensitivity);
        assert_eq!(state.agg.variability, fit.summary.variability);
        assert_eq!(variance_of(&state).unwrap(), fit.covariance().unwrap());
    }

    #[test]
    fn empty_batch_only_counts() {
        let model = ModelSpec::new(Family::GaussianIdentity, 5, CorrStructure::CompoundSymmetry).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut state, _) = init_state(&model, gaussian_batch(&mut rng, 1, 40, 5, &BETA0, 1.0), RenewConfig::default()).unwrap();
        let before = state.clone();
        state.update(&ClusterBatch::empty(2, 5)).unwrap();
        assert_eq!(state.b, 2);
        assert_eq!(state.agg, before.agg);
    }

    #[test]
    fn gaussian_adjusted_score_is_pooled_score() {
        let model = ModelSpec::new(Family::GaussianIdentity, 5, CorrStructure::CompoundSymmetry).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batches: Vec<_> = (1..=2).map(|b| gaussian_batch(&mut rng, b, 50, 5, &BETA0, 1.0)).collect();
        let (mut state, _) = init_state(&model, batches[0].clone(), RenewConfig::default()).unwrap();
        state.update(&batches[1]).unwrap();
        for _ in 0..20 {
            let beta = DVector::from_fn(5, |_, _| rng.random_range(-2.0..2.0));
            let adjusted = &state.agg.score + &state.agg.sensitivity * (&state.agg.beta - &beta);
            let full = pooled(&model, &batches, &beta).g;
            assert!((&adjusted - &full).norm() <= 1e-10 * full.norm().max(1.0));
        }
    }

    #[test]
    fn single_batch_independence_variance_is_ols_sandwich() {
        let model = ModelSpec::new(Family::GaussianIdentity, 3, CorrStructure::Independence).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = gaussian_batch(&mut rng, 1, 80, 4, &[0.5, -1.0, 2.0], 1.0);
        let (state, _) = init_state(&model, batch.clone(), RenewConfig::default()).unwrap();
        let mut bread = DMatrix::zeros(3, 3);
        let mut meat = DMatrix::zeros(3, 3);
        for c in &batch.clusters {
            let x = c.design(3);
            let r = DVector::from_vec(c.y.clone()) - &x * &state.agg.beta;
            bread += x.transpose() * &x;
            let u = x.transpose() * r;
            meat += &u * u.transpose();
        }
        let bi = bread.try_inverse().unwrap();
        let direct = &bi * meat * &bi;
        assert!((variance_of(&state).unwrap() - direct).amax() < 1e-8);
    }

    #[test]
    fn variance_is_symmetric() {
        let model = ModelSpec::new(Family::GaussianIdentity, 5, CorrStructure::CompoundSymmetry).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut state, _) = init_state(&model, gaussian_batch(&mut rng, 1, 40, 5, &BETA0, 1.0), RenewConfig::default()).unwrap();
        state.update(&gaussian_batch(&mut rng, 2, 40, 5, &BETA0, 1.0)).unwrap();
        let v = variance_of(&state).unwrap();
        assert!((&v - v.transpose()).amax() <= 1e-12);
    }

    #[test]
    fn wald_edge_cases() {
        let zero = wald(0.0, 0.3);
        assert_eq!((zero.z, zero.p_value), (0.0, 1.0));
        let w = wald(1.959964, 1.0);
        assert!((w.p_value - 0.05).abs() < 1e-6);
        assert!((w.p_value - two_sided_normal_p(1.959964)).abs() < 1e-15);
        let far = wald(50.0, 1.0);
        assert!(far.neg_log10_p.is_finite() && far.neg_log10_p > 544.0);
        assert!(far.p_value > 0.0 && far.p_value <= 1.0);
        let degenerate = wald(0.3, 0.0);
        assert!(degenerate.degenerate);
        assert_eq!(degenerate.p_value, 0.0);
    }

    #[test]
    fn update_step_matches_recursive_formula() {
        let model = ModelSpec::new(Family::BinomialLogit, 3, CorrStructure::CompoundSymmetry).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut make = |id| {
            let clusters = (0..80)
                .map(|_| {
                    let x: Vec<f64> = (0..4).flat_map(|_| [1.0, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
                    let y = (0..4).map(|_| f64::from(rng.random_bool(0.45))).collect();
                    Cluster::new(y, x)
                })
                .collect();
            ClusterBatch::new(id, 3, clusters)
        };
        let (mut state, _) = init_state(&model, make(1), RenewConfig::default()).unwrap();
        for id in 2..6 {
            let batch = make(id);
            let prev = state.agg.clone();
            state.update(&batch).unwrap();
            let cur = &state.agg;
            let g_b = batch_summary(&model, &batch, &cur.beta).unwrap().g;
            let cp = pseudo_inverse(&cur.variability).unwrap().pinv;
            let w = cur.sensitivity.transpose() * cp;
            let h = &w * &prev.sensitivity;
            let u = &w * (&prev.score + g_b);
            let predicted = h.try_inverse().unwrap() * u;
            let actual = &cur.beta - &prev.beta;
            assert!((&predicted - &actual).norm() <= 1e-6 * actual.norm(), "{predicted} vs {actual}");
        }
    }
}
