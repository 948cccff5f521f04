//! Offline GEE and its renewable variant with recursively renewed nuisance parameters.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::fit_irls;
use crate::model::{fill_moments, ClusterBatch, CorrStructure, ModelSpec};
use crate::numerics::{pseudo_inverse, solve_spd};
use crate::qif::{NewtonConfig, MAXIT_WARNING};

/// Distance kept from the edges of the valid exchangeable interval when clamping.
const ALPHA_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeeNuisance {
    pub alpha: f64,
    pub phi: f64,
    /// Set when the moment estimate of `alpha` fell outside its valid interval.
    pub clamped: bool,
}

impl Default for GeeNuisance {
    fn default() -> Self {
        Self { alpha: 0.0, phi: 1.0, clamped: false }
    }
}

/// Pearson residual sums feeding the moment estimators.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidMoments {
    pub sum_sq: f64,
    pub observations: u64,
    pub sum_cross: f64,
    pub pairs: u64,
    pub max_m: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeeBatchStats {
    pub psi: DVector<f64>,
    pub s: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub resid: ResidMoments,
}

fn check_structure(model: &ModelSpec) -> Result<()> {
    if model.corr == CorrStructure::Ar1 {
        return Err(Error::Invalid("GEE supports independence and compound-symmetry working correlation".into()));
    }
    Ok(())
}

/// `R(alpha)^{-1} = c1 I - c2 J` for an exchangeable matrix of size `m`.
fn exchangeable_inverse(m: usize, alpha: f64) -> Result<(f64, f64)> {
    let det_factor = 1.0 + (m as f64 - 1.0) * alpha;
    if m > 1 && !(alpha < 1.0 && det_factor > 0.0) {
        let minor = if alpha >= 1.0 { 2 } else { m };
        return Err(Error::NotPositiveDefinite { minor, pivot: det_factor.min(1.0 - alpha) });
    }
    if m == 1 {
        return Ok((1.0, 0.0));
    }
    Ok((1.0 / (1.0 - alpha), alpha / ((1.0 - alpha) * det_factor)))
}

/// `psi = sum D^T S^{-1}(y - mu)`, `S = sum D^T S^{-1} D`, `V = sum psi_i psi_i^T`
/// with `S_i = A^{1/2} R(alpha) A^{1/2}`; `phi` cancels and is left out.
pub fn gee_batch_stats(model: &ModelSpec, batch: &ClusterBatch, beta: &DVector<f64>, nuisance: &GeeNuisance) -> Result<GeeBatchStats> {
    check_structure(model)?;
    let p = model.p;
    let alpha = if model.corr == CorrStructure::Independence { 0.0 } else { nuisance.alpha };
    let mut psi = DVector::zeros(p);
    let mut s = DMatrix::zeros(p, p);
    let mut v = DMatrix::zeros(p, p);
    let mut resid = ResidMoments::default();
    let (mut mu, mut d, mut a) = (Vec::new(), Vec::new(), Vec::new());
    let mut colsum = vec![0.0; p];
    let mut u = DVector::zeros(p);
    for c in &batch.clusters {
        let m = c.size();
        let (c1, c2) = exchangeable_inverse(m, alpha)?;
        mu.resize(m, 0.0);
        d.resize(m * p, 0.0);
        a.resize(m, 0.0);
        fill_moments(model.family, &c.x, p, beta.as_slice(), &mut mu, &mut d, &mut a);
        let mut rsum = 0.0;
        let mut rsq = 0.0;
        colsum.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..m {
            let e = a[j] * (c.y[j] - mu[j]);
            rsum += e;
            rsq += e * e;
            for (k, cs) in colsum.iter_mut().enumerate() {
                d[j * p + k] *= a[j];
                *cs += d[j * p + k];
            }
        }
        u.fill(0.0);
        for j in 0..m {
            let e = a[j] * (c.y[j] - mu[j]);
            let row = &d[j * p..(j + 1) * p];
            for k in 0..p {
                u[k] += c1 * row[k] * e;
                for l in 0..=k {
                    s[(k, l)] += c1 * row[k] * row[l];
                }
            }
        }
        for k in 0..p {
            u[k] -= c2 * colsum[k] * rsum;
            for l in 0..=k {
                s[(k, l)] -= c2 * colsum[k] * colsum[l];
            }
        }
        psi += &u;
        v.ger(1.0, &u, &u, 1.0);
        resid.sum_sq += rsq;
        resid.sum_cross += 0.5 * (rsum * rsum - rsq);
        resid.observations += m as u64;
        resid.pairs += (m * (m - 1) / 2) as u64;
        resid.max_m = resid.max_m.max(m);
    }
    for k in 0..p {
        for l in 0..k {
            s[(l, k)] = s[(k, l)];
        }
    }
    if psi.iter().chain(s.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("GEE batch statistics".into()));
    }
    Ok(GeeBatchStats { psi, s, v, resid })
}

/// Moment estimates of `phi` and the exchangeable `alpha`, clamped into the valid interval.
pub fn moment_nuisance(model: &ModelSpec, r: &ResidMoments) -> GeeNuisance {
    let p = model.p as f64;
    let phi = r.sum_sq / (r.observations as f64 - p).max(1.0);
    if r.sum_sq == 0.0 {
        // residuals vanish: no information on alpha
        return GeeNuisance { alpha: 0.0, phi: f64::MIN_POSITIVE, clamped: false };
    }
    if model.corr == CorrStructure::Independence || r.max_m < 2 {
        return GeeNuisance { alpha: 0.0, phi, clamped: false };
    }
    let raw = r.sum_cross / (phi * (r.pairs as f64 - p).max(1.0));
    let (alpha, clamped) = clamp_alpha(raw, r.max_m);
    GeeNuisance { alpha, phi, clamped }
}

fn clamp_alpha(raw: f64, max_m: usize) -> (f64, bool) {
    let lo = -1.0 / (max_m as f64 - 1.0) + ALPHA_MARGIN;
    let hi = 1.0 - ALPHA_MARGIN;
    if !raw.is_finite() {
        return (0.0, true);
    }
    let alpha = raw.clamp(lo, hi);
    (alpha, alpha != raw)
}

/// `{S^T V^{-1} S}^{-1}`.
pub fn sandwich(s: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let vi = pseudo_inverse(v)?.pinv;
    Ok(pseudo_inverse(&(s.transpose() * vi * s))?.pinv)
}

#[derive(Debug, Clone)]
pub struct GeeFit {
    pub beta_hat: DVector<f64>,
    pub sandwich: DMatrix<f64>,
    pub nuisance: GeeNuisance,
    pub stats: GeeBatchStats,
    pub iterations: u32,
    pub converged: bool,
}

pub fn fit_offline_gee(model: &ModelSpec, data: &ClusterBatch, cfg: &NewtonConfig) -> Result<GeeFit> {
    check_structure(model)?;
    if data.is_empty() {
        return Err(Error::Invalid("offline GEE needs at least one cluster".into()));
    }
    data.validate(model)?;
    let mut beta = fit_irls(model, data, 1e-8, 100)?.beta;
    let mut nuisance = GeeNuisance::default();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.maxit {
        iterations += 1;
        let st = gee_batch_stats(model, data, &beta, &nuisance)?;
        let next = moment_nuisance(model, &st.resid);
        let step = solve_spd(&st.s, &st.psi)?;
        beta += &step;
        let settled = (next.alpha - nuisance.alpha).abs() < cfg.tol && (next.phi - nuisance.phi).abs() < cfg.tol * next.phi.max(1.0);
        nuisance = next;
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("offline GEE at iteration {iterations}")));
        }
        if settled && step.norm() < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        tracing::warn!("{MAXIT_WARNING}");
    }
    let stats = gee_batch_stats(model, data, &beta, &nuisance)?;
    nuisance = moment_nuisance(model, &stats.resid);
    if nuisance.clamped {
        tracing::warn!(alpha = nuisance.alpha, "working correlation estimate clamped");
    }
    Ok(GeeFit { sandwich: sandwich(&stats.s, &stats.v)?, beta_hat: beta, nuisance, stats, iterations, converged })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeeState {
    pub model: ModelSpec,
    pub beta: DVector<f64>,
    pub s_tilde: DMatrix<f64>,
    pub v_tilde: DMatrix<f64>,
    pub nuisance: GeeNuisance,
    pub n_total: u64,
    pub observations: u64,
    pub b: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeeOutcome {
    pub iterations: u32,
    pub converged: bool,
}

pub fn init_gee(model: &ModelSpec, first_batch: &ClusterBatch, cfg: &NewtonConfig) -> Result<(GeeState, GeeFit)> {
    let fit = fit_offline_gee(model, first_batch, cfg)?;
    let state = GeeState {
        model: *model,
        beta: fit.beta_hat.clone(),
        s_tilde: fit.stats.s.clone(),
        v_tilde: fit.stats.v.clone(),
        nuisance: fit.nuisance,
        n_total: first_batch.len() as u64,
        observations: fit.stats.resid.observations,
        b: 1,
    };
    Ok((state, fit))
}

/// Nuisance weights `(w~_{b-1}, w_b)` with `w~_{b-1} = (m N_{b-1} - p)/(m N_b - p)`,
/// `m N` being the observation count, and `w_b = 1 - w~_{b-1}`.
pub fn nuisance_weights(prev_observations: u64, observations: u64, p: usize) -> (f64, f64) {
    let p = p as f64;
    let w_prev = (prev_observations as f64 - p) / (observations as f64 - p);
    (w_prev, 1.0 - w_prev)
}

pub fn renew_gee_update(state: &GeeState, batch: &ClusterBatch, cfg: &NewtonConfig) -> Result<(GeeState, GeeOutcome)> {
    if batch.is_empty() {
        return Ok((state.clone(), GeeOutcome { iterations: 0, converged: true }));
    }
    let model = &state.model;
    batch.validate(model)?;
    let mut beta = state.beta.clone();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.maxit {
        iterations += 1;
        let st = gee_batch_stats(model, batch, &beta, &state.nuisance)?;
        let psi = &state.s_tilde * (&state.beta - &beta) + &st.psi;
        let step = solve_spd(&(&state.s_tilde + &st.s), &psi)?;
        beta += &step;
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("RenewGEE iterate of batch {}", batch.batch_id)));
        }
        if step.norm() < cfg.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        tracing::warn!(batch = batch.batch_id, "{MAXIT_WARNING}");
    }
    let st = gee_batch_stats(model, batch, &beta, &state.nuisance)?;
    let batch_nuisance = moment_nuisance(model, &st.resid);
    let observations = state.observations + st.resid.observations;
    let (w_prev, w_b) = nuisance_weights(state.observations, observations, model.p);
    let raw_alpha = w_prev * state.nuisance.alpha + w_b * batch_nuisance.alpha;
    let max_m = st.resid.max_m.max(2);
    let (alpha, clamped) =
        if model.corr == CorrStructure::Independence { (0.0, false) } else { clamp_alpha(raw_alpha, max_m) };
    let next = GeeState {
        model: *model,
        beta,
        s_tilde: &state.s_tilde + &st.s,
        v_tilde: &state.v_tilde + &st.v,
        nuisance: GeeNuisance {
            alpha,
            phi: w_prev * state.nuisance.phi + w_b * batch_nuisance.phi,
            clamped: clamped || batch_nuisance.clamped,
        },
        n_total: state.n_total + batch.len() as u64,
        observations,
        b: state.b + 1,
    };
    Ok((next, GeeOutcome { iterations, converged }))
}

impl GeeState {
    pub fn sandwich(&self) -> Result<DMatrix<f64>> {
        sandwich(&self.s_tilde, &self.v_tilde)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrbasis::exchangeable;
    use crate::model::{Cluster, Family};
    use crate::simulate::{gen_batch, SimConfig, DEFAULT_BETA0};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(family: Family, corr: CorrStructure) -> ModelSpec {
        ModelSpec::new(family, 5, corr).unwrap()
    }

    fn stacked(batch: &ClusterBatch) -> (DMatrix<f64>, DVector<f64>) {
        let x: Vec<f64> = batch.clusters.iter().flat_map(|c| c.x.clone()).collect();
        let n = batch.total_observations();
        (DMatrix::from_row_slice(n, batch.p, &x), DVector::from_iterator(n, batch.clusters.iter().flat_map(|c| c.y.clone())))
    }

    #[test]
    fn independence_gaussian_psi_is_pooled() {
        let m = model(Family::GaussianIdentity, CorrStructure::Independence);
        let batch = gen_batch(&SimConfig::standard(Family::GaussianIdentity, 30, 1, 2), 1).unwrap();
        let beta = DVector::from_column_slice(&[0.1, 0.3, -0.2, 0.0, 0.5]);
        let st = gee_batch_stats(&m, &batch, &beta, &GeeNuisance::default()).unwrap();
        let (x, y) = stacked(&batch);
        assert!((st.psi - x.transpose() * (y - &x * &beta)).amax() < 1e-10);
    }

    #[test]
    fn zero_alpha_equals_independence() {
        let batch = gen_batch(&SimConfig::standard(Family::BinomialLogit, 30, 1, 2), 1).unwrap();
        let beta = DVector::from_column_slice(&DEFAULT_BETA0);
        let nu = GeeNuisance { alpha: 0.0, phi: 2.0, clamped: false };
        let a = gee_batch_stats(&model(Family::BinomialLogit, CorrStructure::CompoundSymmetry), &batch, &beta, &nu).unwrap();
        let b = gee_batch_stats(&model(Family::BinomialLogit, CorrStructure::Independence), &batch, &beta, &nu).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hand_cluster_matches_dense_solve() {
        let m = ModelSpec::new(Family::GaussianIdentity, 1, CorrStructure::CompoundSymmetry).unwrap();
        let batch = ClusterBatch::new(0, 1, vec![Cluster::new(vec![1.0, 3.0], vec![1.0, 2.0])]);
        let beta = DVector::from_element(1, 0.5);
        let st = gee_batch_stats(&m, &batch, &beta, &GeeNuisance { alpha: 0.5, phi: 1.0, clamped: false }).unwrap();
        let r = DVector::from_vec(vec![0.5, 2.0]);
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let ri = exchangeable(2, 0.5).try_inverse().unwrap();
        assert!((st.psi[0] - x.dot(&(&ri * r))).abs() < 1e-12);
        assert!((st.s[(0, 0)] - x.dot(&(&ri * &x))).abs() < 1e-12);
    }

    #[test]
    fn invalid_alpha_and_ar1_rejected() {
        let batch = gen_batch(&SimConfig::standard(Family::GaussianIdentity, 3, 1, 2), 1).unwrap();
        let beta = DVector::zeros(5);
        let bad = GeeNuisance { alpha: -0.3, phi: 1.0, clamped: false };
        let cs = model(Family::GaussianIdentity, CorrStructure::CompoundSymmetry);
        assert!(matches!(gee_batch_stats(&cs, &batch, &beta, &bad), Err(Error::NotPositiveDefinite { .. })));
        let ar = model(Family::GaussianIdentity, CorrStructure::Ar1);
        assert!(matches!(gee_batch_stats(&ar, &batch, &beta, &GeeNuisance::default()), Err(Error::Invalid(_))));
    }

    #[test]
    fn gaussian_independence_fit_is_ols() {
        let m = model(Family::GaussianIdentity, CorrStructure::Independence);
        let batch = gen_batch(&SimConfig::standard(Family::GaussianIdentity, 80, 1, 4), 1).unwrap();
        let fit = fit_offline_gee(&m, &batch, &NewtonConfig::default()).unwrap();
        let (x, y) = stacked(&batch);
        let ols = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * y;
        assert!((fit.beta_hat - ols).amax() < 1e-8);
    }

    #[test]
    fn exchangeable_fit_solves_its_own_equation() {
        let m = model(Family::GaussianIdentity, CorrStructure::CompoundSymmetry);
        let batch = gen_batch(&SimConfig::standard(Family::GaussianIdentity, 300, 1, 8), 1).unwrap();
        let fit = fit_offline_gee(&m, &batch, &NewtonConfig::default()).unwrap();
        assert!(fit.nuisance.alpha > 0.5);
        let st = gee_batch_stats(&m, &batch, &fit.beta_hat, &fit.nuisance).unwrap();
        assert!(fit.converged);
        assert!(st.psi.amax() < 1e-4, "{}", st.psi.amax());
    }

    #[test]
    fn zero_noise_fit_recovers_truth() {
        let m = model(Family::GaussianIdentity, CorrStructure::CompoundSymmetry);
        let mut batch = gen_batch(&SimConfig::standard(Family::GaussianIdentity, 40, 1, 5), 1).unwrap();
        for c in &mut batch.clusters {
            for j in 0..5 {
                c.y[j] = c.row(j, 5).iter().zip(DEFAULT_BETA0).map(|(x, b)| x * b).sum();
            }
        }
        let fit = fit_offline_gee(&m, &batch, &NewtonConfig::default()).unwrap();
        for (a, b) in fit.beta_hat.iter().zip(DEFAULT_BETA0) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(!fit.nuisance.clamped);
        assert!(fit.sandwich.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gaussian_renewal_psi_is_pooled() {
        let m = model(Family::GaussianIdentity, CorrStructure::Independence);
        let stream = crate::simulate::make_stream(&SimConfig::standard(Family::GaussianIdentity, 50, 4, 6)).unwrap();
        let nu = GeeNuisance::default();
        let pooled = |beta: &DVector<f64>, upto: usize| {
            stream[..upto].iter().map(|b| gee_batch_stats(&m, b, beta, &nu).unwrap().psi).fold(DVector::zeros(5), |a, v| a + v)
        };
        let (mut state, _) = init_gee(&m, &stream[0], &NewtonConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (i, batch) in stream.iter().enumerate().skip(1) {
            let prev = state.clone();
            state = renew_gee_update(&state, batch, &NewtonConfig::default()).unwrap().0;
            for _ in 0..20 {
                let beta = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
                let adjusted = &prev.s_tilde * (&prev.beta - &beta) + gee_batch_stats(&m, batch, &beta, &nu).unwrap().psi;
                let full = pooled(&beta, i + 1);
                assert!((&adjusted - &full).norm() <= 1e-10 * full.norm().max(1.0));
            }
        }
    }

    #[test]
    fn sandwich_forms_agree_and_weights_sum_to_one() {
        let m = model(Family::BinomialLogit, CorrStructure::CompoundSymmetry);
        let stream = crate::simulate::make_stream(&SimConfig::standard(Family::BinomialLogit, 100, 3, 7)).unwrap();
        let (mut state, _) = init_gee(&m, &stream[0], &NewtonConfig::default()).unwrap();
        for b in &stream[1..] {
            let prev = state.observations;
            state = renew_gee_update(&state, b, &NewtonConfig::default()).unwrap().0;
            let (w0, w1) = nuisance_weights(prev, state.observations, 5);
            assert_eq!(w0 + w1, 1.0);
        }
        let si = state.s_tilde.clone().try_inverse().unwrap();
        let direct = &si * &state.v_tilde * &si;
        let sw = state.sandwich().unwrap();
        assert!((&sw - direct).amax() <= 1e-10);
        assert!((&sw - sw.transpose()).amax() <= 1e-14);
        assert!(sw.symmetric_eigenvalues().iter().all(|&l| l >= 0.0));
    }

    #[test]
    fn empty_batch_leaves_state() {
        let m = model(Family::GaussianIdentity, CorrStructure::CompoundSymmetry);
        let b = gen_batch(&SimConfig::standard(Family::GaussianIdentity, 30, 1, 8), 1).unwrap();
        let (state, _) = init_gee(&m, &b, &NewtonConfig::default()).unwrap();
        let (next, _) = renew_gee_update(&state, &ClusterBatch::empty(2, 5), &NewtonConfig::default()).unwrap();
        assert_eq!(next, state);
    }
}
