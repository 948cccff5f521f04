//! Goodness-of-fit screen of an incoming batch against the normal reference.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClusterBatch, ModelSpec};
use crate::numerics::{chi2_quantile, chi2_sf, pseudo_inverse};
use crate::qif::{batch_summary, gmm_step, BatchSummary, NewtonConfig, MAXIT_WARNING};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorDecision {
    pub lambda: f64,
    pub df: u32,
    pub p_value: f64,
    pub critical_value: f64,
    pub reject: bool,
    pub beta_check: Vec<f64>,
    pub alpha_used: f64,
    pub iterations: u32,
    pub converged: bool,
    /// The joint minimization broke down and the batch was rejected conservatively.
    pub diverged: bool,
}

struct Joint {
    lambda: f64,
    rank: usize,
    f: DVector<f64>,
    info: nalgebra::DMatrix<f64>,
}

fn joint(reference: &BatchSummary, candidate: &BatchSummary) -> Result<Joint> {
    let mut lambda = 0.0;
    let mut rank = 0;
    let p = reference.sensitivity.ncols();
    let mut f = DVector::zeros(p);
    let mut info = nalgebra::DMatrix::zeros(p, p);
    for s in [reference, candidate] {
        let cp = pseudo_inverse(&s.variability)?;
        let w = s.sensitivity.transpose() * &cp.pinv;
        lambda += s.g.dot(&(&cp.pinv * &s.g)).max(0.0);
        rank += cp.rank;
        f += &w * &s.g;
        info += &w * &s.sensitivity;
    }
    Ok(Joint { lambda, rank, f, info })
}

fn diverged(model: &ModelSpec, alpha: f64, beta: &DVector<f64>, iterations: u32) -> MonitorDecision {
    tracing::warn!(iterations, "monitoring minimization diverged; rejecting conservatively");
    MonitorDecision {
        lambda: f64::INFINITY,
        df: 0,
        p_value: 0.0,
        critical_value: f64::NAN,
        reject: true,
        beta_check: if beta.iter().all(|v| v.is_finite()) { beta.iter().copied().collect() } else { vec![f64::NAN; model.p] },
        alpha_used: alpha,
        iterations,
        converged: false,
        diverged: true,
    }
}

/// Minimizes `Q_1(beta) + Q_b(beta)` with block-diagonal covariance from `beta_init`
/// and tests `Lambda` against the chi-square quantile.
pub fn screen_batch(
    model: &ModelSpec,
    reference: &ClusterBatch,
    candidate: &ClusterBatch,
    alpha: f64,
    beta_init: &DVector<f64>,
    cfg: &NewtonConfig,
) -> Result<MonitorDecision> {
    if reference.is_empty() || candidate.is_empty() {
        return Err(Error::Invalid("monitoring needs a nonempty reference and candidate".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!("significance level {alpha} outside (0, 1)")));
    }
    candidate.validate(model)?;
    let mut beta = beta_init.clone();
    let mut iterations = 0;
    let mut converged = false;
    let state = loop {
        let evaluated = batch_summary(model, reference, &beta)
            .and_then(|r| Ok((r, batch_summary(model, candidate, &beta)?)))
            .and_then(|(r, c)| joint(&r, &c));
        let j = match evaluated {
            Ok(j) => j,
            Err(Error::NonFinite(_)) => return Ok(diverged(model, alpha, &beta, iterations)),
            Err(e) => return Err(e),
        };
        if iterations == cfg.maxit {
            tracing::warn!("{MAXIT_WARNING}");
            break j;
        }
        let st = match gmm_step(&j.info, &j.f) {
            Ok(st) => st,
            Err(_) => return Ok(diverged(model, alpha, &beta, iterations)),
        };
        if st.decrement < cfg.tol {
            converged = true;
            break j;
        }
        iterations += 1;
        beta += &st.step;
        if beta.iter().any(|v| !v.is_finite()) || beta.amax() > 1e6 {
            return Ok(diverged(model, alpha, &beta, iterations));
        }
    };
    let mut df = state.rank as i64 - model.p as i64;
    if df <= 0 && state.lambda == 0.0 && state.f.iter().all(|v| *v == 0.0) && state.rank == 0 {
        // both scores vanish identically, so every covariance block is zero
        df = 2 * model.score_dim() as i64 - model.p as i64;
    }
    if df <= 0 {
        return Err(Error::DegenerateReference(df));
    }
    let df = df as u32;
    let critical_value = chi2_quantile(1.0 - alpha, df)?;
    Ok(MonitorDecision {
        lambda: state.lambda,
        df,
        p_value: chi2_sf(state.lambda, df)?,
        critical_value,
        reject: state.lambda >= critical_value,
        beta_check: beta.iter().copied().collect(),
        alpha_used: alpha,
        iterations,
        converged,
        diverged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Cluster, CorrStructure, Family};
    use crate::simulate::{gen_batch, SimConfig, DEFAULT_BETA0};

    fn standard_model(family: Family) -> ModelSpec {
        ModelSpec::new(family, 5, CorrStructure::CompoundSymmetry).unwrap()
    }

    #[test]
    fn zero_noise_batches_accept_with_zero_lambda() {
        let model = standard_model(Family::GaussianIdentity);
        let cfg = SimConfig { phi: 1e-30, ..SimConfig::standard(Family::GaussianIdentity, 40, 2, 3) };
        let exact = |b| {
            let mut batch = gen_batch(&cfg, b).unwrap();
            for c in &mut batch.clusters {
                for j in 0..5 {
                    c.y[j] = c.row(j, 5).iter().zip(DEFAULT_BETA0).map(|(x, b)| x * b).sum();
                }
            }
            batch
        };
        let beta0 = DVector::from_column_slice(&DEFAULT_BETA0);
        let d = screen_batch(&model, &exact(1), &exact(2), 0.05, &beta0, &NewtonConfig::default()).unwrap();
        assert_eq!(d.lambda, 0.0);
        assert!(!d.reject);
        assert_eq!(d.df, 15);
        for (a, b) in d.beta_check.iter().zip(DEFAULT_BETA0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reject_matches_quantile_and_is_monotone_in_alpha() {
        let model = standard_model(Family::BinomialLogit);
        let cfg = SimConfig::standard(Family::BinomialLogit, 100, 2, 8).with_contamination(vec![2], 0.5);
        let (r, c) = (gen_batch(&cfg, 1).unwrap(), gen_batch(&cfg, 2).unwrap());
        let beta0 = DVector::from_column_slice(&DEFAULT_BETA0);
        let mut rejected = false;
        for alpha in [0.001, 0.01, 0.05, 0.1, 0.3, 0.6, 0.9] {
            let d = screen_batch(&model, &r, &c, alpha, &beta0, &NewtonConfig::default()).unwrap();
            assert!(d.lambda >= 0.0);
            assert_eq!(d.reject, d.lambda >= chi2_quantile(1.0 - alpha, d.df).unwrap());
            assert!(!rejected || d.reject);
            rejected |= d.reject;
            assert!((d.p_value - chi2_sf(d.lambda, d.df).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn one_cluster_reference_is_degenerate() {
        let model = ModelSpec::new(Family::GaussianIdentity, 2, CorrStructure::CompoundSymmetry).unwrap();
        let one = |y: f64| ClusterBatch::new(1, 2, vec![Cluster::new(vec![y], vec![1.0, 0.5])]);
        let r = screen_batch(&model, &one(1.0), &one(2.0), 0.05, &DVector::zeros(2), &NewtonConfig::default());
        assert!(matches!(r, Err(Error::DegenerateReference(df)) if df <= 0), "{r:?}");
    }

    #[test]
    fn empty_inputs_rejected() {
        let model = standard_model(Family::GaussianIdentity);
        let b = gen_batch(&SimConfig::standard(Family::GaussianIdentity, 10, 1, 1), 1).unwrap();
        let e = ClusterBatch::empty(2, 5);
        assert!(screen_batch(&model, &b, &e, 0.05, &DVector::zeros(5), &NewtonConfig::default()).is_err());
        assert!(screen_batch(&model, &b, &b, 1.5, &DVector::zeros(5), &NewtonConfig::default()).is_err());
    }
}
