//! Independence-working GLM fit by iteratively reweighted least squares.
//!
//! Used only to produce starting values for the QIF and GEE solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{fill_moments, ClusterBatch, ModelSpec};
use crate::numerics::{pseudo_inverse, solve_spd};

#[derive(Debug, Clone)]
pub struct GlmFit {
    pub beta: DVector<f64>,
    pub iterations: u32,
    pub converged: bool,
}

/// Fisher information `sum D^T V^{-1} D` and score `sum D^T V^{-1} (y - mu)` pooled
/// over every observation.
fn information(model: &ModelSpec, data: &ClusterBatch, beta: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let p = model.p;
    let mut info = DMatrix::zeros(p, p);
    let mut score = DVector::zeros(p);
    let (mut mu, mut d, mut a) = (Vec::new(), Vec::new(), Vec::new());
    for c in &data.clusters {
        let m = c.size();
        mu.resize(m, 0.0);
        d.resize(m * p, 0.0);
        a.resize(m, 0.0);
        fill_moments(model.family, &c.x, p, beta.as_slice(), &mut mu, &mut d, &mut a);
        for j in 0..m {
            let w = a[j] * a[j];
            let row = &d[j * p..(j + 1) * p];
            let r = w * (c.y[j] - mu[j]);
            for k in 0..p {
                score[k] += row[k] * r;
                for l in 0..=k {
                    info[(k, l)] += w * row[k] * row[l];
                }
            }
        }
    }
    for k in 0..p {
        for l in 0..k {
            info[(l, k)] = info[(k, l)];
        }
    }
    (info, score)
}

/// Starts from zero and stops when the largest coefficient change drops below `tol`.
pub fn fit_irls(model: &ModelSpec, data: &ClusterBatch, tol: f64, maxit: u32) -> Result<GlmFit> {
    if data.is_empty() {
        return Err(Error::Invalid("GLM start needs at least one cluster".into()));
    }
    let mut beta = DVector::zeros(model.p);
    for it in 1..=maxit {
        let (info, score) = information(model, data, &beta);
        let rank = pseudo_inverse(&info)?.rank;
        if rank < model.p {
            return Err(Error::RankDeficient { rank, required: model.p });
        }
        let step = solve_spd(&info, &score)?;
        beta += &step;
        if beta.iter().any(|v| !v.is_finite()) || beta.amax() > 1e6 {
            return Err(Error::Divergence(format!("IRLS start at iteration {it}")));
        }
        if step.amax() < tol {
            return Ok(GlmFit { beta, iterations: it, converged: true });
        }
    }
    tracing::warn!("IRLS start did not converge in {maxit} iterations");
    Ok(GlmFit { beta, iterations: maxit, converged: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Cluster, CorrStructure, Family};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_is_least_squares() {
        let model = ModelSpec::new(Family::GaussianIdentity, 3, CorrStructure::Independence).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let clusters: Vec<Cluster> = (0..40)
            .map(|_| {
                let x: Vec<f64> = (0..4 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                Cluster::new(y, x)
            })
            .collect();
        let batch = ClusterBatch::new(0, 3, clusters);
        let fit = fit_irls(&model, &batch, 1e-10, 25).unwrap();
        let x = DMatrix::from_row_slice(160, 3, &batch.clusters.iter().flat_map(|c| c.x.clone()).collect::<Vec<_>>());
        let y = DVector::from_iterator(160, batch.clusters.iter().flat_map(|c| c.y.clone()));
        let ols = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * y;
        assert!((fit.beta - ols).amax() < 1e-10);
    }

    #[test]
    fn collinear_design_is_rank_deficient() {
        let model = ModelSpec::new(Family::BinomialLogit, 2, CorrStructure::Independence).unwrap();
        let clusters = (0..10).map(|i| Cluster::new(vec![f64::from(i % 2)], vec![1.0, 2.0])).collect();
        let batch = ClusterBatch::new(0, 2, clusters);
        assert!(matches!(fit_irls(&model, &batch, 1e-8, 25), Err(Error::RankDeficient { rank: 1, required: 2 })));
    }

    #[test]
    fn logistic_score_vanishes() {
        let model = ModelSpec::new(Family::BinomialLogit, 2, CorrStructure::Independence).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let clusters = (0..200)
            .map(|_| {
                let x: Vec<f64> = (0..3).flat_map(|_| [1.0, rng.random_range(-2.0..2.0)]).collect();
                let y = (0..3).map(|_| f64::from(rng.random_bool(0.4))).collect();
                Cluster::new(y, x)
            })
            .collect();
        let batch = ClusterBatch::new(0, 2, clusters);
        let fit = fit_irls(&model, &batch, 1e-12, 50).unwrap();
        assert!(fit.converged);
        let (_, score) = information(&model, &batch, &fit.beta);
        assert!(score.amax() < 1e-8);
    }
}
