use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Moore-Penrose inverse of a symmetric PSD matrix together with its numerical rank.
#[derive(Debug, Clone, PartialEq)]
pub struct PinvResult {
    pub pinv: DMatrix<f64>,
    pub rank: usize,
    pub tolerance_used: f64,
}

/// Relative eigenvalue cutoff used when none is supplied: `1e-10 * dim`.
pub fn default_rtol(dim: usize) -> f64 {
    1e-10 * dim.max(1) as f64
}

pub fn pseudo_inverse(a: &DMatrix<f64>) -> Result<PinvResult> {
    pseudo_inverse_with(a, default_rtol(a.nrows()))
}

/// Spectral generalized inverse; eigenvalues at or below `rtol * lambda_max`
/// are treated as zero.
pub fn pseudo_inverse_with(a: &DMatrix<f64>, rtol: f64) -> Result<PinvResult> {
    if !a.is_square() {
        return Err(Error::Dimension(format!("pseudo-inverse of a {}x{} matrix", a.nrows(), a.ncols())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pseudo-inverse input".into()));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(PinvResult { pinv: DMatrix::zeros(0, 0), rank: 0, tolerance_used: 0.0 });
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lambda_max = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let cutoff = rtol * lambda_max;
    let mut pinv = DMatrix::zeros(n, n);
    let mut rank = 0;
    if lambda_max > 0.0 {
        for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda > cutoff {
                rank += 1;
                let v = eig.eigenvectors.column(k);
                pinv.ger(1.0 / lambda, &v, &v, 1.0);
            }
        }
    }
    // exact symmetry of the reconstruction
    let pinv = (&pinv + pinv.transpose()) * 0.5;
    Ok(PinvResult { pinv, rank, tolerance_used: cutoff })
}

/// Symmetric to `tol * max|a|` with no eigenvalue below `-tol * lambda_max`.
pub fn is_symmetric_psd(a: &DMatrix<f64>, tol: f64) -> bool {
    if !a.is_square() || a.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    if (a - a.transpose()).amax() > tol * scale {
        return false;
    }
    let eig = a.clone().symmetric_eigenvalues();
    let hi = eig.iter().copied().fold(0.0f64, f64::max);
    eig.iter().all(|&v| v >= -tol * hi.max(scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identity() {
        let r = pseudo_inverse(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(r.rank, 4);
        assert!((r.pinv - DMatrix::<f64>::identity(4, 4)).amax() < 1e-14);
    }

    #[test]
    fn rank_one() {
        let g = nalgebra::DVector::from_vec(vec![5.0, 4.0]);
        let a = &g * g.transpose();
        let r = pseudo_inverse(&a).unwrap();
        assert_eq!(r.rank, 1);
        let expected = &a / g.norm_squared().powi(2);
        assert!((r.pinv - expected).amax() < 1e-15);
    }

    #[test]
    fn zero_matrix() {
        let r = pseudo_inverse(&DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(r.rank, 0);
        assert_eq!(r.pinv, DMatrix::zeros(3, 3));
    }

    #[test]
    fn psd_check() {
        assert!(is_symmetric_psd(&DMatrix::identity(3, 3), 1e-12));
        assert!(is_symmetric_psd(&DMatrix::zeros(2, 2), 1e-12));
        assert!(!is_symmetric_psd(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]), 1e-12));
        assert!(!is_symmetric_psd(&DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), 1e-12));
    }

    #[test]
    fn non_finite_rejected() {
        let mut a = DMatrix::identity(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(pseudo_inverse(&a).is_err());
    }

    /// `Q diag(lambda) Q^T` with `k` eigenvalues in [0.5, 5] and the rest zero.
    pub(crate) fn random_psd(rng: &mut impl Rng, n: usize, k: usize) -> DMatrix<f64> {
        let z = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let q = z.qr().q();
        let lambda = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(n, |i, _| {
            if i < k { rng.random_range(0.5..5.0) } else { 0.0 }
        }));
        &q * lambda * q.transpose()
    }

    #[test]
    fn penrose_conditions_on_random_psd() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let n = rng.random_range(1..=20);
            let k = rng.random_range(0..=n);
            let a = random_psd(&mut rng, n, k);
            let r = pseudo_inverse(&a).unwrap();
            assert_eq!(r.rank, k);
            let ap = &a * &r.pinv;
            let pa = &r.pinv * &a;
            assert!((&ap * &a - &a).amax() <= 1e-8);
            assert!((&pa * &r.pinv - &r.pinv).amax() <= 1e-8);
            assert!((&ap - ap.transpose()).amax() <= 1e-8);
            assert!((&pa - pa.transpose()).amax() <= 1e-8);
        }
    }
}
