use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Lower-triangular `L` with `L L^T = A`.
pub fn cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::Dimension(format!("cholesky of a {}x{} matrix", a.nrows(), a.ncols())));
    }
    let n = a.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite { minor: j + 1, pivot: diag });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `A x = b` for symmetric positive-definite `A`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let l = cholesky(a)?;
    let n = l.nrows();
    if b.len() != n {
        return Err(Error::Dimension(format!("rhs length {} for a {n}x{n} system", b.len())));
    }
    let mut z = b.clone();
    for i in 0..n {
        for k in 0..i {
            z[i] -= l[(i, k)] * z[k];
        }
        z[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            z[i] -= l[(k, i)] * z[k];
        }
        z[i] /= l[(i, i)];
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrbasis::exchangeable;

    fn rel_reconstruction(a: &DMatrix<f64>, l: &DMatrix<f64>) -> f64 {
        (l * l.transpose() - a).norm() / a.norm()
    }

    #[test]
    fn identity() {
        assert_eq!(cholesky(&DMatrix::identity(3, 3)).unwrap(), DMatrix::identity(3, 3));
    }

    #[test]
    fn two_by_two() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 5.0]);
        let l = cholesky(&a).unwrap();
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2.0]));
    }

    #[test]
    fn exchangeable_reconstruction() {
        let a = exchangeable(5, 0.7);
        let l = cholesky(&a).unwrap();
        assert!(rel_reconstruction(&a, &l) <= 1e-12);
        for i in 0..5 {
            for j in i + 1..5 {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn names_failing_minor() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 2.0, 1.0]);
        match cholesky(&a) {
            Err(Error::NotPositiveDefinite { minor, .. }) => assert_eq!(minor, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spd_solve() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 5.0]);
        let x = solve_spd(&a, &DVector::from_vec(vec![2.0, 1.0])).unwrap();
        assert!((&a * x - DVector::from_vec(vec![2.0, 1.0])).amax() < 1e-15);
    }
}
