//! Dense kernels shared by every estimator: generalized inverse with numerical
//! rank, Cholesky factorization and chi-square / normal distribution functions.

mod chi2;
mod cholesky;
mod pinv;

pub use chi2::{
    chi2_cdf, chi2_quantile, chi2_sf, ln_gamma, ln_two_sided_normal_p, normal_cdf, regularized_gamma_p,
    regularized_gamma_q, two_sided_normal_p,
};
pub use cholesky::{cholesky, solve_spd};
pub use pinv::{default_rtol, is_symmetric_psd, pseudo_inverse, pseudo_inverse_with, PinvResult};
