use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

const EPS: f64 = 1e-16;
const TINY: f64 = 1e-300;
const MAX_TERMS: usize = 100_000;

/// Natural log of the gamma function for `x > 0` (Lanczos approximation).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn log_prefactor(a: f64, x: f64) -> f64 {
    -x + a * x.ln() - ln_gamma(a)
}

fn lower_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut del = 1.0 / a;
    let mut sum = del;
    for _ in 0..MAX_TERMS {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if del.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum
}

/// Modified Lentz evaluation of the continued fraction for the upper tail.
fn upper_fraction(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_TERMS {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn regularized_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        (lower_series(a, x).ln() + log_prefactor(a, x)).exp().min(1.0)
    } else {
        1.0 - (upper_fraction(a, x).ln() + log_prefactor(a, x)).exp()
    }
}

/// Regularized upper incomplete gamma `Q(a, x) = 1 - P(a, x)`, accurate in the far tail.
pub fn regularized_gamma_q(a: f64, x: f64) -> f64 {
    ln_regularized_gamma_q(a, x).exp()
}

fn ln_regularized_gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        let p = (lower_series(a, x).ln() + log_prefactor(a, x)).exp().min(1.0);
        (-p).ln_1p()
    } else {
        upper_fraction(a, x).ln() + log_prefactor(a, x)
    }
}

fn check_df(df: u32) -> Result<f64> {
    if df == 0 {
        return Err(Error::Invalid("chi-square degrees of freedom must be positive".into()));
    }
    Ok(df as f64)
}

/// Chi-square distribution function.
pub fn chi2_cdf(x: f64, df: u32) -> Result<f64> {
    let k = check_df(df)?;
    if x.is_nan() || x < 0.0 {
        return Err(Error::Invalid(format!("chi-square argument must be non-negative, got {x}")));
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    Ok(regularized_gamma_p(0.5 * k, 0.5 * x))
}

/// Chi-square survival function `1 - F(x)`, computed without cancellation.
pub fn chi2_sf(x: f64, df: u32) -> Result<f64> {
    let k = check_df(df)?;
    if x.is_nan() || x < 0.0 {
        return Err(Error::Invalid(format!("chi-square argument must be non-negative, got {x}")));
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    Ok(regularized_gamma_q(0.5 * k, 0.5 * x))
}

fn chi2_pdf(x: f64, k: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    ((0.5 * k - 1.0) * x.ln() - 0.5 * x - 0.5 * k * std::f64::consts::LN_2 - ln_gamma(0.5 * k)).exp()
}

/// Inverse of [`chi2_cdf`]: bracketing followed by safeguarded Newton refinement.
pub fn chi2_quantile(prob: f64, df: u32) -> Result<f64> {
    let k = check_df(df)?;
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::Invalid(format!("probability must lie in (0, 1), got {prob}")));
    }
    let cdf = |x: f64| regularized_gamma_p(0.5 * k, 0.5 * x);
    let mut lo = 0.0;
    let mut hi = k.max(1.0);
    while cdf(hi) < prob {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..500 {
        let f = cdf(x) - prob;
        if f.abs() <= 1e-13 {
            return Ok(x);
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let pdf = chi2_pdf(x, k);
        let newton = if pdf > 0.0 { x - f / pdf } else { f64::NAN };
        x = if newton.is_finite() && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Ok(x)
}

/// Standard normal distribution function.
pub fn normal_cdf(z: f64) -> f64 {
    let tail = 0.5 * regularized_gamma_q(0.5, 0.5 * z * z);
    if z < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Two-sided normal p-value `2 (1 - Phi(|z|))`.
pub fn two_sided_normal_p(z: f64) -> f64 {
    regularized_gamma_q(0.5, 0.5 * z * z)
}

/// Natural log of [`two_sided_normal_p`], finite even when the p-value underflows.
pub fn ln_two_sided_normal_p(z: f64) -> f64 {
    ln_regularized_gamma_q(0.5, 0.5 * z * z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_at_zero() {
        for k in [1, 2, 5, 15, 30] {
            assert_eq!(chi2_cdf(0.0, k).unwrap(), 0.0);
        }
    }

    #[test]
    fn table_values() {
        assert!((chi2_cdf(3.841459, 1).unwrap() - 0.95).abs() < 1e-6);
        assert!((chi2_cdf(24.9958, 15).unwrap() - 0.95).abs() < 1e-6);
        assert!((chi2_quantile(0.95, 1).unwrap() - 3.841459).abs() < 1e-5);
        assert!((chi2_quantile(0.95, 15).unwrap() - 24.9958).abs() < 1e-3);
    }

    #[test]
    fn quantile_roundtrip() {
        for p in [0.005, 0.5, 0.995] {
            for k in [1, 15, 30] {
                let x = chi2_quantile(p, k).unwrap();
                assert!((chi2_cdf(x, k).unwrap() - p).abs() <= 1e-10, "p={p} k={k}");
            }
        }
    }

    #[test]
    fn argument_errors() {
        assert!(chi2_cdf(-1.0, 3).is_err());
        assert!(chi2_quantile(0.0, 3).is_err());
        assert!(chi2_quantile(1.0, 3).is_err());
        assert!(chi2_cdf(1.0, 0).is_err());
    }

    #[test]
    fn monotone_into_unit_interval() {
        for k in [1, 3, 10, 40] {
            let mut prev = 0.0;
            for i in 0..2000 {
                let x = i as f64 * 0.05;
                let c = chi2_cdf(x, k).unwrap();
                assert!((0.0..=1.0).contains(&c));
                assert!(c >= prev);
                prev = c;
            }
        }
    }

    #[test]
    fn normal_tail() {
        assert_eq!(two_sided_normal_p(0.0), 1.0);
        assert!((two_sided_normal_p(1.959964) - 0.05).abs() < 1e-6);
        // Mills-ratio expansion: ln p = ln 2 + ln phi(z) - ln z + ln(1 - 1/z^2 + 3/z^4 - 15/z^6)
        for z in [40.0f64, 50.0, 80.0] {
            let series = 1.0 - 1.0 / z.powi(2) + 3.0 / z.powi(4) - 15.0 / z.powi(6);
            let oracle = std::f64::consts::LN_2 - 0.5 * z * z
                - 0.5 * (2.0 * std::f64::consts::PI).ln()
                - z.ln()
                + series.ln();
            let got = ln_two_sided_normal_p(z);
            assert!((got - oracle).abs() < 1e-9 * oracle.abs(), "z={z}: {got} vs {oracle}");
        }
        let neg_log10 = -ln_two_sided_normal_p(50.0) / std::f64::consts::LN_10;
        assert!((neg_log10 - 544.665).abs() < 1e-3, "{neg_log10}");
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((normal_cdf(-1.959964) - 0.025).abs() < 1e-7);
    }
}
