//! Marginal GLM families and per-cluster first/second moment quantities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability clamp for the logit family; keeps `A^{-1/2}` finite under separation.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GaussianIdentity,
    BinomialLogit,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianIdentity => "gaussian-identity",
            Family::BinomialLogit => "binomial-logit",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Family::GaussianIdentity => 0,
            Family::BinomialLogit => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Family::GaussianIdentity),
            1 => Some(Family::BinomialLogit),
            _ => None,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "gaussian-identity" | "linear" => Ok(Family::GaussianIdentity),
            "binomial" | "binomial-logit" | "logistic" => Ok(Family::BinomialLogit),
            other => Err(Error::Invalid(format!("unknown family '{other}'"))),
        }
    }
}

/// Working correlation structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrStructure {
    Independence,
    CompoundSymmetry,
    Ar1,
}

impl CorrStructure {
    pub fn name(self) -> &'static str {
        match self {
            CorrStructure::Independence => "independence",
            CorrStructure::CompoundSymmetry => "compound-symmetry",
            CorrStructure::Ar1 => "ar1",
        }
    }

    pub fn basis_count(self) -> usize {
        match self {
            CorrStructure::Independence => 1,
            CorrStructure::CompoundSymmetry | CorrStructure::Ar1 => 2,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            CorrStructure::Independence => 0,
            CorrStructure::CompoundSymmetry => 1,
            CorrStructure::Ar1 => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(CorrStructure::Independence),
            1 => Some(CorrStructure::CompoundSymmetry),
            2 => Some(CorrStructure::Ar1),
            _ => None,
        }
    }
}

impl std::str::FromStr for CorrStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independence" | "ind" => Ok(CorrStructure::Independence),
            "compound-symmetry" | "cs" | "exchangeable" => Ok(CorrStructure::CompoundSymmetry),
            "ar1" | "ar-1" => Ok(CorrStructure::Ar1),
            other => Err(Error::Invalid(format!("unknown correlation structure '{other}'"))),
        }
    }
}

/// Marginal model: mean/variance family, coefficient count and working structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub p: usize,
    pub corr: CorrStructure,
}

impl ModelSpec {
    pub fn new(family: Family, p: usize, corr: CorrStructure) -> Result<Self> {
        if p == 0 {
            return Err(Error::Invalid("coefficient count p must be at least 1".into()));
        }
        Ok(Self { family, p, corr })
    }

    /// Number of basis matrices S.
    pub fn basis_count(&self) -> usize {
        self.corr.basis_count()
    }

    /// Length of the extended score, `p * S`.
    pub fn score_dim(&self) -> usize {
        self.p * self.basis_count()
    }
}

/// One cluster: outcome vector and its covariate rows (row-major `m x p`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub y: Vec<f64>,
    pub x: Vec<f64>,
}

impl Cluster {
    pub fn new(y: Vec<f64>, x: Vec<f64>) -> Self {
        Self { y, x }
    }

    pub fn size(&self) -> usize {
        self.y.len()
    }

    pub fn row(&self, j: usize, p: usize) -> &[f64] {
        &self.x[j * p..(j + 1) * p]
    }

    /// Covariates as a dense matrix.
    pub fn design(&self, p: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.size(), p, &self.x)
    }
}

/// An ordered set of clusters forming one data batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterBatch {
    pub batch_id: u64,
    pub p: usize,
    pub clusters: Vec<Cluster>,
}

impl ClusterBatch {
    pub fn new(batch_id: u64, p: usize, clusters: Vec<Cluster>) -> Self {
        Self { batch_id, p, clusters }
    }

    pub fn empty(batch_id: u64, p: usize) -> Self {
        Self { batch_id, p, clusters: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn total_observations(&self) -> usize {
        self.clusters.iter().map(Cluster::size).sum()
    }

    pub fn max_cluster_size(&self) -> usize {
        self.clusters.iter().map(Cluster::size).max().unwrap_or(0)
    }

    /// Concatenates several batches into one (used by offline fits and augmented references).
    pub fn concat<'a>(batch_id: u64, p: usize, parts: impl IntoIterator<Item = &'a ClusterBatch>) -> Self {
        let clusters = parts.into_iter().flat_map(|b| b.clusters.iter().cloned()).collect();
        Self { batch_id, p, clusters }
    }

    /// Checks structural invariants against the model.
    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        if self.p != model.p {
            return Err(Error::Dimension(format!(
                "batch {} has p = {} but model expects p = {}",
                self.batch_id, self.p, model.p
            )));
        }
        for (i, c) in self.clusters.iter().enumerate() {
            let m = c.size();
            if m == 0 {
                return Err(Error::Invalid(format!("cluster {i} of batch {} is empty", self.batch_id)));
            }
            if c.x.len() != m * model.p {
                return Err(Error::Dimension(format!(
                    "cluster {i} of batch {}: covariate block has {} entries, expected {}",
                    self.batch_id,
                    c.x.len(),
                    m * model.p
                )));
            }
            if c.y.iter().chain(c.x.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("cluster {i} of batch {}", self.batch_id)));
            }
            if model.family == Family::BinomialLogit && c.y.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Invalid(format!(
                    "cluster {i} of batch {}: binomial outcomes must be 0 or 1",
                    self.batch_id
                )));
            }
        }
        Ok(())
    }
}

/// Mean, its derivative with respect to the linear predictor, and variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilyValues {
    pub mu: f64,
    pub dmu_deta: f64,
    pub variance: f64,
}

#[inline]
pub fn family_functions(family: Family, eta: f64) -> FamilyValues {
    match family {
        Family::GaussianIdentity => FamilyValues { mu: eta, dmu_deta: 1.0, variance: 1.0 },
        Family::BinomialLogit => {
            let mu = if eta >= 0.0 {
                1.0 / (1.0 + (-eta).exp())
            } else {
                let e = eta.exp();
                e / (1.0 + e)
            };
            let mu = mu.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let v = mu * (1.0 - mu);
            FamilyValues { mu, dmu_deta: v, variance: v }
        }
    }
}

/// Per-cluster `mu`, `D = dmu/dbeta^T` and the diagonal of `A^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMoments {
    pub mu: DVector<f64>,
    pub d: DMatrix<f64>,
    pub a_inv_sqrt: DVector<f64>,
}

pub fn cluster_moments(model: &ModelSpec, x: &DMatrix<f64>, beta: &DVector<f64>) -> Result<ClusterMoments> {
    if x.ncols() != model.p || beta.len() != model.p {
        return Err(Error::Dimension(format!(
            "covariates have {} columns and beta has length {}, model expects p = {}",
            x.ncols(),
            beta.len(),
            model.p
        )));
    }
    let m = x.nrows();
    let rows: Vec<f64> = (0..m).flat_map(|j| (0..model.p).map(move |k| (j, k))).map(|(j, k)| x[(j, k)]).collect();
    let mut mu = vec![0.0; m];
    let mut d = vec![0.0; m * model.p];
    let mut a = vec![0.0; m];
    fill_moments(model.family, &rows, model.p, beta.as_slice(), &mut mu, &mut d, &mut a);
    let (mu, d, a) = (DVector::from_vec(mu), DMatrix::from_row_slice(m, model.p, &d), DVector::from_vec(a));
    Ok(ClusterMoments { mu, d, a_inv_sqrt: a })
}

/// Row-major fast path used by the summary kernels: fills `mu`, `d` (m x p) and `a`.
#[inline]
pub(crate) fn fill_moments(family: Family, x: &[f64], p: usize, beta: &[f64], mu: &mut [f64], d: &mut [f64], a: &mut [f64]) {
    let m = mu.len();
    for j in 0..m {
        let row = &x[j * p..(j + 1) * p];
        let eta: f64 = row.iter().zip(beta).map(|(xv, b)| xv * b).sum();
        let fv = family_functions(family, eta);
        mu[j] = fv.mu;
        a[j] = match family {
            Family::GaussianIdentity => 1.0,
            Family::BinomialLogit => 1.0 / fv.variance.sqrt(),
        };
        let drow = &mut d[j * p..(j + 1) * p];
        for (dv, xv) in drow.iter_mut().zip(row) {
            *dv = fv.dmu_deta * xv;
        }
    }
}
