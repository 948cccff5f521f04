//! Synthetic streams: exchangeable-correlated Gaussian and binary clusters with
//! correlated covariates, plus scheduled abnormal batches.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corrbasis::exchangeable;
use crate::error::{Error, Result};
use crate::model::{family_functions, Cluster, ClusterBatch, Family};
use crate::numerics::{cholesky, normal_cdf};

pub const DEFAULT_BETA0: [f64; 5] = [0.2, -0.2, 0.2, -0.2, 0.2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contamination {
    /// 1-based batch indices.
    pub positions: Vec<u64>,
    /// Departure subtracted from the second coefficient.
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub family: Family,
    pub beta0: Vec<f64>,
    pub m: usize,
    pub n_b: usize,
    pub batches: u64,
    pub alpha_x: f64,
    pub alpha_y: f64,
    pub phi: f64,
    pub seed: u64,
    #[serde(default)]
    pub contamination: Option<Contamination>,
}

impl SimConfig {
    /// Intercept plus four covariates, `m = 5`, `alpha_x = 0.5`, `alpha_y = 0.7`, `phi = 1`.
    pub fn standard(family: Family, n_b: usize, batches: u64, seed: u64) -> Self {
        Self {
            family,
            beta0: DEFAULT_BETA0.to_vec(),
            m: 5,
            n_b,
            batches,
            alpha_x: 0.5,
            alpha_y: 0.7,
            phi: 1.0,
            seed,
            contamination: None,
        }
    }

    pub fn with_contamination(mut self, positions: Vec<u64>, d: f64) -> Self {
        self.contamination = Some(Contamination { positions, d });
        self
    }

    pub fn p(&self) -> usize {
        self.beta0.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta0.len() < 2 {
            return Err(Error::Invalid("beta0 needs an intercept and at least one covariate".into()));
        }
        if self.m == 0 || self.n_b == 0 {
            return Err(Error::Invalid("cluster size and batch size must be positive".into()));
        }
        for (name, a) in [("alpha_x", self.alpha_x), ("alpha_y", self.alpha_y)] {
            let lower = if self.m > 1 { -1.0 / (self.m as f64 - 1.0) } else { -1.0 };
            if !(a > lower && a < 1.0) {
                return Err(Error::Invalid(format!("{name} = {a} outside ({lower}, 1)")));
            }
        }
        if !(self.phi > 0.0) {
            return Err(Error::Invalid(format!("phi = {} must be positive", self.phi)));
        }
        if let Some(c) = &self.contamination {
            if let Some(bad) = c.positions.iter().find(|&&b| b < 2 || b > self.batches) {
                return Err(Error::Invalid(format!("contamination position {bad} outside 2..={}", self.batches)));
            }
        }
        Ok(())
    }

    /// Coefficients used to generate batch `batch_index` (1-based).
    pub fn batch_beta(&self, batch_index: u64) -> Vec<f64> {
        let mut beta = self.beta0.clone();
        if let Some(c) = &self.contamination {
            if c.positions.contains(&batch_index) {
                beta[1] -= c.d;
            }
        }
        beta
    }
}

/// Independent stream per (seed, batch, cluster).
pub fn cluster_rng(seed: u64, batch_index: u64, cluster: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((batch_index << 32) | (cluster & 0xffff_ffff));
    rng
}

struct Factors {
    lx: DMatrix<f64>,
    ly: DMatrix<f64>,
}

fn factors(cfg: &SimConfig) -> Result<Factors> {
    cfg.validate()?;
    Ok(Factors { lx: cholesky(&exchangeable(cfg.p() - 1, cfg.alpha_x))?, ly: cholesky(&exchangeable(cfg.m, cfg.alpha_y))? })
}

fn correlated_normal(rng: &mut ChaCha8Rng, l: &DMatrix<f64>) -> DVector<f64> {
    let e = DVector::from_fn(l.nrows(), |_, _| StandardNormal.sample(rng));
    l * e
}

fn gen_cluster(cfg: &SimConfig, f: &Factors, beta: &[f64], rng: &mut ChaCha8Rng) -> Cluster {
    let (m, p) = (cfg.m, cfg.p());
    let mut x = Vec::with_capacity(m * p);
    for _ in 0..m {
        x.push(1.0);
        x.extend(correlated_normal(rng, &f.lx).iter());
    }
    let eta: Vec<f64> = (0..m).map(|j| x[j * p..(j + 1) * p].iter().zip(beta).map(|(a, b)| a * b).sum()).collect();
    let z = correlated_normal(rng, &f.ly);
    let y = match cfg.family {
        Family::GaussianIdentity => eta.iter().zip(z.iter()).map(|(e, zj)| e + cfg.phi.sqrt() * zj).collect(),
        Family::BinomialLogit => eta
            .iter()
            .zip(z.iter())
            .map(|(&e, &zj)| f64::from(normal_cdf(zj) <= family_functions(Family::BinomialLogit, e).mu))
            .collect(),
    };
    Cluster::new(y, x)
}

fn gen_batch_with(cfg: &SimConfig, f: &Factors, batch_index: u64) -> ClusterBatch {
    let beta = cfg.batch_beta(batch_index);
    let clusters = (0..cfg.n_b as u64)
        .map(|i| gen_cluster(cfg, f, &beta, &mut cluster_rng(cfg.seed, batch_index, i)))
        .collect();
    ClusterBatch::new(batch_index, cfg.p(), clusters)
}

fn require_family(cfg: &SimConfig, family: Family) -> Result<()> {
    if cfg.family != family {
        return Err(Error::Invalid(format!("config family is {}, generator needs {}", cfg.family.name(), family.name())));
    }
    Ok(())
}

pub fn gen_gaussian_batch(cfg: &SimConfig, batch_index: u64) -> Result<ClusterBatch> {
    require_family(cfg, Family::GaussianIdentity)?;
    Ok(gen_batch_with(cfg, &factors(cfg)?, batch_index))
}

pub fn gen_binary_batch(cfg: &SimConfig, batch_index: u64) -> Result<ClusterBatch> {
    require_family(cfg, Family::BinomialLogit)?;
    Ok(gen_batch_with(cfg, &factors(cfg)?, batch_index))
}

pub fn gen_batch(cfg: &SimConfig, batch_index: u64) -> Result<ClusterBatch> {
    Ok(gen_batch_with(cfg, &factors(cfg)?, batch_index))
}

/// Batches `1..=B`, lazily generated.
pub fn stream_iter(cfg: &SimConfig) -> Result<impl Iterator<Item = ClusterBatch> + '_> {
    let f = factors(cfg)?;
    Ok((1..=cfg.batches).map(move |b| gen_batch_with(cfg, &f, b)))
}

pub fn make_stream(cfg: &SimConfig) -> Result<Vec<ClusterBatch>> {
    Ok(stream_iter(cfg)?.collect())
}
