//! 0/1 basis matrices expanding the inverse working correlation.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use nalgebra::DMatrix;

use crate::model::CorrStructure;

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    pub structure: CorrStructure,
    pub m: usize,
    pub matrices: Vec<DMatrix<f64>>,
}

impl BasisSet {
    /// Effective number of basis matrices for this cluster size.
    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }
}

/// Builds the basis set for a structure and cluster size `m >= 1`.
///
/// Clusters of size one have no off-diagonal pattern, so every structure
/// collapses to `{I_1}`.
pub fn basis_set(structure: CorrStructure, m: usize) -> BasisSet {
    assert!(m >= 1, "cluster size must be positive");
    let mut matrices = vec![DMatrix::identity(m, m)];
    if m > 1 {
        match structure {
            CorrStructure::Independence => {}
            CorrStructure::CompoundSymmetry => {
                matrices.push(DMatrix::from_fn(m, m, |i, j| if i == j { 0.0 } else { 1.0 }));
            }
            CorrStructure::Ar1 => {
                matrices.push(DMatrix::from_fn(m, m, |i, j| if i.abs_diff(j) == 1 { 1.0 } else { 0.0 }));
            }
        }
    }
    BasisSet { structure, m, matrices }
}

type Cache = RwLock<HashMap<(CorrStructure, usize), Arc<BasisSet>>>;

/// Shared, lazily populated basis cache.
pub fn cached_basis_set(structure: CorrStructure, m: usize) -> Arc<BasisSet> {
    static CACHE: OnceLock<Cache> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(hit) = cache.read().expect("basis cache poisoned").get(&(structure, m)) {
        return Arc::clone(hit);
    }
    let mut guard = cache.write().expect("basis cache poisoned");
    Arc::clone(guard.entry((structure, m)).or_insert_with(|| Arc::new(basis_set(structure, m))))
}

/// Exchangeable correlation matrix `R(alpha)` of size `m`.
pub fn exchangeable(m: usize, alpha: f64) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { alpha })
}
