//! Streaming estimation for cluster-correlated regression.
//!
//! Quadratic inference function (QIF) and GEE estimates are renewed batch by
//! batch from summary statistics alone; every incoming batch can first be
//! screened against a retained reference batch with a chi-square
//! goodness-of-fit test.

pub mod bench;
pub mod corrbasis;
pub mod error;
pub mod gee;
pub mod glm;
pub mod model;
pub mod monitor;
pub mod numerics;
pub mod qif;
pub mod renew;
pub mod simulate;
pub mod stream;

pub use error::{Error, ErrorKind, Result};
pub use model::{Cluster, ClusterBatch, CorrStructure, Family, ModelSpec};
