//! Binary, little-endian persistence of the renewable state. Layout in `docs/formats.md`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gee::{GeeNuisance, GeeState};
use crate::model::{Cluster, ClusterBatch, CorrStructure, Family, ModelSpec};
use crate::qif::NewtonConfig;
use crate::renew::{Aggregates, RenewConfig, RenewState};

pub const MAGIC: &[u8; 4] = b"RNQF";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;
const FLAG_MONITOR: u8 = 1;
const FLAG_GEE: u8 = 2;
/// Basis matrices are built per cluster size.
const M_POLICY_PER_CLUSTER: u32 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredState {
    pub renew: RenewState,
    pub gee: Option<GeeState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }
    fn matrix(&mut self, m: &DMatrix<f64>) {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Corrupt(format!("payload ends early at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).ok().filter(|&n| n <= self.buf.len()).ok_or_else(|| Error::Corrupt(format!("{what} count {n} is implausible")))
    }
    fn matrix(&mut self, r: usize, c: usize) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_row_slice(r, c, &self.f64s(r * c)?))
    }
}

pub fn encode_state(state: &RenewState, gee: Option<&GeeState>) -> Vec<u8> {
    let model = &state.model;
    let mut w = Writer(Vec::with_capacity(4096));
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u8(model.family.code());
    w.u8(model.corr.code());
    let mut flags = 0;
    if state.config.monitor {
        flags |= FLAG_MONITOR;
    }
    if gee.is_some() {
        flags |= FLAG_GEE;
    }
    w.u8(flags);
    w.u8(0);
    w.u32(model.p as u32);
    w.u32(M_POLICY_PER_CLUSTER);
    w.u32(model.basis_count() as u32);

    w.u64(state.b);
    w.u64(state.agg.n_total);
    w.u64(state.n1);
    w.u64(state.batches_rejected);
    w.f64(state.config.alpha);
    w.f64(state.config.newton.tol);
    w.u32(state.config.newton.maxit);

    w.f64s(state.agg.beta.iter());
    w.f64s(state.agg.score.iter());
    w.matrix(&state.agg.sensitivity);
    w.matrix(&state.agg.variability);

    if let Some(g) = gee {
        w.f64s(g.beta.iter());
        w.matrix(&g.s_tilde);
        w.matrix(&g.v_tilde);
        w.f64(g.nuisance.alpha);
        w.f64(g.nuisance.phi);
        w.u8(u8::from(g.nuisance.clamped));
        w.u64(g.n_total);
        w.u64(g.observations);
        w.u64(g.b);
    }

    let r = &state.reference;
    w.u64(r.batch_id);
    w.u64(r.len() as u64);
    for c in &r.clusters {
        w.u32(c.size() as u32);
        w.f64s(c.y.iter());
        w.f64s(c.x.iter());
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

pub fn decode_state(bytes: &[u8]) -> Result<StoredState> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("missing RNQF magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion { found: version, expected: FORMAT_VERSION });
    }
    if bytes.len() < 8 + CHECKSUM_LEN {
        return Err(Error::Corrupt("checksum mismatch (file truncated)".into()));
    }
    let (payload, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(payload).as_slice() != checksum {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { buf: payload, pos: 8 };
    let family = Family::from_code(r.u8()?).ok_or_else(|| Error::Corrupt("unknown family code".into()))?;
    let corr = CorrStructure::from_code(r.u8()?).ok_or_else(|| Error::Corrupt("unknown correlation code".into()))?;
    let flags = r.u8()?;
    r.u8()?;
    let p = r.u32()? as usize;
    let m_policy = r.u32()?;
    let s = r.u32()? as usize;
    let model = ModelSpec::new(family, p, corr).map_err(|e| Error::Corrupt(e.to_string()))?;
    if m_policy != M_POLICY_PER_CLUSTER || s != model.basis_count() {
        return Err(Error::Corrupt(format!("header declares S = {s} and m policy {m_policy}")));
    }
    let ps = model.score_dim();

    let b = r.u64()?;
    let n_total = r.u64()?;
    let n1 = r.u64()?;
    let batches_rejected = r.u64()?;
    let alpha = r.f64()?;
    let tol = r.f64()?;
    let maxit = r.u32()?;
    let config = RenewConfig { newton: NewtonConfig { tol, maxit }, monitor: flags & FLAG_MONITOR != 0, alpha };

    let agg = Aggregates {
        beta: DVector::from_vec(r.f64s(p)?),
        score: DVector::from_vec(r.f64s(ps)?),
        sensitivity: r.matrix(ps, p)?,
        variability: r.matrix(ps, ps)?,
        n_total,
    };

    let gee = if flags & FLAG_GEE != 0 {
        let beta = DVector::from_vec(r.f64s(p)?);
        let s_tilde = r.matrix(p, p)?;
        let v_tilde = r.matrix(p, p)?;
        let nuisance = GeeNuisance { alpha: r.f64()?, phi: r.f64()?, clamped: r.u8()? != 0 };
        Some(GeeState { model, beta, s_tilde, v_tilde, nuisance, n_total: r.u64()?, observations: r.u64()?, b: r.u64()? })
    } else {
        None
    };

    let batch_id = r.u64()?;
    let n = r.len("reference cluster")?;
    let mut clusters = Vec::with_capacity(n);
    for _ in 0..n {
        let m = r.u32()? as usize;
        let y = r.f64s(m)?;
        let x = r.f64s(m * p)?;
        clusters.push(Cluster::new(y, x));
    }
    if r.pos != payload.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", payload.len() - r.pos)));
    }
    let renew = RenewState { model, config, agg, b, n1, batches_rejected, reference: ClusterBatch::new(batch_id, p, clusters) };
    check_invariants(&renew)?;
    Ok(StoredState { renew, gee })
}

fn check_invariants(state: &RenewState) -> Result<()> {
    let c = &state.agg.variability;
    if c.iter().chain(state.agg.beta.iter()).chain(state.agg.score.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Corrupt("non-finite values in stored state".into()));
    }
    if (c - c.transpose()).amax() > 1e-12 * c.amax().max(1.0) {
        return Err(Error::Corrupt("stored C is not symmetric".into()));
    }
    let eig = c.clone().symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo < -1e-8 * hi.max(1.0) {
        return Err(Error::Corrupt(format!("stored C is not positive semidefinite (eigenvalue {lo:e})")));
    }
    Ok(())
}

/// Writes through a temporary file in the same directory, then renames.
pub fn save_state(state: &RenewState, gee: Option<&GeeState>, path: &Path) -> Result<()> {
    if state.agg.beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("refusing to save a non-finite state".into()));
    }
    let bytes = encode_state(state, gee);
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<StoredState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_state(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gee::{init_gee, renew_gee_update};
    use crate::renew::init_state;
    use crate::simulate::{make_stream, SimConfig};

    fn sample() -> (RenewState, GeeState) {
        let model = ModelSpec::new(Family::BinomialLogit, 5, CorrStructure::CompoundSymmetry).unwrap();
        let stream = make_stream(&SimConfig::standard(Family::BinomialLogit, 60, 3, 21)).unwrap();
        let (mut state, _) = init_state(&model, stream[0].clone(), RenewConfig::default()).unwrap();
        let (mut gee, _) = init_gee(&model, &stream[0], &NewtonConfig::default()).unwrap();
        for b in &stream[1..] {
            state.update(b).unwrap();
            gee = renew_gee_update(&gee, b, &NewtonConfig::default()).unwrap().0;
        }
        state.record_rejection();
        (state, gee)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (state, gee) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.rnqf");
        save_state(&state, Some(&gee), &path).unwrap();
        let back = load_state(&path).unwrap();
        assert_eq!(back.renew, state);
        assert_eq!(back.gee.as_ref(), Some(&gee));
        assert_eq!(encode_state(&back.renew, back.gee.as_ref()), std::fs::read(&path).unwrap());
        save_state(&state, None, &path).unwrap();
        assert_eq!(load_state(&path).unwrap().gee, None);
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let (state, _) = sample();
        let bytes = encode_state(&state, None);
        for cut in [bytes.len() - 1, bytes.len() / 2, 40, 9] {
            assert!(matches!(decode_state(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(decode_state(&flipped), Err(Error::Corrupt(_))));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let (state, _) = sample();
        let mut bytes = encode_state(&state, None);
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode_state(&bytes), Err(Error::UnsupportedVersion { found: 2, expected: 1 })));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_state(Path::new("/nonexistent/dir/state.rnqf")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/state.rnqf"));
    }
}
