//! Noise codebooks: N mask vectors whose pairwise squared L2 distances all
//! equal a configured constant C.
//!
//! Construction draws N i.i.d. zero-mean Gaussian d-vectors, orthogonalizes
//! them with modified Gram-Schmidt plus one re-orthogonalization pass, and
//! rescales every vector to norm sqrt(C/2). Orthogonality then forces
//! ||r_i - r_j||^2 = C/2 + C/2 - 0 = C for every pair.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// File magic for the on-disk codebook format.
pub const NCBK_MAGIC: &[u8; 4] = b"NCBK";
/// Current on-disk format version.
pub const NCBK_VERSION: u16 = 1;
/// Header size in bytes: magic | version | reserved | n | dim | constant | seed.
pub const NCBK_HEADER_LEN: usize = 32;

/// Residual norms below this before rescaling count as a degenerate draw.
const DEGENERACY_THRESHOLD: f64 = 1e-12;
/// Fresh-draw retries after a degenerate orthogonalization.
const MAX_RETRIES: u32 = 3;

/// Relative tolerance (times C) used by [`verify_codebook`].
pub const CODEBOOK_TOL: f64 = 1e-8;

/// N noise vectors with constant pairwise squared distance C.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCodebook {
    n: usize,
    dim: usize,
    constant: f64,
    seed: u64,
    vectors: Vec<Vec<f64>>,
}

impl NoiseCodebook {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Row i (the mask assigned to the client holding row i).
    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// Serialize to the NCBK byte format (little-endian throughout).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(NCBK_HEADER_LEN + self.n * self.dim * 8);
        out.extend_from_slice(NCBK_MAGIC);
        out.extend_from_slice(&NCBK_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.constant.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for row in &self.vectors {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < NCBK_HEADER_LEN {
            return Err(Error::CodebookFormat(format!(
                "file too short: {} bytes < {NCBK_HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if &bytes[0..4] != NCBK_MAGIC {
            return Err(Error::CodebookFormat("bad magic, expected NCBK".into()));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != NCBK_VERSION {
            return Err(Error::CodebookFormat(format!(
                "unsupported version {version}"
            )));
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let constant = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let seed = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let expected = NCBK_HEADER_LEN + n * dim * 8;
        if bytes.len() != expected {
            return Err(Error::CodebookFormat(format!(
                "body length mismatch: expected {expected} bytes for {n}x{dim}, got {}",
                bytes.len()
            )));
        }
        let mut vectors = Vec::with_capacity(n);
        let mut off = NCBK_HEADER_LEN;
        for i in 0..n {
            let mut row = Vec::with_capacity(dim);
            for _ in 0..dim {
                let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::CodebookFormat(format!(
                        "non-finite entry in row {i}"
                    )));
                }
                row.push(v);
                off += 8;
            }
            vectors.push(row);
        }
        Ok(Self {
            n,
            dim,
            constant,
            seed,
            vectors,
        })
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Build a codebook of `n` vectors in `dim` dimensions with pairwise
/// squared distance `constant`, deterministically from `seed`.
///
/// Requires `dim >= n`: n mutually orthogonal nonzero vectors cannot exist
/// in fewer than n dimensions. Degenerate draws (residual norm below 1e-12
/// during orthogonalization) trigger fresh draws, up to 3 retries.
pub fn build_codebook(n: usize, dim: usize, constant: f64, seed: u64) -> Result<NoiseCodebook> {
    if n == 0 {
        return Err(Error::InvalidConfig("codebook needs n >= 1".into()));
    }
    if dim < n {
        return Err(Error::RankDeficient { n, dim });
    }
    crate::model::require_positive("codebook constant", constant)?;

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut last_residual = f64::NAN;
    for _attempt in 0..=MAX_RETRIES {
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        match orthonormalize(&draws) {
            Ok(basis) => {
                // Scaling is the only step that depends on C, so codebooks
                // built from the same seed differ only by this factor.
                let target = (constant / 2.0).sqrt();
                let vectors = basis
                    .into_iter()
                    .map(|q| q.into_iter().map(|v| v * target).collect())
                    .collect();
                return Ok(NoiseCodebook {
                    n,
                    dim,
                    constant,
                    seed,
                    vectors,
                });
            }
            Err(residual) => last_residual = residual,
        }
    }
    Err(Error::DegenerateDraw {
        residual: last_residual,
        attempts: MAX_RETRIES + 1,
    })
}

/// Modified Gram-Schmidt with one re-orthogonalization pass, returning unit
/// vectors. Err carries the offending residual norm.
fn orthonormalize(draws: &[Vec<f64>]) -> std::result::Result<Vec<Vec<f64>>, f64> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(draws.len());
    for draw in draws {
        let mut v = draw.clone();
        // Two projection passes; the second recovers the orthogonality the
        // first loses to cancellation at large dim.
        for _ in 0..2 {
            for q in &basis {
                let dot = dot_product(&v, q);
                for (vk, qk) in v.iter_mut().zip(q) {
                    *vk -= dot * qk;
                }
            }
        }
        let norm = dot_product(&v, &v).sqrt();
        if norm < DEGENERACY_THRESHOLD {
            return Err(norm);
        }
        for vk in v.iter_mut() {
            *vk /= norm;
        }
        basis.push(v);
    }
    Ok(basis)
}

fn dot_product(a: &[f64], b: &[f64]) -> f64 {
    let mut sum = 0.0;
    for k in 0..a.len() {
        sum += a[k] * b[k];
    }
    sum
}

/// Exhaustive verification report over all vector pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodebookReport {
    pub n: usize,
    pub dim: usize,
    pub constant: f64,
    /// max over i != j of | ||r_i - r_j||^2 - C |
    pub max_pair_deviation: f64,
    /// max over i of | ||r_i||^2 - C/2 |
    pub max_norm_deviation: f64,
    /// max over i != j of | r_i . r_j |
    pub max_abs_dot: f64,
    /// Absolute tolerance applied to all three checks: 1e-8 * C.
    pub tolerance: f64,
    pub pairs_checked: usize,
    pub pass: bool,
}

/// Check every pair of a codebook against its declared constant.
///
/// A codebook with zero or one vector passes vacuously.
pub fn verify_codebook(cb: &NoiseCodebook) -> CodebookReport {
    let c = cb.constant();
    let tol = CODEBOOK_TOL * c;
    let mut max_pair = 0.0f64;
    let mut max_norm = 0.0f64;
    let mut max_dot = 0.0f64;
    let mut pairs = 0;
    for i in 0..cb.n() {
        let norm_sq = dot_product(cb.row(i), cb.row(i));
        max_norm = max_norm.max((norm_sq - c / 2.0).abs());
        for j in (i + 1)..cb.n() {
            let mut dist = 0.0;
            for k in 0..cb.dim() {
                let d = cb.row(i)[k] - cb.row(j)[k];
                dist += d * d;
            }
            max_pair = max_pair.max((dist - c).abs());
            max_dot = max_dot.max(dot_product(cb.row(i), cb.row(j)).abs());
            pairs += 1;
        }
    }
    CodebookReport {
        n: cb.n(),
        dim: cb.dim(),
        constant: c,
        max_pair_deviation: max_pair,
        max_norm_deviation: max_norm,
        max_abs_dot: max_dot,
        tolerance: tol,
        pairs_checked: pairs,
        pass: max_pair <= tol && max_norm <= tol && max_dot <= tol,
    }
}

/// Per-coordinate Gaussian scale the codebook is equivalent to: sqrt(C/2d).
///
/// Fixed-norm codebook rows approach i.i.d. Gaussian vectors of this scale
/// as dim grows; the leakage bound consumes this as its sigma.
pub fn equivalent_sigma(cb: &NoiseCodebook) -> f64 {
    sigma_for_constant(cb.constant(), cb.dim())
}

/// [`equivalent_sigma`] from the raw (C, d) parameters.
pub fn sigma_for_constant(constant: f64, dim: usize) -> f64 {
    (constant / (2.0 * dim as f64)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_is_orthogonal_unit_pair() {
        let cb = build_codebook(2, 2, 2.0, 99).unwrap();
        let r0 = cb.row(0);
        let r1 = cb.row(1);
        assert!((dot_product(r0, r0) - 1.0).abs() <= 1e-12);
        assert!((dot_product(r1, r1) - 1.0).abs() <= 1e-12);
        assert!(dot_product(r0, r1).abs() <= 1e-12);
        let dist: f64 = (0..2).map(|k| (r0[k] - r1[k]).powi(2)).sum();
        assert!((dist - 2.0).abs() <= 1e-12);
    }

    #[test]
    fn eight_in_sixtyfour_passes_verification() {
        let cb = build_codebook(8, 64, 10.0, 7).unwrap();
        let report = verify_codebook(&cb);
        assert!(report.pass, "report: {report:?}");
        assert_eq!(report.pairs_checked, 28);
        assert!(report.max_pair_deviation <= 1e-8 * 10.0);
    }

    #[test]
    fn rank_error_when_dim_below_n() {
        assert!(matches!(
            build_codebook(3, 2, 1.0, 1),
            Err(Error::RankDeficient { n: 3, dim: 2 })
        ));
    }

    #[test]
    fn doubled_vector_fails_with_norm_deviation() {
        let mut cb = build_codebook(4, 16, 2.0, 5).unwrap();
        for v in cb.vectors[1].iter_mut() {
            *v *= 2.0;
        }
        let report = verify_codebook(&cb);
        assert!(!report.pass);
        // ||2r||^2 = 4 * C/2, so the deviation is |4C/2 - C/2| = 1.5C.
        let c = cb.constant();
        assert!((report.max_norm_deviation - 1.5 * c).abs() <= 1e-6 * c);
    }

    #[test]
    fn singleton_codebook_passes_vacuously() {
        let cb = build_codebook(1, 4, 3.0, 11).unwrap();
        let report = verify_codebook(&cb);
        assert!(report.pass);
        assert_eq!(report.pairs_checked, 0);
        assert_eq!(report.max_pair_deviation, 0.0);
    }

    #[test]
    fn equivalent_sigma_closed_forms() {
        let cb = build_codebook(1, 1, 2.0, 0).unwrap();
        assert_eq!(equivalent_sigma(&cb), 1.0);
        let cb = build_codebook(2, 100, 200.0, 0).unwrap();
        assert_eq!(equivalent_sigma(&cb), 1.0);
        let cb = build_codebook(2, 64, 8.0, 0).unwrap();
        assert_eq!(equivalent_sigma(&cb), 0.25);
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_codebook(6, 32, 5.0, 1234).unwrap();
        let b = build_codebook(6, 32, 5.0, 1234).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn scaling_constant_by_four_doubles_vectors() {
        let a = build_codebook(5, 24, 3.0, 77).unwrap();
        let b = build_codebook(5, 24, 12.0, 77).unwrap();
        for (ra, rb) in a.rows().iter().zip(b.rows()) {
            for (&va, &vb) in ra.iter().zip(rb) {
                assert!((vb - 2.0 * va).abs() <= 1e-12 * va.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn entries_approach_equivalent_sigma() {
        // d >= 64*N: empirical std of all entries within 10% of sqrt(C/2d).
        for seed in [1u64, 2, 3] {
            let (n, dim, c) = (4, 256, 8.0);
            let cb = build_codebook(n, dim, c, seed).unwrap();
            let all: Vec<f64> = cb.rows().iter().flatten().copied().collect();
            let mean = all.iter().sum::<f64>() / all.len() as f64;
            let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (all.len() - 1) as f64;
            let expect = (c / (2.0 * dim as f64)).sqrt();
            let got = var.sqrt();
            assert!(
                (got - expect).abs() <= 0.10 * expect,
                "seed {seed}: std {got} vs {expect}"
            );
        }
    }

    #[test]
    fn file_round_trip_preserves_bytes() {
        let cb = build_codebook(3, 8, 1.5, 21).unwrap();
        let bytes = cb.to_bytes();
        assert_eq!(bytes.len(), NCBK_HEADER_LEN + 3 * 8 * 8);
        assert_eq!(&bytes[0..4], b"NCBK");
        let back = NoiseCodebook::from_bytes(&bytes).unwrap();
        assert_eq!(back, cb);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn from_bytes_rejects_garbage() {
        assert!(NoiseCodebook::from_bytes(b"nope").is_err());
        let cb = build_codebook(2, 4, 1.0, 0).unwrap();
        let mut bytes = cb.to_bytes();
        bytes[0] = b'X';
        assert!(NoiseCodebook::from_bytes(&bytes).is_err());
        let mut truncated = cb.to_bytes();
        truncated.pop();
        assert!(NoiseCodebook::from_bytes(&truncated).is_err());
    }
}
