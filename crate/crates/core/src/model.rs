//! Domain types and exact vector arithmetic shared by every other module.
//!
//! All arithmetic is 64-bit floating point. Sums run in ascending index
//! order so results are reproducible across runs and thread counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A client's model update: d values plus the submitting client's identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    pub client_id: u32,
    pub values: Vec<f64>,
}

impl GradientVector {
    /// Build a gradient vector, rejecting NaN/Inf entries.
    pub fn new(client_id: u32, values: Vec<f64>) -> Result<Self> {
        ensure_finite(&values, "gradient values")?;
        Ok(Self { client_id, values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Positive and finite, or a NonPositive error. Rejects NaN and infinities.
pub(crate) fn require_positive(what: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::NonPositive { what, value })
    }
}

/// Check every entry is finite; index of the first offender is reported.
pub(crate) fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite {
            what: format!("{what} (index {i})"),
        }),
        None => Ok(()),
    }
}

/// Squared L2 distance between two equal-length vectors.
///
/// Summation runs over ascending indices; exact for integer-valued inputs
/// representable in 64-bit floats.
pub fn l2_dist_sq(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    ensure_finite(a, "left operand")?;
    ensure_finite(b, "right operand")?;
    let mut sum = 0.0;
    for k in 0..a.len() {
        let d = a[k] - b[k];
        sum += d * d;
    }
    Ok(sum)
}

/// Scale a gradient down to the given norm bound if it exceeds it.
///
/// Gradients with norm at or below the bound are returned unchanged.
pub fn clip_to_norm(g: &GradientVector, bound: f64) -> Result<GradientVector> {
    require_positive("clip bound", bound)?;
    let norm = g.norm();
    if norm <= bound {
        return Ok(g.clone());
    }
    let scale = bound / norm;
    Ok(GradientVector {
        client_id: g.client_id,
        values: g.values.iter().map(|v| v * scale).collect(),
    })
}

/// System-wide parameters: N clients, f Byzantine, top-K selection, and the
/// codebook/noise configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemConfig {
    pub n_clients: usize,
    pub n_byzantine: usize,
    pub select_k: usize,
    pub dim: usize,
    pub codebook_constant: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

impl SystemConfig {
    /// Default selection count: N - f - 2, which stays below the honest
    /// client count whenever N >= 2f+3 holds.
    pub fn default_select_k(n_clients: usize, n_byzantine: usize) -> usize {
        n_clients.saturating_sub(n_byzantine + 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients < 2 * self.n_byzantine + 3 {
            return Err(Error::ResilienceViolated {
                n: self.n_clients,
                f: self.n_byzantine,
            });
        }
        if self.select_k < 1 || self.select_k > self.n_clients - self.n_byzantine {
            return Err(Error::InvalidConfig(format!(
                "select_k must satisfy 1 <= K <= N-f: K={}, N={}, f={}",
                self.select_k, self.n_clients, self.n_byzantine
            )));
        }
        if self.dim < self.n_clients {
            return Err(Error::RankDeficient {
                n: self.n_clients,
                dim: self.dim,
            });
        }
        require_positive("codebook constant", self.codebook_constant)?;
        require_positive("noise sigma", self.noise_sigma)?;
        if let Some(c) = self.clip_norm {
            require_positive("clip norm", c)?;
        }
        Ok(())
    }
}

/// Symmetric N x N table of squared distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistanceMatrix")]
pub struct DistanceMatrix {
    n: usize,
    entries: Vec<f64>,
}

#[derive(Deserialize)]
struct RawDistanceMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl TryFrom<RawDistanceMatrix> for DistanceMatrix {
    type Error = String;

    fn try_from(raw: RawDistanceMatrix) -> std::result::Result<Self, String> {
        if raw.entries.len() != raw.n * raw.n {
            return Err(format!(
                "distance matrix needs {} entries for n={}, got {}",
                raw.n * raw.n,
                raw.n,
                raw.entries.len()
            ));
        }
        Ok(Self {
            n: raw.n,
            entries: raw.entries,
        })
    }
}

/// Negative entries beyond this absolute slack fail validation.
pub const DISTANCE_NONNEG_TOL: f64 = 1e-9;

impl DistanceMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            entries: vec![0.0; n * n],
        }
    }

    /// Number of clients (rows).
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    /// Set both (i,j) and (j,i); the diagonal stays zero.
    pub fn set_pair(&mut self, i: usize, j: usize, value: f64) {
        if i == j {
            return;
        }
        self.entries[i * self.n + j] = value;
        self.entries[j * self.n + i] = value;
    }

    /// Row i as a slice of length n.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    /// Pairwise squared distances of a gradient set, each pair computed
    /// once and mirrored.
    pub fn from_gradients(gradients: &[GradientVector]) -> Result<Self> {
        let n = gradients.len();
        let mut dm = Self::zeros(n);
        for i in 0..n {
            for j in (i + 1)..n {
                let d = l2_dist_sq(&gradients[i].values, &gradients[j].values)?;
                dm.set_pair(i, j, d);
            }
        }
        Ok(dm)
    }

    /// Check symmetry, zero diagonal, and non-negativity (within
    /// [`DISTANCE_NONNEG_TOL`] absolute).
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            if self.get(i, i) != 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "distance matrix diagonal nonzero at {i}: {}",
                    self.get(i, i)
                )));
            }
            for j in (i + 1)..self.n {
                let a = self.get(i, j);
                let b = self.get(j, i);
                if a != b {
                    return Err(Error::AsymmetricMatrix {
                        i,
                        j,
                        left: a,
                        right: b,
                    });
                }
                if a < -DISTANCE_NONNEG_TOL {
                    return Err(Error::NegativeDistance { i, j, value: a });
                }
            }
        }
        Ok(())
    }

    /// Reorder rows/columns by `perm`, where entry `(i,j)` of the result is
    /// entry `(perm[i], perm[j])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: perm.len(),
            });
        }
        let mut out = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out.entries[i * self.n + j] = self.get(perm[i], perm[j]);
            }
        }
        Ok(out)
    }
}
