//! Two-share gradient encoding and masked distance computation.
//!
//! A gradient g with mask row r becomes the pair (g+r, g-r); worker 1 sees
//! only the plus shares, worker 2 only the minus shares. Each worker's
//! pairwise squared distance expands to
//!
//! ```text
//! ||Y_i - Y_j||^2 = ||dg||^2 + ||dr||^2 +- 2 dg.dr
//! ```
//!
//! so the sum of the two partial matrices cancels the cross term:
//! 2*||dg||^2 + 2*||dr||^2, which with a constant-distance codebook is an
//! order-preserving affine image of the true distances.

use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ensure_finite, DistanceMatrix, GradientVector};

/// One of the two non-colluding distance workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WorkerId {
    One,
    Two,
}

impl WorkerId {
    pub fn index(self) -> u8 {
        match self {
            WorkerId::One => 1,
            WorkerId::Two => 2,
        }
    }

    pub fn from_index(idx: u8) -> Result<Self> {
        match idx {
            1 => Ok(WorkerId::One),
            2 => Ok(WorkerId::Two),
            other => Err(Error::InvalidConfig(format!(
                "worker id must be 1 or 2, got {other}"
            ))),
        }
    }
}

impl std::fmt::Display for WorkerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "worker-{}", self.index())
    }
}

/// The two masked shares of one client's gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedSharePair {
    pub client_id: u32,
    /// g + r, destined for worker 1.
    pub share_plus: Vec<f64>,
    /// g - r, destined for worker 2.
    pub share_minus: Vec<f64>,
}

impl EncodedSharePair {
    /// Split into per-worker halves; after this no single place holds both.
    pub fn into_worker_shares(self) -> (WorkerShare, WorkerShare) {
        (
            WorkerShare {
                client_id: self.client_id,
                worker: WorkerId::One,
                values: self.share_plus,
            },
            WorkerShare {
                client_id: self.client_id,
                worker: WorkerId::Two,
                values: self.share_minus,
            },
        )
    }
}

/// A single masked share as seen by one worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerShare {
    pub client_id: u32,
    pub worker: WorkerId,
    pub values: Vec<f64>,
}

/// One worker's pairwise distance table over its own shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialDistanceMatrix {
    pub worker: WorkerId,
    pub matrix: DistanceMatrix,
}

/// Mask a gradient with a codebook row: (g+r, g-r).
pub fn encode_client_gradient(g: &GradientVector, mask: &[f64]) -> Result<EncodedSharePair> {
    if g.dim() != mask.len() {
        return Err(Error::DimensionMismatch {
            expected: g.dim(),
            got: mask.len(),
        });
    }
    ensure_finite(&g.values, "gradient")?;
    ensure_finite(mask, "mask")?;
    let share_plus = g.values.iter().zip(mask).map(|(v, r)| v + r).collect();
    let share_minus = g.values.iter().zip(mask).map(|(v, r)| v - r).collect();
    Ok(EncodedSharePair {
        client_id: g.client_id,
        share_plus,
        share_minus,
    })
}

/// Squared distance with the canonical ascending-index summation. Callers
/// validate dimensions and finiteness up front.
#[inline]
fn sq_dist_raw(a: &[f64], b: &[f64]) -> f64 {
    let mut sum = 0.0;
    for k in 0..a.len() {
        let d = a[k] - b[k];
        sum += d * d;
    }
    sum
}

/// Pairwise squared distances over one worker's share set.
///
/// Rows are partitioned into contiguous blocks across up to `threads`
/// workers; every entry uses the same ascending-index summation, so serial
/// and threaded runs agree bit for bit.
pub fn worker_pairwise_distances(
    worker: WorkerId,
    shares: &[WorkerShare],
    threads: usize,
) -> Result<PartialDistanceMatrix> {
    let n = shares.len();
    if n < 2 {
        return Err(Error::TooFewShares { need: 2, got: n });
    }
    let dim = shares[0].values.len();
    for s in shares {
        if s.worker != worker {
            return Err(Error::WorkerIdMismatch {
                expected: worker.index(),
                got: s.worker.index(),
            });
        }
        if s.values.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.values.len(),
            });
        }
        ensure_finite(&s.values, "worker share")?;
    }

    let threads = threads.clamp(1, n);
    let mut matrix = DistanceMatrix::zeros(n);
    if threads == 1 {
        for i in 0..n {
            for j in (i + 1)..n {
                matrix.set_pair(i, j, sq_dist_raw(&shares[i].values, &shares[j].values));
            }
        }
    } else {
        // Each thread owns a contiguous row block and emits the upper
        // triangle of its rows; the mirror fill happens serially below.
        let chunk = n.div_ceil(threads);
        let blocks: Vec<(usize, Vec<Vec<f64>>)> = thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let lo = t * chunk;
                    let hi = ((t + 1) * chunk).min(n);
                    scope.spawn(move || {
                        let mut rows = Vec::with_capacity(hi.saturating_sub(lo));
                        for i in lo..hi {
                            let mut upper = Vec::with_capacity(n - i - 1);
                            for j in (i + 1)..n {
                                upper.push(sq_dist_raw(&shares[i].values, &shares[j].values));
                            }
                            rows.push(upper);
                        }
                        (lo, rows)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for (lo, rows) in blocks {
            for (offset, upper) in rows.into_iter().enumerate() {
                let i = lo + offset;
                for (jdx, v) in upper.into_iter().enumerate() {
                    matrix.set_pair(i, i + 1 + jdx, v);
                }
            }
        }
    }

    Ok(PartialDistanceMatrix { worker, matrix })
}

/// What [`decode_distances`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// p1 + p2 as-is: 2*||dg||^2 + 2*||dr||^2. Selection consumes this
    /// directly; only relative distances matter.
    Raw,
    /// (p1 + p2 - 2C)/2, clamped at zero: an estimate of the true squared
    /// distances, for verification against plaintext.
    Normalized,
}

/// Combine the two partial matrices the workers report.
pub fn decode_distances(
    p1: &PartialDistanceMatrix,
    p2: &PartialDistanceMatrix,
    constant: f64,
    mode: DecodeMode,
) -> Result<DistanceMatrix> {
    if p1.worker != WorkerId::One {
        return Err(Error::WorkerIdMismatch {
            expected: 1,
            got: p1.worker.index(),
        });
    }
    if p2.worker != WorkerId::Two {
        return Err(Error::WorkerIdMismatch {
            expected: 2,
            got: p2.worker.index(),
        });
    }
    let n = p1.matrix.n();
    if p2.matrix.n() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: p2.matrix.n(),
        });
    }
    let mut out = DistanceMatrix::zeros(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let sum = p1.matrix.get(i, j) + p2.matrix.get(i, j);
            let v = match mode {
                DecodeMode::Raw => sum,
                DecodeMode::Normalized => ((sum - 2.0 * constant) / 2.0).max(0.0),
            };
            out.set_pair(i, j, v);
        }
    }
    Ok(out)
}

/// Worker-loop thread budget: MASKEDKRUM_THREADS caps the machine's
/// available parallelism when set.
pub fn max_worker_threads() -> usize {
    let available = thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    match std::env::var("MASKEDKRUM_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
    {
        Some(cap) if cap >= 1 => cap.min(available),
        _ => available,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::build_codebook;
    use crate::model::l2_dist_sq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn grad(id: u32, values: Vec<f64>) -> GradientVector {
        GradientVector::new(id, values).unwrap()
    }

    fn shares_for(
        gradients: &[GradientVector],
        masks: &[Vec<f64>],
    ) -> (Vec<WorkerShare>, Vec<WorkerShare>) {
        let mut plus = Vec::new();
        let mut minus = Vec::new();
        for (g, m) in gradients.iter().zip(masks) {
            let (p, q) = encode_client_gradient(g, m).unwrap().into_worker_shares();
            plus.push(p);
            minus.push(q);
        }
        (plus, minus)
    }

    #[test]
    fn encode_zero_mask_copies_gradient() {
        let g = grad(1, vec![4.0, -2.5, 0.0]);
        let pair = encode_client_gradient(&g, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(pair.share_plus, g.values);
        assert_eq!(pair.share_minus, g.values);
    }

    #[test]
    fn encode_zero_gradient_yields_mask_pair() {
        let g = grad(1, vec![0.0, 0.0]);
        let pair = encode_client_gradient(&g, &[3.0, -7.0]).unwrap();
        assert_eq!(pair.share_plus, vec![3.0, -7.0]);
        assert_eq!(pair.share_minus, vec![-3.0, 7.0]);
    }

    #[test]
    fn encode_componentwise_example() {
        let g = grad(1, vec![1.0, 2.0]);
        let pair = encode_client_gradient(&g, &[10.0, -10.0]).unwrap();
        assert_eq!(pair.share_plus, vec![11.0, -8.0]);
        assert_eq!(pair.share_minus, vec![-9.0, 12.0]);
        // Test-only reconstruction, never part of the protocol.
        let rec: Vec<f64> = pair
            .share_plus
            .iter()
            .zip(&pair.share_minus)
            .map(|(p, m)| (p + m) / 2.0)
            .collect();
        assert_eq!(rec, g.values);
    }

    #[test]
    fn encode_rejects_dimension_mismatch() {
        let g = grad(1, vec![1.0, 2.0]);
        assert!(encode_client_gradient(&g, &[1.0]).is_err());
    }

    #[test]
    fn identical_shares_have_zero_distance() {
        let s = |id| WorkerShare {
            client_id: id,
            worker: WorkerId::One,
            values: vec![1.0, 2.0, 3.0],
        };
        let p = worker_pairwise_distances(WorkerId::One, &[s(1), s(2)], 1).unwrap();
        assert_eq!(p.matrix.get(0, 1), 0.0);
    }

    #[test]
    fn worker_distance_preconditions() {
        let s = |id, worker, values: Vec<f64>| WorkerShare {
            client_id: id,
            worker,
            values,
        };
        // Fewer than two shares.
        assert!(matches!(
            worker_pairwise_distances(WorkerId::One, &[s(1, WorkerId::One, vec![1.0])], 1),
            Err(Error::TooFewShares { need: 2, got: 1 })
        ));
        // A share tagged for the other worker.
        assert!(matches!(
            worker_pairwise_distances(
                WorkerId::One,
                &[
                    s(1, WorkerId::One, vec![1.0]),
                    s(2, WorkerId::Two, vec![2.0])
                ],
                1
            ),
            Err(Error::WorkerIdMismatch {
                expected: 1,
                got: 2
            })
        ));
        // Mismatched dimensions.
        assert!(matches!(
            worker_pairwise_distances(
                WorkerId::One,
                &[
                    s(1, WorkerId::One, vec![1.0, 2.0]),
                    s(2, WorkerId::One, vec![3.0])
                ],
                1
            ),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn decode_rejects_size_mismatch_and_clamps_normalized() {
        let shares = |n: usize, worker| -> Vec<WorkerShare> {
            (1..=n as u32)
                .map(|id| WorkerShare {
                    client_id: id,
                    worker,
                    values: vec![id as f64, 0.0],
                })
                .collect()
        };
        let p1 = worker_pairwise_distances(WorkerId::One, &shares(3, WorkerId::One), 1).unwrap();
        let p2 = worker_pairwise_distances(WorkerId::Two, &shares(2, WorkerId::Two), 1).unwrap();
        assert!(matches!(
            decode_distances(&p1, &p2, 1.0, DecodeMode::Raw),
            Err(Error::DimensionMismatch { .. })
        ));

        // Identical gradients: normalized entries are the clamp of a value
        // within float noise of zero.
        let c = 6.0;
        let cb = build_codebook(3, 8, c, 12).unwrap();
        let gradients: Vec<_> = (1..=3).map(|id| grad(id, vec![0.5; 8])).collect();
        let masks: Vec<_> = (0..3).map(|i| cb.row(i).to_vec()).collect();
        let (plus, minus) = shares_for(&gradients, &masks);
        let p1 = worker_pairwise_distances(WorkerId::One, &plus, 1).unwrap();
        let p2 = worker_pairwise_distances(WorkerId::Two, &minus, 1).unwrap();
        let normalized = decode_distances(&p1, &p2, c, DecodeMode::Normalized).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!(normalized.get(i, j) >= 0.0);
                assert!(normalized.get(i, j) <= 1e-8 * c);
            }
        }
    }

    #[test]
    fn equal_gradients_reveal_codebook_constant() {
        let c = 6.0;
        let cb = build_codebook(4, 16, c, 3).unwrap();
        let g = grad(0, vec![0.25; 16]);
        let gradients: Vec<_> = (1..=4).map(|id| grad(id, g.values.clone())).collect();
        let masks: Vec<_> = (0..4).map(|i| cb.row(i).to_vec()).collect();
        let (plus, _) = shares_for(&gradients, &masks);
        let p1 = worker_pairwise_distances(WorkerId::One, &plus, 1).unwrap();
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert!(
                    (p1.matrix.get(i, j) - c).abs() <= 1e-8 * c,
                    "pair ({i},{j}) = {}",
                    p1.matrix.get(i, j)
                );
            }
        }
    }

    #[test]
    fn worker_distance_matches_three_term_expansion() {
        // Oracle: ||dg||^2 + ||dr||^2 + 2 dg.dr, each term its own loop.
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let dim = 24;
        let cb = build_codebook(3, dim, 4.0, 8).unwrap();
        let gradients: Vec<_> = (1..=3)
            .map(|id| grad(id, (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect()))
            .collect();
        let masks: Vec<_> = (0..3).map(|i| cb.row(i).to_vec()).collect();
        let (plus, _) = shares_for(&gradients, &masks);
        let p1 = worker_pairwise_distances(WorkerId::One, &plus, 1).unwrap();
        for i in 0..3 {
            for j in (i + 1)..3 {
                let dg: Vec<f64> = gradients[i]
                    .values
                    .iter()
                    .zip(&gradients[j].values)
                    .map(|(a, b)| a - b)
                    .collect();
                let dr: Vec<f64> = masks[i].iter().zip(&masks[j]).map(|(a, b)| a - b).collect();
                let norm_dg: f64 = dg.iter().map(|v| v * v).sum();
                let norm_dr: f64 = dr.iter().map(|v| v * v).sum();
                let cross: f64 = dg.iter().zip(&dr).map(|(a, b)| a * b).sum();
                let oracle = norm_dg + norm_dr + 2.0 * cross;
                let got = p1.matrix.get(i, j);
                assert!((got - oracle).abs() <= 1e-9 * oracle.abs().max(1.0));
            }
        }
    }

    #[test]
    fn cross_terms_cancel_for_arbitrary_masks() {
        // Holds for any mask set, not only valid codebooks.
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        let dim = 10;
        let n = 5;
        let gradients: Vec<_> = (1..=n)
            .map(|id| {
                grad(
                    id as u32,
                    (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                )
            })
            .collect();
        let masks: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let (plus, minus) = shares_for(&gradients, &masks);
        let p1 = worker_pairwise_distances(WorkerId::One, &plus, 1).unwrap();
        let p2 = worker_pairwise_distances(WorkerId::Two, &minus, 1).unwrap();
        for i in 0..n {
            for j in (i + 1)..n {
                let sum = p1.matrix.get(i, j) + p2.matrix.get(i, j);
                let dg = l2_dist_sq(&gradients[i].values, &gradients[j].values).unwrap();
                let dr = l2_dist_sq(&masks[i], &masks[j]).unwrap();
                let expect = 2.0 * dg + 2.0 * dr;
                assert!((sum - expect).abs() <= 1e-9 * expect.max(1.0));
            }
        }
    }

    #[test]
    fn decode_equal_gradients_gives_twice_constant() {
        let c = 5.0;
        let cb = build_codebook(5, 16, c, 9).unwrap();
        let gradients: Vec<_> = (1..=5).map(|id| grad(id, vec![1.0; 16])).collect();
        let masks: Vec<_> = (0..5).map(|i| cb.row(i).to_vec()).collect();
        let (plus, minus) = shares_for(&gradients, &masks);
        let p1 = worker_pairwise_distances(WorkerId::One, &plus, 1).unwrap();
        let p2 = worker_pairwise_distances(WorkerId::Two, &minus, 1).unwrap();
        let decoded = decode_distances(&p1, &p2, c, DecodeMode::Raw).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert!((decoded.get(i, j) - 2.0 * c).abs() <= 1e-8 * c);
                }
            }
        }
    }

    #[test]
    fn normalized_decode_matches_plaintext_oracle() {
        let c = 3.0;
        let (n, dim) = (6, 32);
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let cb = build_codebook(n, dim, c, 23).unwrap();
        let gradients: Vec<_> = (1..=n)
            .map(|id| {
                grad(
                    id as u32,
                    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let masks: Vec<_> = (0..n).map(|i| cb.row(i).to_vec()).collect();
        let (plus, minus) = shares_for(&gradients, &masks);
        let p1 = worker_pairwise_distances(WorkerId::One, &plus, 1).unwrap();
        let p2 = worker_pairwise_distances(WorkerId::Two, &minus, 1).unwrap();
        let normalized = decode_distances(&p1, &p2, c, DecodeMode::Normalized).unwrap();
        let plain = DistanceMatrix::from_gradients(&gradients).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert!(
                    (normalized.get(i, j) - plain.get(i, j)).abs() <= 1e-8,
                    "entry ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn decode_rejects_swapped_workers() {
        let s = |worker, id| WorkerShare {
            client_id: id,
            worker,
            values: vec![0.0, 1.0],
        };
        let p1 = worker_pairwise_distances(
            WorkerId::One,
            &[s(WorkerId::One, 1), s(WorkerId::One, 2)],
            1,
        )
        .unwrap();
        let p2 = worker_pairwise_distances(
            WorkerId::Two,
            &[s(WorkerId::Two, 1), s(WorkerId::Two, 2)],
            1,
        )
        .unwrap();
        assert!(matches!(
            decode_distances(&p2, &p1, 1.0, DecodeMode::Raw),
            Err(Error::WorkerIdMismatch { .. })
        ));
    }

    #[test]
    fn permuting_clients_permutes_decoded_matrix() {
        let c = 2.0;
        let (n, dim) = (5, 16);
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let cb = build_codebook(n, dim, c, 5).unwrap();
        let gradients: Vec<_> = (1..=n)
            .map(|id| {
                grad(
                    id as u32,
                    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let decode_for = |order: &[usize]| {
            let masks: Vec<_> = order.iter().map(|&i| cb.row(i).to_vec()).collect();
            let ordered: Vec<_> = order.iter().map(|&i| gradients[i].clone()).collect();
            let (plus, minus) = shares_for(&ordered, &masks);
            let p1 = worker_pairwise_distances(WorkerId::One, &plus, 1).unwrap();
            let p2 = worker_pairwise_distances(WorkerId::Two, &minus, 1).unwrap();
            decode_distances(&p1, &p2, c, DecodeMode::Raw).unwrap()
        };
        let identity = decode_for(&[0, 1, 2, 3, 4]);
        let perm = [2usize, 0, 4, 1, 3];
        let permuted = decode_for(&perm);
        // Same client keeps the same mask row, so entries match exactly.
        for i in 0..n {
            for j in 0..n {
                assert_eq!(
                    permuted.get(i, j).to_bits(),
                    identity.get(perm[i], perm[j]).to_bits()
                );
            }
        }
    }

    #[test]
    fn ranking_survives_decoding() {
        let c = 1.0;
        let (n, dim) = (6, 16);
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let cb = build_codebook(n, dim, c, 2).unwrap();
        let gradients: Vec<_> = (1..=n)
            .map(|id| {
                grad(
                    id as u32,
                    (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect(),
                )
            })
            .collect();
        let masks: Vec<_> = (0..n).map(|i| cb.row(i).to_vec()).collect();
        let (plus, minus) = shares_for(&gradients, &masks);
        let p1 = worker_pairwise_distances(WorkerId::One, &plus, 1).unwrap();
        let p2 = worker_pairwise_distances(WorkerId::Two, &minus, 1).unwrap();
        let decoded = decode_distances(&p1, &p2, c, DecodeMode::Raw).unwrap();
        let plain = DistanceMatrix::from_gradients(&gradients).unwrap();
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                pairs.push((i, j));
            }
        }
        for &(a, b) in &pairs {
            for &(x, y) in &pairs {
                if (plain.get(a, b) - plain.get(x, y)).abs() > 1e-7 * c {
                    assert_eq!(
                        plain.get(a, b) < plain.get(x, y),
                        decoded.get(a, b) < decoded.get(x, y)
                    );
                }
            }
        }
    }

    #[test]
    fn serial_and_threaded_distances_are_bit_identical() {
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        let (n, dim) = (9, 40);
        let shares: Vec<WorkerShare> = (1..=n)
            .map(|id| WorkerShare {
                client_id: id as u32,
                worker: WorkerId::One,
                values: (0..dim).map(|_| rng.gen_range(-10.0..10.0)).collect(),
            })
            .collect();
        let serial = worker_pairwise_distances(WorkerId::One, &shares, 1).unwrap();
        for threads in [2, 3, 8, 64] {
            let parallel = worker_pairwise_distances(WorkerId::One, &shares, threads).unwrap();
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(
                        serial.matrix.get(i, j).to_bits(),
                        parallel.matrix.get(i, j).to_bits()
                    );
                }
            }
        }
    }
}
