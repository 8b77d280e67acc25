//! Desk-scale federated training over a least-squares toy task, with
//! pluggable Byzantine attack models.
//!
//! Each client holds a private dataset (X_i, y_i) generated from a shared
//! ground-truth weight vector plus per-client Gaussian label noise, so the
//! honest gradient has the closed form (2/m) X^T (Xw - y). Byzantine
//! clients (ids 1..=f) corrupt the gradient they submit; they cannot touch
//! the distance computation, which runs enclave-side on decoded shares.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::krum::aggregate_selected;
use crate::krum::{ClientScore, ScoreTable, SelectionResult};
use crate::model::{clip_to_norm, GradientVector};
use crate::protocol::{
    derive_seed, GradientSource, RoundOutcome, RoundStatus, ScenarioConfig, Simulator,
};

// ---------------------------------------------------------------------------
// Attack models
// ---------------------------------------------------------------------------

/// How a Byzantine client corrupts the gradient it submits.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackModel {
    #[default]
    None,
    /// Send -scale * g.
    SignFlip { scale: f64 },
    /// Send i.i.d. Gaussian noise, N(mean, scale^2) per coordinate.
    Gaussian {
        #[serde(default)]
        mean: f64,
        scale: f64,
    },
    /// Send the constant vector [scale; d].
    Constant { scale: f64 },
    /// Send scale * g.
    Scaled { scale: f64 },
}

impl AttackModel {
    fn check_finite(&self) -> Result<()> {
        let params = match self {
            AttackModel::None => vec![],
            AttackModel::SignFlip { scale }
            | AttackModel::Scaled { scale }
            | AttackModel::Constant { scale } => vec![*scale],
            AttackModel::Gaussian { mean, scale } => vec![*mean, *scale],
        };
        crate::model::ensure_finite(&params, "attack parameters")
    }
}

/// Apply an attack to the gradient a client is about to submit.
pub fn apply_attack(
    g: &GradientVector,
    attack: &AttackModel,
    rng: &mut impl Rng,
) -> Result<GradientVector> {
    attack.check_finite()?;
    let values = match attack {
        AttackModel::None => g.values.clone(),
        AttackModel::SignFlip { scale } => g.values.iter().map(|v| -scale * v).collect(),
        AttackModel::Scaled { scale } => g.values.iter().map(|v| scale * v).collect(),
        AttackModel::Constant { scale } => vec![*scale; g.dim()],
        AttackModel::Gaussian { mean, scale } => {
            let dist = Normal::new(*mean, scale.abs()).map_err(|_| Error::NonFinite {
                what: "gaussian attack scale".into(),
            })?;
            (0..g.dim()).map(|_| rng.sample(dist)).collect()
        }
    };
    GradientVector::new(g.client_id, values)
}

// ---------------------------------------------------------------------------
// Toy task
// ---------------------------------------------------------------------------

/// One client's private regression data.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub client_id: u32,
    /// m rows of d features.
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

/// Linear least-squares task shared by all clients: convex, with an
/// analytic gradient that finite differences can verify.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub dim: usize,
    /// The ground-truth weights the datasets were generated from.
    pub truth: Vec<f64>,
    pub clients: Vec<ClientData>,
}

impl ToyTask {
    /// Deterministic task generation. Feature entries are standard normal,
    /// targets are x . truth plus N(0, data_noise^2) label noise, truth
    /// entries are N(0, 1/d) so its norm is about 1.
    pub fn generate(
        n_clients: usize,
        dim: usize,
        samples_per_client: usize,
        data_noise: f64,
        seed: u64,
    ) -> Self {
        let mut truth_rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "task-truth", 0));
        let scale = 1.0 / (dim as f64).sqrt();
        let truth: Vec<f64> = (0..dim)
            .map(|_| truth_rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        let clients = (1..=n_clients as u32)
            .map(|client_id| {
                let mut rng =
                    ChaCha12Rng::seed_from_u64(derive_seed(seed, "task-data", client_id as u64));
                let inputs: Vec<Vec<f64>> = (0..samples_per_client)
                    .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
                    .collect();
                let targets: Vec<f64> = inputs
                    .iter()
                    .map(|x| {
                        let clean: f64 = x.iter().zip(&truth).map(|(a, b)| a * b).sum();
                        clean + rng.sample::<f64, _>(StandardNormal) * data_noise
                    })
                    .collect();
                ClientData {
                    client_id,
                    inputs,
                    targets,
                }
            })
            .collect();
        Self {
            dim,
            truth,
            clients,
        }
    }

    fn client(&self, client_id: u32) -> Result<&ClientData> {
        self.clients
            .iter()
            .find(|c| c.client_id == client_id)
            .ok_or(Error::MissingGradient(client_id))
    }

    /// Exact least-squares gradient (2/m) X^T (Xw - y) at `weights`.
    pub fn honest_gradient(&self, client_id: u32, weights: &[f64]) -> Result<GradientVector> {
        let data = self.client(client_id)?;
        if data.inputs.is_empty() {
            return Err(Error::EmptyDataset(client_id));
        }
        if weights.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: weights.len(),
            });
        }
        let m = data.inputs.len() as f64;
        let mut grad = vec![0.0; self.dim];
        for (x, &y) in data.inputs.iter().zip(&data.targets) {
            let residual: f64 = x.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() - y;
            for (gk, xk) in grad.iter_mut().zip(x) {
                *gk += xk * residual;
            }
        }
        for gk in grad.iter_mut() {
            *gk *= 2.0 / m;
        }
        GradientVector::new(client_id, grad)
    }

    /// Mean squared error of one client's data at `weights`.
    pub fn client_loss(&self, client_id: u32, weights: &[f64]) -> Result<f64> {
        let data = self.client(client_id)?;
        if data.inputs.is_empty() {
            return Err(Error::EmptyDataset(client_id));
        }
        let m = data.inputs.len() as f64;
        let mut loss = 0.0;
        for (x, &y) in data.inputs.iter().zip(&data.targets) {
            let residual: f64 = x.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>() - y;
            loss += residual * residual;
        }
        Ok(loss / m)
    }

    /// Mean of the per-client losses.
    pub fn global_loss(&self, weights: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for c in &self.clients {
            total += self.client_loss(c.client_id, weights)?;
        }
        Ok(total / self.clients.len() as f64)
    }
}

// ---------------------------------------------------------------------------
// Gradient source wiring
// ---------------------------------------------------------------------------

/// Supplies per-round client gradients: honest least-squares gradients at
/// the current weights, with the attack applied for ids 1..=f. Attack
/// randomness is derived per (round, client) so runs are reproducible.
pub struct TrainerSource<'a> {
    pub task: &'a ToyTask,
    pub weights: Vec<f64>,
    pub attack: &'a AttackModel,
    pub n_byzantine: usize,
    pub master_seed: u64,
}

impl GradientSource for TrainerSource<'_> {
    fn gradient(&self, round: usize, client_id: u32) -> GradientVector {
        let honest = self
            .task
            .honest_gradient(client_id, &self.weights)
            .expect("trainer task validated before the round");
        if (client_id as usize) <= self.n_byzantine {
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
                self.master_seed,
                "attack",
                ((round as u64) << 32) | client_id as u64,
            ));
            apply_attack(&honest, self.attack, &mut rng)
                .expect("attack parameters validated before the round")
        } else {
            honest
        }
    }
}

/// Synthetic gradients for protocol-only simulation: a shared per-round
/// base vector plus small per-client perturbations, attacked for Byzantine
/// ids. Used by the simulate entry point, which has no training loop.
pub struct SyntheticSource {
    pub dim: usize,
    pub attack: AttackModel,
    pub n_byzantine: usize,
    pub master_seed: u64,
}

impl GradientSource for SyntheticSource {
    fn gradient(&self, round: usize, client_id: u32) -> GradientVector {
        let mut base_rng = ChaCha12Rng::seed_from_u64(derive_seed(
            self.master_seed,
            "synthetic-base",
            round as u64,
        ));
        let base: Vec<f64> = (0..self.dim)
            .map(|_| base_rng.sample(StandardNormal))
            .collect();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(
            self.master_seed,
            "synthetic-client",
            ((round as u64) << 32) | client_id as u64,
        ));
        let values: Vec<f64> = base
            .iter()
            .map(|b| b + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let honest = GradientVector::new(client_id, values).expect("finite by construction");
        if (client_id as usize) <= self.n_byzantine {
            apply_attack(&honest, &self.attack, &mut rng).expect("finite attack parameters")
        } else {
            honest
        }
    }
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    MultiKrum,
    PlainMean,
}

impl Aggregator {
    pub fn name(self) -> &'static str {
        match self {
            Aggregator::MultiKrum => "multikrum",
            Aggregator::PlainMean => "plain_mean",
        }
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub aggregator: Aggregator,
    pub loss: f64,
    /// Byzantine ids among the selected set (for plain mean: all of them,
    /// since every client contributes).
    pub byz_selected_count: usize,
}

/// Loss curve plus the per-round selection audit.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub aggregator: Aggregator,
    pub records: Vec<RoundRecord>,
    /// Round outcomes with selection audit; empty for plain mean.
    pub outcomes: Vec<RoundOutcome>,
    pub final_weights: Vec<f64>,
    pub final_loss: f64,
}

fn count_byzantine(selected: &[u32], f: usize) -> usize {
    selected.iter().filter(|&&id| id as usize <= f).count()
}

/// Run a full training experiment from zero weights.
///
/// Multi-Krum rounds go through the sealed protocol simulator; the plain
/// mean baseline averages every submitted gradient in-process, which is
/// exactly what the attack is free to corrupt.
pub fn run_experiment(
    task: &ToyTask,
    scenario: &ScenarioConfig,
    aggregator: Aggregator,
) -> Result<ExperimentResult> {
    let cfg = scenario.to_system_config()?;
    if task.dim != cfg.dim {
        return Err(Error::DimensionMismatch {
            expected: cfg.dim,
            got: task.dim,
        });
    }
    for id in 1..=cfg.n_clients as u32 {
        let data = task.client(id)?;
        if data.inputs.is_empty() {
            return Err(Error::EmptyDataset(id));
        }
    }
    scenario.attack.check_finite()?;

    let mut weights = vec![0.0; cfg.dim];
    let mut records = Vec::with_capacity(scenario.rounds);
    let mut outcomes = Vec::new();
    let mut sim = match aggregator {
        Aggregator::MultiKrum => Some(Simulator::new(scenario)?),
        Aggregator::PlainMean => None,
    };

    for round in 0..scenario.rounds {
        let source = TrainerSource {
            task,
            weights: weights.clone(),
            attack: &scenario.attack,
            n_byzantine: cfg.n_byzantine,
            master_seed: cfg.seed,
        };
        let (update, byz_selected) = match aggregator {
            Aggregator::MultiKrum => {
                let outcome = sim.as_mut().unwrap().run_round(&source)?;
                match &outcome.status {
                    RoundStatus::Completed => {}
                    RoundStatus::FailedPrecondition {
                        participants,
                        required,
                    } => {
                        return Err(Error::RoundPrecondition {
                            participants: *participants,
                            required: *required,
                        })
                    }
                    RoundStatus::Aborted { culprit } => {
                        return Err(Error::AuthFailure {
                            context: format!("round {round} aborted, culprit {culprit}"),
                        })
                    }
                }
                let selection = outcome.selection.clone().unwrap();
                let aggregate = outcome.aggregate.clone().unwrap();
                let byz = count_byzantine(&selection.selected_ids, cfg.n_byzantine);
                outcomes.push(outcome);
                (aggregate, byz)
            }
            Aggregator::PlainMean => {
                let gradients: Vec<GradientVector> = (1..=cfg.n_clients as u32)
                    .map(|c| source.gradient(round, c))
                    .collect();
                let prepared: Vec<GradientVector> = match cfg.clip_norm {
                    Some(bound) => gradients
                        .iter()
                        .map(|g| clip_to_norm(g, bound))
                        .collect::<Result<_>>()?,
                    None => gradients,
                };
                // Same summation path as the selected-mean aggregator, with
                // every client selected.
                let everyone = SelectionResult {
                    selected_ids: prepared.iter().map(|g| g.client_id).collect(),
                    rejected_ids: vec![],
                    scores: ScoreTable {
                        n_byzantine: cfg.n_byzantine,
                        entries: prepared
                            .iter()
                            .map(|g| ClientScore {
                                client_id: g.client_id,
                                score: 0.0,
                                neighbors: vec![],
                            })
                            .collect(),
                    },
                };
                (aggregate_selected(&prepared, &everyone)?, cfg.n_byzantine)
            }
        };
        for (w, u) in weights.iter_mut().zip(&update.values) {
            *w -= scenario.learning_rate * u;
        }
        records.push(RoundRecord {
            round,
            aggregator,
            loss: task.global_loss(&weights)?,
            byz_selected_count: byz_selected,
        });
    }

    let final_loss = task.global_loss(&weights)?;
    Ok(ExperimentResult {
        aggregator,
        records,
        outcomes,
        final_weights: weights,
        final_loss,
    })
}
