//! Multi-role aggregation round simulator.
//!
//! Four role types run as concurrent tasks in one process: N clients, the
//! enclave, and two distance workers. Every payload crossing a role boundary
//! is a [`SealedMessage`]; the enclave totally orders deliveries within each
//! phase by sender id, so runs with a fixed master seed are reproducible.
//!
//! Round flow: clients seal gradients to the enclave; the enclave opens,
//! optionally clips, encodes each gradient with its codebook row (rows are
//! fetched batch-wise from sealed external storage), and seals the plus
//! shares to worker 1 and the minus shares to worker 2; each worker computes
//! its partial distance matrix over the shares it alone can open and seals
//! it back; the enclave decodes, scores, selects, aggregates, and returns
//! the aggregate to every client, sealed per client.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codebook::{build_codebook, sigma_for_constant, NoiseCodebook};
use crate::codec::{
    decode_distances, encode_client_gradient, max_worker_threads, worker_pairwise_distances,
    DecodeMode, PartialDistanceMatrix, WorkerId, WorkerShare,
};
use crate::error::{Error, Result};
use crate::krum::{aggregate_selected, score_clients, select_top_k, SelectionResult};
use crate::leakage::{estimate_variances, mi_bound, LeakageReport, VarianceSource};
use crate::model::{clip_to_norm, DistanceMatrix, GradientVector, SystemConfig};
use crate::seal::{
    derive_pair_key, KeyContribution, PairKey, RoleId, SealedChannel, SealedMessage,
};
use crate::trainer::AttackModel;

/// How long the enclave waits on any single delivery before giving up.
const PHASE_TIMEOUT: Duration = Duration::from_secs(60);

// ---------------------------------------------------------------------------
// Scenario configuration
// ---------------------------------------------------------------------------

fn default_batch_rows() -> usize {
    64
}

fn default_learning_rate() -> f64 {
    0.05
}

fn default_samples_per_client() -> usize {
    32
}

fn default_data_noise() -> f64 {
    0.1
}

/// A scheduled client departure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropoutEvent {
    pub round: usize,
    pub client: u32,
}

/// JSON scenario description consumed by the simulator and the trainer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_clients: usize,
    pub n_byzantine: usize,
    /// Defaults to N - f - 2 when omitted.
    #[serde(default)]
    pub select_k: Option<usize>,
    pub dim: usize,
    pub codebook_constant: f64,
    pub seed: u64,
    #[serde(default)]
    pub attack: AttackModel,
    pub rounds: usize,
    #[serde(default)]
    pub dropouts: Vec<DropoutEvent>,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Per-coordinate noise scale reported by the leakage analyzer; defaults
    /// to the codebook's equivalent sigma sqrt(C/2d).
    #[serde(default)]
    pub noise_sigma: Option<f64>,
    /// Reuse one codebook across rounds instead of building a fresh one per
    /// round.
    #[serde(default)]
    pub reuse_codebook: bool,
    /// Rows decrypted per fetch from sealed noise storage.
    #[serde(default = "default_batch_rows")]
    pub noise_batch_rows: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_samples_per_client")]
    pub samples_per_client: usize,
    #[serde(default = "default_data_noise")]
    pub data_noise: f64,
}

impl ScenarioConfig {
    pub fn resolved_select_k(&self) -> usize {
        self.select_k
            .unwrap_or_else(|| SystemConfig::default_select_k(self.n_clients, self.n_byzantine))
    }

    pub fn to_system_config(&self) -> Result<SystemConfig> {
        let cfg = SystemConfig {
            n_clients: self.n_clients,
            n_byzantine: self.n_byzantine,
            select_k: self.resolved_select_k(),
            dim: self.dim,
            codebook_constant: self.codebook_constant,
            noise_sigma: self
                .noise_sigma
                .unwrap_or_else(|| sigma_for_constant(self.codebook_constant, self.dim)),
            seed: self.seed,
            clip_norm: self.clip_norm,
        };
        cfg.validate()?;
        if self.noise_batch_rows == 0 {
            return Err(Error::InvalidConfig("noise_batch_rows must be >= 1".into()));
        }
        Ok(cfg)
    }
}

/// Deterministic sub-seed derivation from the master seed.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn derive_storage_key(master: u64, round: u64) -> PairKey {
    let mut hasher = Sha256::new();
    hasher.update(b"maskedkrum-storage-key-v1");
    hasher.update(master.to_le_bytes());
    hasher.update(round.to_le_bytes());
    PairKey::new(hasher.finalize().into())
}

// ---------------------------------------------------------------------------
// Wire payloads
// ---------------------------------------------------------------------------

/// Typed payloads carried inside sealed messages, plus the static table of
/// which payload kinds each role may receive.
pub mod wire {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    pub enum Payload {
        Gradient(GradientVector),
        Share(WorkerShare),
        Partial(PartialDistanceMatrix),
        Aggregate(GradientVector),
    }

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum PayloadKind {
        Gradient,
        Share,
        Partial,
        Aggregate,
    }

    impl PayloadKind {
        pub fn name(self) -> &'static str {
            match self {
                PayloadKind::Gradient => "gradient",
                PayloadKind::Share => "share",
                PayloadKind::Partial => "partial",
                PayloadKind::Aggregate => "aggregate",
            }
        }
    }

    impl Payload {
        pub fn kind(&self) -> PayloadKind {
            match self {
                Payload::Gradient(_) => PayloadKind::Gradient,
                Payload::Share(_) => PayloadKind::Share,
                Payload::Partial(_) => PayloadKind::Partial,
                Payload::Aggregate(_) => PayloadKind::Aggregate,
            }
        }
    }

    /// The only payload kinds a role's inbox accepts. Worker isolation is
    /// structural: a worker's code path can receive shares and nothing else.
    pub fn deliverable_kinds(role: RoleId) -> &'static [PayloadKind] {
        match role {
            RoleId::Client(_) => &[PayloadKind::Aggregate],
            RoleId::Enclave => &[PayloadKind::Gradient, PayloadKind::Partial],
            RoleId::Worker(_) => &[PayloadKind::Share],
        }
    }

    const TAG_GRADIENT: u8 = 1;
    const TAG_SHARE: u8 = 2;
    const TAG_PARTIAL: u8 = 3;
    const TAG_AGGREGATE: u8 = 4;

    fn put_values(out: &mut Vec<u8>, values: &[f64]) {
        out.extend_from_slice(&(values.len() as u32).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn encode(payload: &Payload) -> Vec<u8> {
        let mut out = Vec::new();
        match payload {
            Payload::Gradient(g) => {
                out.push(TAG_GRADIENT);
                out.extend_from_slice(&g.client_id.to_le_bytes());
                put_values(&mut out, &g.values);
            }
            Payload::Share(s) => {
                out.push(TAG_SHARE);
                out.extend_from_slice(&s.client_id.to_le_bytes());
                out.push(s.worker.index());
                put_values(&mut out, &s.values);
            }
            Payload::Partial(p) => {
                out.push(TAG_PARTIAL);
                out.push(p.worker.index());
                let n = p.matrix.n();
                out.extend_from_slice(&(n as u32).to_le_bytes());
                // Upper triangle only; symmetry is re-imposed on decode.
                for i in 0..n {
                    for j in (i + 1)..n {
                        out.extend_from_slice(&p.matrix.get(i, j).to_le_bytes());
                    }
                }
            }
            Payload::Aggregate(g) => {
                out.push(TAG_AGGREGATE);
                out.extend_from_slice(&g.client_id.to_le_bytes());
                put_values(&mut out, &g.values);
            }
        }
        out
    }

    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            if self.pos + n > self.bytes.len() {
                return Err(Error::WireFormat("truncated payload".into()));
            }
            let slice = &self.bytes[self.pos..self.pos + n];
            self.pos += n;
            Ok(slice)
        }

        fn u8(&mut self) -> Result<u8> {
            Ok(self.take(1)?[0])
        }

        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }

        fn f64(&mut self) -> Result<f64> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }

        fn values(&mut self) -> Result<Vec<f64>> {
            let len = self.u32()? as usize;
            let mut out = Vec::with_capacity(len);
            for _ in 0..len {
                out.push(self.f64()?);
            }
            Ok(out)
        }

        fn finish(&self) -> Result<()> {
            if self.pos != self.bytes.len() {
                return Err(Error::WireFormat("trailing bytes in payload".into()));
            }
            Ok(())
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Payload> {
        let mut cur = Cursor { bytes, pos: 0 };
        let tag = cur.u8()?;
        let payload = match tag {
            TAG_GRADIENT => {
                let id = cur.u32()?;
                Payload::Gradient(GradientVector::new(id, cur.values()?)?)
            }
            TAG_SHARE => {
                let id = cur.u32()?;
                let worker = WorkerId::from_index(cur.u8()?)?;
                Payload::Share(WorkerShare {
                    client_id: id,
                    worker,
                    values: cur.values()?,
                })
            }
            TAG_PARTIAL => {
                let worker = WorkerId::from_index(cur.u8()?)?;
                let n = cur.u32()? as usize;
                let mut matrix = DistanceMatrix::zeros(n);
                for i in 0..n {
                    for j in (i + 1)..n {
                        matrix.set_pair(i, j, cur.f64()?);
                    }
                }
                Payload::Partial(PartialDistanceMatrix { worker, matrix })
            }
            TAG_AGGREGATE => {
                let id = cur.u32()?;
                Payload::Aggregate(GradientVector::new(id, cur.values()?)?)
            }
            other => {
                return Err(Error::WireFormat(format!("unknown payload tag {other}")));
            }
        };
        cur.finish()?;
        Ok(payload)
    }

    /// Decode a plaintext and enforce the deliverable-kinds table for the
    /// opening role.
    pub fn expect_payload(role: RoleId, plaintext: &[u8]) -> Result<Payload> {
        let payload = decode(plaintext)?;
        if !deliverable_kinds(role).contains(&payload.kind()) {
            return Err(Error::UnexpectedPayload {
                kind: payload.kind().name(),
                role: role.to_string(),
            });
        }
        Ok(payload)
    }
}

// ---------------------------------------------------------------------------
// Session establishment
// ---------------------------------------------------------------------------

/// Pairwise session keys: one per (client, enclave) link and one per
/// (enclave, worker) link. Workers never share a key with each other or
/// with any client.
pub struct SessionTable {
    keys: BTreeMap<(RoleId, RoleId), PairKey>,
    pub dropped: Vec<RoleId>,
}

fn ordered(a: RoleId, b: RoleId) -> (RoleId, RoleId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl SessionTable {
    pub fn n_keys(&self) -> usize {
        self.keys.len()
    }

    pub fn key(&self, a: RoleId, b: RoleId) -> Option<&PairKey> {
        self.keys.get(&ordered(a, b))
    }

    pub fn iter_keys(&self) -> impl Iterator<Item = (&(RoleId, RoleId), &PairKey)> {
        self.keys.iter()
    }

    fn insert(&mut self, a: RoleId, b: RoleId, key: PairKey) {
        self.keys.insert(ordered(a, b), key);
    }
}

/// Run the abstract key-exchange handshake for every protocol link.
///
/// Each responsive peer contributes a random public value; the pair key is
/// derived from both contributions. Unresponsive roles are marked dropped
/// and get no key.
pub fn establish_session(
    client_ids: &[u32],
    unresponsive: &[RoleId],
    rng: &mut ChaCha12Rng,
) -> SessionTable {
    let mut table = SessionTable {
        keys: BTreeMap::new(),
        dropped: Vec::new(),
    };
    let mut peers: Vec<RoleId> = client_ids.iter().map(|&c| RoleId::Client(c)).collect();
    peers.push(RoleId::Worker(WorkerId::One));
    peers.push(RoleId::Worker(WorkerId::Two));
    for peer in peers {
        let enclave_part = KeyContribution::random(RoleId::Enclave, rng);
        if unresponsive.contains(&peer) {
            // Handshake timeout: no contribution ever arrives.
            table.dropped.push(peer);
            continue;
        }
        let peer_part = KeyContribution::random(peer, rng);
        table.insert(
            RoleId::Enclave,
            peer,
            derive_pair_key(&enclave_part, &peer_part),
        );
    }
    table
}

// ---------------------------------------------------------------------------
// Sealed noise storage
// ---------------------------------------------------------------------------

const NCBS_MAGIC: &[u8; 4] = b"NCBS";
const NCBS_VERSION: u16 = 1;

/// Codebook rows sealed batch-by-batch under the enclave's storage key,
/// modeling encrypted external memory. Decrypting one batch never exposes
/// the others.
pub struct SealedNoiseStore {
    n: usize,
    dim: usize,
    batch_rows: usize,
    batches: Vec<SealedMessage>,
}

impl SealedNoiseStore {
    pub fn seal(cb: &NoiseCodebook, key: &PairKey, batch_rows: usize) -> Self {
        let batch_rows = batch_rows.max(1);
        let mut channel = SealedChannel::new(RoleId::Enclave, RoleId::Enclave, key);
        let mut batches = Vec::new();
        let mut first = 0;
        while first < cb.n() {
            let last = (first + batch_rows).min(cb.n());
            let mut plain = Vec::new();
            plain.extend_from_slice(&(first as u32).to_le_bytes());
            plain.extend_from_slice(&((last - first) as u32).to_le_bytes());
            plain.extend_from_slice(&(cb.dim() as u32).to_le_bytes());
            for row in first..last {
                for v in cb.row(row) {
                    plain.extend_from_slice(&v.to_le_bytes());
                }
            }
            batches.push(channel.seal(&plain));
            first = last;
        }
        Self {
            n: cb.n(),
            dim: cb.dim(),
            batch_rows,
            batches,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_batches(&self) -> usize {
        self.batches.len()
    }

    /// Decrypt one batch; returns the first row index and the rows.
    pub fn open_batch(&self, idx: usize, key: &PairKey) -> Result<(usize, Vec<Vec<f64>>)> {
        let msg = self.batches.get(idx).ok_or_else(|| {
            Error::InvalidConfig(format!("batch {idx} out of range ({})", self.batches.len()))
        })?;
        let channel = SealedChannel::new(RoleId::Enclave, RoleId::Enclave, key);
        let plain = channel.open(msg)?;
        if plain.len() < 12 {
            return Err(Error::WireFormat("sealed batch too short".into()));
        }
        let first = u32::from_le_bytes(plain[0..4].try_into().unwrap()) as usize;
        let rows = u32::from_le_bytes(plain[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(plain[8..12].try_into().unwrap()) as usize;
        if plain.len() != 12 + rows * dim * 8 {
            return Err(Error::WireFormat("sealed batch length mismatch".into()));
        }
        let mut out = Vec::with_capacity(rows);
        let mut off = 12;
        for _ in 0..rows {
            let mut row = Vec::with_capacity(dim);
            for _ in 0..dim {
                row.push(f64::from_le_bytes(plain[off..off + 8].try_into().unwrap()));
                off += 8;
            }
            out.push(row);
        }
        Ok((first, out))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(NCBS_MAGIC);
        out.extend_from_slice(&NCBS_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.batch_rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.batches.len() as u32).to_le_bytes());
        for msg in &self.batches {
            out.extend_from_slice(&msg.nonce);
            out.extend_from_slice(&(msg.ciphertext.len() as u32).to_le_bytes());
            out.extend_from_slice(&msg.ciphertext);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[0..4] != NCBS_MAGIC {
            return Err(Error::CodebookFormat("bad sealed store header".into()));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != NCBS_VERSION {
            return Err(Error::CodebookFormat(format!(
                "unsupported sealed store version {version}"
            )));
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let batch_rows = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let n_batches = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
        let mut batches = Vec::with_capacity(n_batches);
        let mut off = 24;
        for _ in 0..n_batches {
            if off + 16 > bytes.len() {
                return Err(Error::CodebookFormat("truncated sealed store".into()));
            }
            let nonce: [u8; 12] = bytes[off..off + 12].try_into().unwrap();
            off += 12;
            let len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
            off += 4;
            if off + len > bytes.len() {
                return Err(Error::CodebookFormat("truncated sealed store".into()));
            }
            batches.push(SealedMessage {
                sender: RoleId::Enclave,
                receiver: RoleId::Enclave,
                nonce,
                ciphertext: bytes[off..off + len].to_vec(),
            });
            off += len;
        }
        if off != bytes.len() {
            return Err(Error::CodebookFormat(
                "trailing bytes in sealed store".into(),
            ));
        }
        Ok(Self {
            n,
            dim,
            batch_rows,
            batches,
        })
    }

    pub fn write_to(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

// ---------------------------------------------------------------------------
// Round state
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundPhase {
    Setup,
    Collect,
    Encode,
    Distance,
    DecodeSelect,
    Return,
}

impl RoundPhase {
    pub fn name(self) -> &'static str {
        match self {
            RoundPhase::Setup => "setup",
            RoundPhase::Collect => "collect",
            RoundPhase::Encode => "encode",
            RoundPhase::Distance => "distance",
            RoundPhase::DecodeSelect => "decode_select",
            RoundPhase::Return => "return",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: RoundPhase,
    pub micros: u64,
}

/// Outcome of applying drop requests at a given phase.
#[derive(Debug, Clone)]
pub struct DropoutDecision {
    /// The participant set after applying whatever could be applied now.
    pub participants: BTreeSet<u32>,
    /// Drops that arrived too late for this round and apply at the next
    /// round boundary.
    pub deferred: Vec<u32>,
    /// Whether the adjusted set still satisfies N >= 2f+3.
    pub meets_precondition: bool,
}

/// Apply drop requests to a participant set.
///
/// Drops land immediately while the round has not progressed past the
/// encoding phase (the departing client's codebook row is simply unused and
/// the distance matrices shrink); once shares have been sent the round
/// completes with the full set and the drop defers to the next round.
pub fn handle_dropout(
    participants: &BTreeSet<u32>,
    phase: RoundPhase,
    drops: &[u32],
    n_byzantine: usize,
) -> DropoutDecision {
    let mut out = participants.clone();
    let mut deferred = Vec::new();
    if phase <= RoundPhase::Encode {
        for d in drops {
            out.remove(d);
        }
    } else {
        deferred.extend_from_slice(drops);
    }
    let meets = out.len() >= 2 * n_byzantine + 3;
    DropoutDecision {
        participants: out,
        deferred,
        meets_precondition: meets,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoundStatus {
    Completed,
    FailedPrecondition {
        participants: usize,
        required: usize,
    },
    Aborted {
        culprit: String,
    },
}

/// Everything recorded about one aggregation round. Timings are excluded
/// from serialization so audit logs stay byte-identical across reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round_index: usize,
    pub participating_ids: Vec<u32>,
    pub status: RoundStatus,
    pub selection: Option<SelectionResult>,
    pub aggregate: Option<GradientVector>,
    pub leakage: Option<LeakageReport>,
    #[serde(skip)]
    pub timings: Vec<PhaseTiming>,
}

/// Supplies the gradient each client submits in a given round. Byzantine
/// clients corrupt the gradients they submit, so attacks live in the source.
pub trait GradientSource: Sync {
    fn gradient(&self, round: usize, client_id: u32) -> GradientVector;
}

/// A fixed gradient set, independent of the round index.
pub struct FixedGradients(pub Vec<GradientVector>);

impl GradientSource for FixedGradients {
    fn gradient(&self, _round: usize, client_id: u32) -> GradientVector {
        self.0
            .iter()
            .find(|g| g.client_id == client_id)
            .cloned()
            .unwrap_or_else(|| panic!("no gradient fixture for client {client_id}"))
    }
}

/// Single-process reference pipeline: clip, plaintext distances, score,
/// select, aggregate. No sealing, no shares; the oracle run_round is
/// checked against.
pub fn plaintext_round(
    gradients: &[GradientVector],
    n_byzantine: usize,
    select_k: usize,
    clip_norm: Option<f64>,
) -> Result<(SelectionResult, GradientVector)> {
    let mut ordered = gradients.to_vec();
    ordered.sort_by_key(|g| g.client_id);
    let prepared: Vec<GradientVector> = match clip_norm {
        Some(bound) => ordered
            .iter()
            .map(|g| clip_to_norm(g, bound))
            .collect::<Result<_>>()?,
        None => ordered,
    };
    let ids: Vec<u32> = prepared.iter().map(|g| g.client_id).collect();
    let dm = DistanceMatrix::from_gradients(&prepared)?;
    let table = score_clients(&dm, &ids, n_byzantine)?;
    let selection = select_top_k(&table, select_k)?;
    let aggregate = aggregate_selected(&prepared, &selection)?;
    Ok((selection, aggregate))
}

// ---------------------------------------------------------------------------
// Simulator
// ---------------------------------------------------------------------------

struct RoleChannels {
    /// local = client i, peer = enclave.
    client_side: BTreeMap<u32, SealedChannel>,
    /// local = enclave, peer = client i.
    enclave_client: BTreeMap<u32, SealedChannel>,
    /// local = worker j, peer = enclave.
    worker_side: BTreeMap<WorkerId, SealedChannel>,
    /// local = enclave, peer = worker j.
    enclave_worker: BTreeMap<WorkerId, SealedChannel>,
}

#[derive(Clone)]
struct WireHub {
    log: Arc<Mutex<Vec<SealedMessage>>>,
    corrupt_from: Arc<Mutex<Option<RoleId>>>,
}

impl WireHub {
    /// Record and deliver. Returns false when the receiver is gone.
    fn send(&self, tx: &Sender<SealedMessage>, mut msg: SealedMessage) -> bool {
        {
            let mut target = self.corrupt_from.lock().unwrap();
            if *target == Some(msg.sender) {
                *target = None;
                let last = msg.ciphertext.len() - 1;
                msg.ciphertext[last] ^= 0x01;
            }
        }
        self.log.lock().unwrap().push(msg.clone());
        tx.send(msg).is_ok()
    }
}

/// Drives aggregation rounds over sealed channels with persistent sessions.
pub struct Simulator {
    cfg: SystemConfig,
    reuse_codebook: bool,
    noise_batch_rows: usize,
    dropout_schedule: BTreeMap<usize, Vec<u32>>,
    sessions: SessionTable,
    channels: RoleChannels,
    participants: BTreeSet<u32>,
    deferred_drops: BTreeSet<u32>,
    pending_joins: BTreeSet<u32>,
    /// Codebook rows must cover every client id ever assigned.
    id_space: u32,
    round_index: usize,
    master_seed: u64,
    rng: ChaCha12Rng,
    cached_store: Option<(PairKey, SealedNoiseStore)>,
    transcript: Arc<Mutex<Vec<SealedMessage>>>,
    corrupt_from: Arc<Mutex<Option<RoleId>>>,
}

impl Simulator {
    pub fn new(scenario: &ScenarioConfig) -> Result<Self> {
        let cfg = scenario.to_system_config()?;
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "session", 0));
        let client_ids: Vec<u32> = (1..=cfg.n_clients as u32).collect();
        let sessions = establish_session(&client_ids, &[], &mut rng);
        let channels = Self::build_channels(&sessions, &client_ids);
        let mut schedule: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
        for event in &scenario.dropouts {
            schedule.entry(event.round).or_default().push(event.client);
        }
        Ok(Self {
            participants: client_ids.iter().copied().collect(),
            id_space: cfg.n_clients as u32,
            cfg,
            reuse_codebook: scenario.reuse_codebook,
            noise_batch_rows: scenario.noise_batch_rows,
            dropout_schedule: schedule,
            sessions,
            channels,
            deferred_drops: BTreeSet::new(),
            pending_joins: BTreeSet::new(),
            round_index: 0,
            master_seed: scenario.seed,
            rng,
            cached_store: None,
            transcript: Arc::new(Mutex::new(Vec::new())),
            corrupt_from: Arc::new(Mutex::new(None)),
        })
    }

    fn build_channels(sessions: &SessionTable, client_ids: &[u32]) -> RoleChannels {
        let mut channels = RoleChannels {
            client_side: BTreeMap::new(),
            enclave_client: BTreeMap::new(),
            worker_side: BTreeMap::new(),
            enclave_worker: BTreeMap::new(),
        };
        for &c in client_ids {
            if let Some(key) = sessions.key(RoleId::Client(c), RoleId::Enclave) {
                let (client, enclave) =
                    SealedChannel::pair(RoleId::Client(c), RoleId::Enclave, key);
                channels.client_side.insert(c, client);
                channels.enclave_client.insert(c, enclave);
            }
        }
        for w in [WorkerId::One, WorkerId::Two] {
            if let Some(key) = sessions.key(RoleId::Worker(w), RoleId::Enclave) {
                let (worker, enclave) =
                    SealedChannel::pair(RoleId::Worker(w), RoleId::Enclave, key);
                channels.worker_side.insert(w, worker);
                channels.enclave_worker.insert(w, enclave);
            }
        }
        channels
    }

    pub fn config(&self) -> &SystemConfig {
        &self.cfg
    }

    pub fn participants(&self) -> &BTreeSet<u32> {
        &self.participants
    }

    pub fn sessions(&self) -> &SessionTable {
        &self.sessions
    }

    pub fn round_index(&self) -> usize {
        self.round_index
    }

    /// Every sealed message sent so far, in delivery order.
    pub fn transcript(&self) -> Vec<SealedMessage> {
        self.transcript.lock().unwrap().clone()
    }

    /// Corrupt the next message sent by `role` (one bit flip). Test hook for
    /// the authentication-abort path.
    pub fn inject_corruption(&self, role: RoleId) {
        *self.corrupt_from.lock().unwrap() = Some(role);
    }

    /// Request client drops. Applied now when the simulator is between
    /// rounds (equivalently: not past encoding); the engine itself only
    /// crosses round boundaries between `run_round` calls, so requests made
    /// here land at the next boundary.
    pub fn drop_clients(&mut self, ids: &[u32]) {
        self.deferred_drops.extend(ids.iter().copied());
    }

    /// Register a new client; takes effect at the next round boundary with
    /// a fresh handshake and a codebook rebuilt to cover the grown id space.
    pub fn add_client(&mut self, id: u32) -> Result<()> {
        if id == 0 {
            return Err(Error::InvalidConfig("client ids start at 1".into()));
        }
        if self.channels.client_side.contains_key(&id) || self.pending_joins.contains(&id) {
            return Err(Error::InvalidConfig(format!("client {id} already known")));
        }
        self.pending_joins.insert(id);
        Ok(())
    }

    fn apply_round_boundary(&mut self) {
        let joins: Vec<u32> = self.pending_joins.iter().copied().collect();
        self.pending_joins.clear();
        for id in joins {
            let enclave_part = KeyContribution::random(RoleId::Enclave, &mut self.rng);
            let client_part = KeyContribution::random(RoleId::Client(id), &mut self.rng);
            let key = derive_pair_key(&enclave_part, &client_part);
            self.sessions
                .insert(RoleId::Client(id), RoleId::Enclave, key);
            let key = self
                .sessions
                .key(RoleId::Client(id), RoleId::Enclave)
                .unwrap();
            let (client, enclave) = SealedChannel::pair(RoleId::Client(id), RoleId::Enclave, key);
            self.channels.client_side.insert(id, client);
            self.channels.enclave_client.insert(id, enclave);
            self.participants.insert(id);
            self.id_space = self.id_space.max(id);
            // Any cached codebook no longer covers the id space.
            self.cached_store = None;
        }
        let mut drops: Vec<u32> = self.deferred_drops.iter().copied().collect();
        self.deferred_drops.clear();
        if let Some(scheduled) = self.dropout_schedule.get(&self.round_index) {
            drops.extend(scheduled.iter().copied());
        }
        let decision = handle_dropout(
            &self.participants,
            RoundPhase::Setup,
            &drops,
            self.cfg.n_byzantine,
        );
        self.participants = decision.participants;
    }

    fn noise_store(&mut self) -> Result<(PairKey, usize)> {
        let rows_needed = self.id_space as usize;
        let rebuild = !matches!(&self.cached_store,
            Some((_, store)) if self.reuse_codebook && store.n_rows() >= rows_needed);
        if rebuild {
            let seed = derive_seed(self.master_seed, "codebook", self.round_index as u64);
            let cb = build_codebook(rows_needed, self.cfg.dim, self.cfg.codebook_constant, seed)?;
            let key = derive_storage_key(self.master_seed, self.round_index as u64);
            let store = SealedNoiseStore::seal(&cb, &key, self.noise_batch_rows);
            self.cached_store = Some((key, store));
        }
        let (key, store) = self.cached_store.as_ref().unwrap();
        Ok((key.clone(), store.n_batches()))
    }

    /// Execute one full aggregation round.
    pub fn run_round(&mut self, source: &dyn GradientSource) -> Result<RoundOutcome> {
        let round = self.round_index;
        let setup_started = Instant::now();
        self.apply_round_boundary();
        let parts: Vec<u32> = self.participants.iter().copied().collect();
        let required = 2 * self.cfg.n_byzantine + 3;
        let mut timings = Vec::new();
        if parts.len() < required {
            timings.push(PhaseTiming {
                phase: RoundPhase::Setup,
                micros: setup_started.elapsed().as_micros() as u64,
            });
            self.round_index += 1;
            return Ok(RoundOutcome {
                round_index: round,
                participating_ids: parts.clone(),
                status: RoundStatus::FailedPrecondition {
                    participants: parts.len(),
                    required,
                },
                selection: None,
                aggregate: None,
                leakage: None,
                timings,
            });
        }

        let (storage_key, _) = self.noise_store()?;
        timings.push(PhaseTiming {
            phase: RoundPhase::Setup,
            micros: setup_started.elapsed().as_micros() as u64,
        });

        let hub = WireHub {
            log: Arc::clone(&self.transcript),
            corrupt_from: Arc::clone(&self.corrupt_from),
        };
        let (to_enclave_tx, to_enclave_rx) = mpsc::channel::<SealedMessage>();
        let mut client_txs: BTreeMap<u32, Sender<SealedMessage>> = BTreeMap::new();
        let mut client_rxs: BTreeMap<u32, Receiver<SealedMessage>> = BTreeMap::new();
        for &c in &parts {
            let (tx, rx) = mpsc::channel();
            client_txs.insert(c, tx);
            client_rxs.insert(c, rx);
        }
        let mut worker_txs: BTreeMap<WorkerId, Sender<SealedMessage>> = BTreeMap::new();
        let mut worker_rxs: BTreeMap<WorkerId, Receiver<SealedMessage>> = BTreeMap::new();
        for w in [WorkerId::One, WorkerId::Two] {
            let (tx, rx) = mpsc::channel();
            worker_txs.insert(w, tx);
            worker_rxs.insert(w, rx);
        }

        let RoleChannels {
            client_side,
            enclave_client,
            worker_side,
            enclave_worker,
        } = &mut self.channels;
        for w in [WorkerId::One, WorkerId::Two] {
            if !worker_side.contains_key(&w) {
                return Err(Error::NoSessionKey {
                    local: RoleId::Worker(w).to_string(),
                    peer: RoleId::Enclave.to_string(),
                });
            }
        }
        let cfg = &self.cfg;
        let cached = self.cached_store.as_ref().map(|(_, s)| s);
        let store = cached.expect("noise store built above");
        let n = parts.len();

        let (run, echoes) = thread::scope(|scope| {
            let mut client_handles = Vec::new();
            for (&cid, chan) in client_side.iter_mut() {
                if !parts.contains(&cid) {
                    continue;
                }
                let rx = client_rxs.remove(&cid).unwrap();
                let tx = to_enclave_tx.clone();
                let hub = hub.clone();
                let handle =
                    scope.spawn(move || client_task(cid, chan, source, round, hub, tx, rx));
                client_handles.push((cid, handle));
            }
            for (&wid, chan) in worker_side.iter_mut() {
                let rx = worker_rxs.remove(&wid).unwrap();
                let tx = to_enclave_tx.clone();
                let hub = hub.clone();
                scope.spawn(move || worker_task(wid, chan, rx, hub, tx, n));
            }
            drop(to_enclave_tx);

            let run = enclave_round(
                cfg,
                &parts,
                store,
                &storage_key,
                enclave_client,
                enclave_worker,
                &client_txs,
                &worker_txs,
                &hub,
                &to_enclave_rx,
                &mut timings,
            );
            // Unblock any task still waiting before joining.
            drop(client_txs);
            drop(worker_txs);
            drop(to_enclave_rx);
            let echoes: Vec<(u32, Option<GradientVector>)> = client_handles
                .into_iter()
                .map(|(cid, h)| (cid, h.join().expect("client task panicked")))
                .collect();
            (run, echoes)
        });

        self.round_index += 1;
        let outcome = match run? {
            EnclaveRun::Done {
                selection,
                aggregate,
                leakage,
            } => {
                for (cid, echo) in &echoes {
                    match echo {
                        Some(g) if g.values == aggregate.values => {}
                        _ => {
                            return Err(Error::InvalidConfig(format!(
                                "client {cid} failed to receive the round aggregate"
                            )))
                        }
                    }
                }
                RoundOutcome {
                    round_index: round,
                    participating_ids: parts,
                    status: RoundStatus::Completed,
                    selection: Some(selection),
                    aggregate: Some(aggregate),
                    leakage: Some(leakage),
                    timings,
                }
            }
            EnclaveRun::Abort { culprit } => RoundOutcome {
                round_index: round,
                participating_ids: parts,
                status: RoundStatus::Aborted {
                    culprit: culprit.to_string(),
                },
                selection: None,
                aggregate: None,
                leakage: None,
                timings,
            },
        };
        Ok(outcome)
    }

    /// Run every configured round of a scenario.
    pub fn run_scenario(
        &mut self,
        rounds: usize,
        source: &dyn GradientSource,
    ) -> Result<Vec<RoundOutcome>> {
        (0..rounds).map(|_| self.run_round(source)).collect()
    }
}

enum EnclaveRun {
    Done {
        selection: SelectionResult,
        aggregate: GradientVector,
        leakage: LeakageReport,
    },
    Abort {
        culprit: RoleId,
    },
}

fn recv_sorted(rx: &Receiver<SealedMessage>, count: usize) -> Result<Vec<SealedMessage>> {
    let mut inbox = Vec::with_capacity(count);
    for _ in 0..count {
        let msg = rx
            .recv_timeout(PHASE_TIMEOUT)
            .map_err(|_| Error::InvalidConfig("phase delivery timed out".into()))?;
        inbox.push(msg);
    }
    // Deterministic scheduler: total order by sender within the phase.
    inbox.sort_by_key(|m| m.sender);
    Ok(inbox)
}

#[allow(clippy::too_many_arguments)]
fn enclave_round(
    cfg: &SystemConfig,
    parts: &[u32],
    store: &SealedNoiseStore,
    storage_key: &PairKey,
    enclave_client: &mut BTreeMap<u32, SealedChannel>,
    enclave_worker: &mut BTreeMap<WorkerId, SealedChannel>,
    client_txs: &BTreeMap<u32, Sender<SealedMessage>>,
    worker_txs: &BTreeMap<WorkerId, Sender<SealedMessage>>,
    hub: &WireHub,
    rx: &Receiver<SealedMessage>,
    timings: &mut Vec<PhaseTiming>,
) -> Result<EnclaveRun> {
    let n = parts.len();

    // Collect: one sealed gradient per participant.
    let started = Instant::now();
    let inbox = recv_sorted(rx, n)?;
    let mut gradients: Vec<GradientVector> = Vec::with_capacity(n);
    for msg in inbox {
        let RoleId::Client(cid) = msg.sender else {
            return Ok(EnclaveRun::Abort {
                culprit: msg.sender,
            });
        };
        let Some(chan) = enclave_client.get(&cid) else {
            return Ok(EnclaveRun::Abort {
                culprit: msg.sender,
            });
        };
        let plain = match chan.open(&msg) {
            Ok(plain) => plain,
            Err(_) => {
                return Ok(EnclaveRun::Abort {
                    culprit: msg.sender,
                })
            }
        };
        let payload = match wire::expect_payload(RoleId::Enclave, &plain) {
            Ok(p) => p,
            Err(_) => {
                return Ok(EnclaveRun::Abort {
                    culprit: msg.sender,
                })
            }
        };
        let wire::Payload::Gradient(g) = payload else {
            return Ok(EnclaveRun::Abort {
                culprit: msg.sender,
            });
        };
        if g.client_id != cid || g.dim() != cfg.dim {
            return Ok(EnclaveRun::Abort {
                culprit: msg.sender,
            });
        }
        let g = match cfg.clip_norm {
            Some(bound) => clip_to_norm(&g, bound)?,
            None => g,
        };
        gradients.push(g);
    }
    timings.push(PhaseTiming {
        phase: RoundPhase::Collect,
        micros: started.elapsed().as_micros() as u64,
    });

    // Encode: fetch sealed rows batch by batch, send each share pair out.
    let started = Instant::now();
    for batch in 0..store.n_batches() {
        let (first, rows) = store.open_batch(batch, storage_key)?;
        for (pos, &cid) in parts.iter().enumerate() {
            let row_idx = (cid - 1) as usize;
            if row_idx < first || row_idx >= first + rows.len() {
                continue;
            }
            let pair = encode_client_gradient(&gradients[pos], &rows[row_idx - first])?;
            let (plus, minus) = pair.into_worker_shares();
            for share in [plus, minus] {
                let wid = share.worker;
                let chan = enclave_worker.get_mut(&wid).expect("worker channel");
                let sealed = chan.seal(&wire::encode(&wire::Payload::Share(share)));
                hub.send(&worker_txs[&wid], sealed);
            }
        }
    }
    timings.push(PhaseTiming {
        phase: RoundPhase::Encode,
        micros: started.elapsed().as_micros() as u64,
    });

    // Distance: both workers report their partial matrices.
    let started = Instant::now();
    let partials = recv_sorted(rx, 2)?;
    let mut opened: Vec<PartialDistanceMatrix> = Vec::with_capacity(2);
    for msg in partials {
        let RoleId::Worker(wid) = msg.sender else {
            return Ok(EnclaveRun::Abort {
                culprit: msg.sender,
            });
        };
        let chan = enclave_worker.get(&wid).expect("worker channel");
        let plain = match chan.open(&msg) {
            Ok(plain) => plain,
            Err(_) => {
                return Ok(EnclaveRun::Abort {
                    culprit: msg.sender,
                })
            }
        };
        let payload = match wire::expect_payload(RoleId::Enclave, &plain) {
            Ok(p) => p,
            Err(_) => {
                return Ok(EnclaveRun::Abort {
                    culprit: msg.sender,
                })
            }
        };
        let wire::Payload::Partial(p) = payload else {
            return Ok(EnclaveRun::Abort {
                culprit: msg.sender,
            });
        };
        if p.worker != wid || p.matrix.n() != n {
            return Ok(EnclaveRun::Abort {
                culprit: msg.sender,
            });
        }
        opened.push(p);
    }
    timings.push(PhaseTiming {
        phase: RoundPhase::Distance,
        micros: started.elapsed().as_micros() as u64,
    });

    // Decode, score, select, aggregate.
    let started = Instant::now();
    let decoded = decode_distances(
        &opened[0],
        &opened[1],
        cfg.codebook_constant,
        DecodeMode::Raw,
    )?;
    let table = score_clients(&decoded, parts, cfg.n_byzantine)?;
    let selection = select_top_k(&table, cfg.select_k)?;
    let aggregate = aggregate_selected(&gradients, &selection)?;
    let variances = estimate_variances(&gradients)?;
    let sigma = sigma_for_constant(cfg.codebook_constant, cfg.dim);
    let leakage = mi_bound(&variances, sigma)?.with_variance_source(VarianceSource::Estimated);
    timings.push(PhaseTiming {
        phase: RoundPhase::DecodeSelect,
        micros: started.elapsed().as_micros() as u64,
    });

    // Return the aggregate to every participant, sealed per client.
    let started = Instant::now();
    for &cid in parts {
        let chan = enclave_client.get_mut(&cid).expect("client channel");
        let sealed = chan.seal(&wire::encode(&wire::Payload::Aggregate(aggregate.clone())));
        hub.send(&client_txs[&cid], sealed);
    }
    timings.push(PhaseTiming {
        phase: RoundPhase::Return,
        micros: started.elapsed().as_micros() as u64,
    });

    Ok(EnclaveRun::Done {
        selection,
        aggregate,
        leakage,
    })
}

fn client_task(
    client_id: u32,
    chan: &mut SealedChannel,
    source: &dyn GradientSource,
    round: usize,
    hub: WireHub,
    tx: Sender<SealedMessage>,
    rx: Receiver<SealedMessage>,
) -> Option<GradientVector> {
    let gradient = source.gradient(round, client_id);
    let sealed = chan.seal(&wire::encode(&wire::Payload::Gradient(gradient)));
    if !hub.send(&tx, sealed) {
        return None;
    }
    let msg = rx.recv().ok()?;
    let plain = chan.open(&msg).ok()?;
    match wire::expect_payload(RoleId::Client(client_id), &plain).ok()? {
        wire::Payload::Aggregate(g) => Some(g),
        _ => None,
    }
}

fn worker_task(
    worker: WorkerId,
    chan: &mut SealedChannel,
    rx: Receiver<SealedMessage>,
    hub: WireHub,
    tx: Sender<SealedMessage>,
    expected: usize,
) {
    let mut shares: Vec<WorkerShare> = Vec::with_capacity(expected);
    for _ in 0..expected {
        let Ok(msg) = rx.recv() else { return };
        let Ok(plain) = chan.open(&msg) else { return };
        let Ok(payload) = wire::expect_payload(RoleId::Worker(worker), &plain) else {
            return;
        };
        let wire::Payload::Share(share) = payload else {
            return;
        };
        if share.worker != worker {
            return;
        }
        shares.push(share);
    }
    shares.sort_by_key(|s| s.client_id);
    let Ok(partial) = worker_pairwise_distances(worker, &shares, max_worker_threads()) else {
        return;
    };
    let sealed = chan.seal(&wire::encode(&wire::Payload::Partial(partial)));
    hub.send(&tx, sealed);
}
