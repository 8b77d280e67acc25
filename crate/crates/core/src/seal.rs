//! Authenticated sealed channels between protocol roles.
//!
//! Every payload that crosses a role boundary travels as a [`SealedMessage`]:
//! ChaCha20-Poly1305 under a pairwise session key, 96-bit nonces built from a
//! per-direction counter, with sender/receiver identities bound as associated
//! data. Session keys come from an abstract key-exchange handshake: each side
//! contributes a random 32-byte public value and both derive the key from the
//! ordered pair of contributions.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::codec::WorkerId;
use crate::error::{Error, Result};

const KDF_DOMAIN: &[u8] = b"maskedkrum-pair-key-v1";

/// A protocol participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RoleId {
    Client(u32),
    Enclave,
    Worker(WorkerId),
}

impl RoleId {
    /// Stable byte encoding used for key derivation and associated data.
    pub fn encode(&self) -> [u8; 5] {
        match self {
            RoleId::Client(i) => {
                let mut out = [0u8; 5];
                out[0] = 1;
                out[1..5].copy_from_slice(&i.to_le_bytes());
                out
            }
            RoleId::Enclave => [2, 0, 0, 0, 0],
            RoleId::Worker(w) => [3, w.index(), 0, 0, 0],
        }
    }
}

impl std::fmt::Display for RoleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RoleId::Client(i) => write!(f, "client-{i}"),
            RoleId::Enclave => write!(f, "enclave"),
            RoleId::Worker(w) => write!(f, "{w}"),
        }
    }
}

/// One side's public value in the key-exchange handshake.
#[derive(Debug, Clone)]
pub struct KeyContribution {
    pub role: RoleId,
    pub public: [u8; 32],
}

impl KeyContribution {
    pub fn random(role: RoleId, rng: &mut impl RngCore) -> Self {
        let mut public = [0u8; 32];
        rng.fill_bytes(&mut public);
        Self { role, public }
    }
}

/// Symmetric key shared by exactly one role pair.
#[derive(Clone, PartialEq, Eq)]
pub struct PairKey([u8; 32]);

impl PairKey {
    pub fn new(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }
}

impl std::fmt::Debug for PairKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PairKey(..)")
    }
}

/// Derive the pairwise key from both contributions; order-insensitive.
pub fn derive_pair_key(a: &KeyContribution, b: &KeyContribution) -> PairKey {
    let (lo, hi) = if a.role <= b.role { (a, b) } else { (b, a) };
    let mut hasher = Sha256::new();
    hasher.update(KDF_DOMAIN);
    hasher.update(lo.role.encode());
    hasher.update(lo.public);
    hasher.update(hi.role.encode());
    hasher.update(hi.public);
    PairKey(hasher.finalize().into())
}

/// An authenticated, encrypted payload on the wire.
#[derive(Debug, Clone)]
pub struct SealedMessage {
    pub sender: RoleId,
    pub receiver: RoleId,
    pub nonce: [u8; 12],
    /// Ciphertext with the 16-byte Poly1305 tag appended.
    pub ciphertext: Vec<u8>,
}

/// One endpoint of a pairwise sealed channel. Holds the send counter for
/// its direction; the two directions use disjoint nonce spaces.
pub struct SealedChannel {
    local: RoleId,
    peer: RoleId,
    cipher: ChaCha20Poly1305,
    send_counter: u64,
}

impl SealedChannel {
    pub fn new(local: RoleId, peer: RoleId, key: &PairKey) -> Self {
        Self {
            local,
            peer,
            cipher: ChaCha20Poly1305::new(Key::from_slice(&key.0)),
            send_counter: 0,
        }
    }

    /// Both endpoints of the channel between `a` and `b`.
    pub fn pair(a: RoleId, b: RoleId, key: &PairKey) -> (SealedChannel, SealedChannel) {
        (Self::new(a, b, key), Self::new(b, a, key))
    }

    pub fn local(&self) -> RoleId {
        self.local
    }

    pub fn peer(&self) -> RoleId {
        self.peer
    }

    fn nonce_for(&self, counter: u64) -> [u8; 12] {
        let mut nonce = [0u8; 12];
        nonce[0] = if self.local < self.peer { 1 } else { 2 };
        nonce[1..9].copy_from_slice(&counter.to_le_bytes());
        nonce
    }

    fn aad(sender: RoleId, receiver: RoleId) -> [u8; 10] {
        let mut aad = [0u8; 10];
        aad[..5].copy_from_slice(&sender.encode());
        aad[5..].copy_from_slice(&receiver.encode());
        aad
    }

    /// Seal a payload for the peer, consuming one nonce.
    pub fn seal(&mut self, payload: &[u8]) -> SealedMessage {
        let nonce = self.nonce_for(self.send_counter);
        self.send_counter += 1;
        let aad = Self::aad(self.local, self.peer);
        let ciphertext = self
            .cipher
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: payload,
                    aad: &aad,
                },
            )
            .expect("in-memory AEAD encryption cannot fail");
        SealedMessage {
            sender: self.local,
            receiver: self.peer,
            nonce,
            ciphertext,
        }
    }

    /// Open a message with this channel's key. Any bit flip, any wrong key,
    /// or any tampered addressing fails authentication.
    pub fn open(&self, msg: &SealedMessage) -> Result<Vec<u8>> {
        let aad = Self::aad(msg.sender, msg.receiver);
        let plain = self
            .cipher
            .decrypt(
                Nonce::from_slice(&msg.nonce),
                Payload {
                    msg: &msg.ciphertext,
                    aad: &aad,
                },
            )
            .map_err(|_| Error::AuthFailure {
                context: format!(
                    "{} -> {} opened at {}",
                    msg.sender, msg.receiver, self.local
                ),
            })?;
        if msg.receiver != self.local {
            return Err(Error::AuthFailure {
                context: format!(
                    "message addressed to {} opened at {}",
                    msg.receiver, self.local
                ),
            });
        }
        Ok(plain)
    }
}
