//! Identifiers, transactions and simulated signatures shared by every module.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Discrete simulation time.
pub type Round = u64;
/// Consensus slot index.
pub type Epoch = u64;

/// Network address of a replica, storage node or client.
///
/// Replicas occupy `0..n`; the simulation places storage nodes and clients
/// after them.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Content hash of a transaction, truncated to 64 bits.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TxId(pub u64);

impl fmt::Debug for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tx:{:016x}", self.0)
    }
}

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// First eight bytes of SHA-256 over the concatenated parts.
pub fn digest64(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let out = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&out[..8]);
    u64::from_le_bytes(head)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transaction {
    pub id: TxId,
    pub client: u32,
    pub nonce: u64,
    pub size_bytes: u64,
    /// Transactions sharing a class conflict pairwise.
    pub conflict_class: Option<u64>,
    pub submit_round: Round,
}

impl Transaction {
    pub fn new(client: u32, nonce: u64, size_bytes: u64, conflict_class: Option<u64>, submit_round: Round) -> Self {
        let class = conflict_class.map_or([0xff; 9], |c| {
            let mut b = [0u8; 9];
            b[..8].copy_from_slice(&c.to_le_bytes());
            b
        });
        let id = TxId(digest64(&[
            b"tx",
            &client.to_le_bytes(),
            &nonce.to_le_bytes(),
            &size_bytes.to_le_bytes(),
            &class,
        ]));
        Transaction {
            id,
            client,
            nonce,
            size_bytes,
            conflict_class,
            submit_round,
        }
    }

    /// Test helper: a transaction with a chosen identifier.
    pub fn with_id(id: u64, size_bytes: u64, conflict_class: Option<u64>) -> Self {
        Transaction {
            id: TxId(id),
            client: 0,
            nonce: id,
            size_bytes,
            conflict_class,
            submit_round: 0,
        }
    }
}

/// Simulated signature: an opaque tag only the signer's code path produces.
///
/// Verification recomputes the tag from the signer identity and the message
/// digest; a fabricated tag fails with overwhelming probability.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub signer: NodeId,
    pub tag: u64,
}

const SIGNING_DOMAIN: &[u8] = b"il-lab/sim-signature/v1";

impl Signature {
    pub fn sign(signer: NodeId, message: u64) -> Self {
        Signature {
            signer,
            tag: digest64(&[SIGNING_DOMAIN, &signer.0.to_le_bytes(), &message.to_le_bytes()]),
        }
    }

    pub fn verify(&self, signer: NodeId, message: u64) -> bool {
        self.signer == signer && *self == Signature::sign(signer, message)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tx_ids_are_content_addressed() {
        let a = Transaction::new(1, 7, 250, None, 0);
        let b = Transaction::new(1, 7, 250, None, 99);
        let c = Transaction::new(1, 8, 250, None, 0);
        assert_eq!(a.id, b.id);
        assert_ne!(a.id, c.id);
        assert_ne!(a.id, Transaction::new(1, 7, 250, Some(0), 0).id);
    }

    #[test]
    fn forged_signatures_fail() {
        let sig = Signature::sign(NodeId(3), 42);
        assert!(sig.verify(NodeId(3), 42));
        assert!(!sig.verify(NodeId(3), 43));
        assert!(!sig.verify(NodeId(2), 42));
        let forged = Signature {
            signer: NodeId(2),
            tag: sig.tag,
        };
        assert!(!forged.verify(NodeId(2), 42));
    }
}
