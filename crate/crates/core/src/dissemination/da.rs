//! Replication-based data-availability scheme.
//!
//! Clients disperse a transaction to every storage node and gather signed
//! acknowledgements into a certificate of retrievability. Readers query all
//! storage nodes and accept a payload once `f_s + 1` responses match the
//! certified content hash.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::types::{NodeId, Signature, Transaction, TxId};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DaParams {
    pub n_s: usize,
    pub f_s: usize,
    /// Node id of the first storage node; storage ids are contiguous.
    pub first_storage: u32,
}

impl DaParams {
    pub fn ack_quorum(&self) -> usize {
        self.n_s - self.f_s
    }

    pub fn read_quorum(&self) -> usize {
        self.f_s + 1
    }

    pub fn storage_nodes(&self) -> impl Iterator<Item = NodeId> {
        let first = self.first_storage;
        (0..self.n_s as u32).map(move |i| NodeId(first + i))
    }

    pub fn is_storage(&self, node: NodeId) -> bool {
        node.0 >= self.first_storage && node.0 < self.first_storage + self.n_s as u32
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RetrievabilityCertificate {
    pub content_hash: TxId,
    pub acks: Vec<Signature>,
}

impl RetrievabilityCertificate {
    /// Valid iff at least `n_s - f_s` distinct storage nodes signed the hash.
    pub fn is_valid(&self, params: &DaParams) -> bool {
        let signers: BTreeSet<NodeId> = self
            .acks
            .iter()
            .filter(|sig| params.is_storage(sig.signer) && sig.verify(sig.signer, self.content_hash.0))
            .map(|sig| sig.signer)
            .collect();
        signers.len() >= params.ack_quorum()
    }
}

#[derive(Clone, Debug)]
pub struct StorageNode {
    pub id: NodeId,
    store: BTreeMap<TxId, Transaction>,
}

impl StorageNode {
    pub fn new(id: NodeId) -> Self {
        StorageNode {
            id,
            store: BTreeMap::new(),
        }
    }

    /// Stores the payload and returns the signed acknowledgement.
    pub fn store(&mut self, tx: Transaction) -> Signature {
        let sig = Signature::sign(self.id, tx.id.0);
        self.store.insert(tx.id, tx);
        sig
    }

    pub fn query(&self, content_hash: TxId) -> Option<Transaction> {
        self.store.get(&content_hash).cloned()
    }
}

/// Client-side collection of acknowledgements for one dispersal.
#[derive(Clone, Debug)]
pub struct Dispersal {
    pub tx: Transaction,
    params: DaParams,
    acks: BTreeMap<NodeId, Signature>,
    done: bool,
}

impl Dispersal {
    pub fn new(tx: Transaction, params: DaParams) -> Self {
        Dispersal {
            tx,
            params,
            acks: BTreeMap::new(),
            done: false,
        }
    }

    /// Returns the certificate the first time the ack quorum is reached.
    pub fn on_ack(&mut self, from: NodeId, sig: Signature) -> Option<RetrievabilityCertificate> {
        if self.done || !self.params.is_storage(from) || !sig.verify(from, self.tx.id.0) {
            return None;
        }
        self.acks.insert(from, sig);
        if self.acks.len() >= self.params.ack_quorum() {
            self.done = true;
            return Some(RetrievabilityCertificate {
                content_hash: self.tx.id,
                acks: self.acks.values().copied().collect(),
            });
        }
        None
    }
}

/// Reader-side state of one `retrieve` call.
#[derive(Clone, Debug)]
pub struct RetrieveSession {
    cert: RetrievabilityCertificate,
    params: DaParams,
    responded: BTreeSet<NodeId>,
    matching: BTreeSet<NodeId>,
    payload: Option<Transaction>,
    outcome: Option<Option<Transaction>>,
}

impl RetrieveSession {
    /// Starts a read. A structurally invalid certificate resolves to ⊥ at once.
    pub fn start(cert: RetrievabilityCertificate, params: DaParams) -> Self {
        let outcome = if cert.is_valid(&params) { None } else { Some(None) };
        RetrieveSession {
            cert,
            params,
            responded: BTreeSet::new(),
            matching: BTreeSet::new(),
            payload: None,
            outcome,
        }
    }

    pub fn cert(&self) -> &RetrievabilityCertificate {
        &self.cert
    }

    pub fn outcome(&self) -> Option<&Option<Transaction>> {
        self.outcome.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.outcome.is_some()
    }

    /// Feeds one storage response; returns the outcome once decided.
    pub fn on_reply(&mut self, from: NodeId, reply: Option<Transaction>) -> Option<Option<Transaction>> {
        if self.outcome.is_some() {
            return None;
        }
        if !self.params.is_storage(from) || !self.responded.insert(from) {
            return None;
        }
        if let Some(tx) = reply {
            if tx.id == self.cert.content_hash {
                self.matching.insert(from);
                self.payload.get_or_insert(tx);
            }
        }
        if self.matching.len() >= self.params.read_quorum() {
            self.outcome = Some(self.payload.clone());
        } else if self.responded.len() == self.params.n_s {
            self.outcome = Some(None);
        }
        self.outcome.clone()
    }

    /// Read deadline: whatever has not matched by now is ⊥.
    pub fn on_deadline(&mut self) -> Option<Transaction> {
        if self.outcome.is_none() {
            self.outcome = Some(if self.matching.len() >= self.params.read_quorum() {
                self.payload.clone()
            } else {
                None
            });
        }
        self.outcome.clone().flatten()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> DaParams {
        DaParams {
            n_s: 4,
            f_s: 1,
            first_storage: 10,
        }
    }

    fn disperse(tx: &Transaction, acks: usize) -> (Vec<StorageNode>, Option<RetrievabilityCertificate>) {
        let p = params();
        let mut nodes: Vec<StorageNode> = p.storage_nodes().map(StorageNode::new).collect();
        let mut d = Dispersal::new(tx.clone(), p);
        let mut cert = None;
        for node in nodes.iter_mut().take(acks) {
            let sig = node.store(tx.clone());
            if let Some(c) = d.on_ack(node.id, sig) {
                cert = Some(c);
            }
        }
        (nodes, cert)
    }

    #[test]
    fn three_acks_make_a_valid_certificate() {
        let tx = Transaction::new(1, 1, 250, None, 0);
        let (_, cert) = disperse(&tx, 3);
        assert!(cert.unwrap().is_valid(&params()));
    }

    #[test]
    fn two_acks_are_not_enough() {
        let tx = Transaction::new(1, 1, 250, None, 0);
        let (nodes, cert) = disperse(&tx, 2);
        assert!(cert.is_none());
        let partial = RetrievabilityCertificate {
            content_hash: tx.id,
            acks: nodes[..2].iter().map(|n| Signature::sign(n.id, tx.id.0)).collect(),
        };
        assert!(!partial.is_valid(&params()));
    }

    #[test]
    fn honest_dispersal_retrieves_original_despite_a_liar() {
        let tx = Transaction::new(1, 1, 250, None, 0);
        let (nodes, cert) = disperse(&tx, 4);
        let mut read = RetrieveSession::start(cert.unwrap(), params());
        let lie = Transaction::new(6, 6, 250, None, 0);
        assert_eq!(read.on_reply(nodes[3].id, Some(lie)), None);
        assert_eq!(read.on_reply(nodes[0].id, nodes[0].query(tx.id)), None);
        assert_eq!(read.on_reply(nodes[1].id, nodes[1].query(tx.id)), Some(Some(tx)));
    }

    #[test]
    fn forged_acks_read_as_bottom() {
        let tx = Transaction::new(1, 1, 250, None, 0);
        let forged = RetrievabilityCertificate {
            content_hash: tx.id,
            acks: params()
                .storage_nodes()
                .map(|id| Signature { signer: id, tag: 12345 })
                .collect(),
        };
        let read = RetrieveSession::start(forged, params());
        assert_eq!(read.outcome(), Some(&None));
    }

    #[test]
    fn deadline_without_quorum_is_bottom() {
        let tx = Transaction::new(1, 1, 250, None, 0);
        let (nodes, cert) = disperse(&tx, 4);
        let mut read = RetrieveSession::start(cert.unwrap(), params());
        read.on_reply(nodes[0].id, nodes[0].query(tx.id));
        assert_eq!(read.on_deadline(), None);
    }
}
