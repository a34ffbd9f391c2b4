//! Inclusion lists and their entries.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dissemination::RetrievabilityCertificate;
use crate::types::{digest64, Epoch, NodeId, Round, Signature, Transaction, TxId};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryForm {
    FullTx,
    TxHash,
    DaCert,
}

/// A reference to a transaction in an inclusion list or block.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Entry {
    Full(Transaction),
    Hash(TxId),
    Cert(RetrievabilityCertificate),
}

impl Entry {
    pub fn tx_id(&self) -> TxId {
        match self {
            Entry::Full(tx) => tx.id,
            Entry::Hash(id) => *id,
            Entry::Cert(cert) => cert.content_hash,
        }
    }

    pub fn form(&self) -> EntryForm {
        match self {
            Entry::Full(_) => EntryForm::FullTx,
            Entry::Hash(_) => EntryForm::TxHash,
            Entry::Cert(_) => EntryForm::DaCert,
        }
    }

    pub fn as_full(&self) -> Option<&Transaction> {
        match self {
            Entry::Full(tx) => Some(tx),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InclusionList {
    pub author: NodeId,
    pub epoch: Epoch,
    pub entries: Vec<Entry>,
    pub sig: Signature,
}

impl InclusionList {
    fn digest(author: NodeId, epoch: Epoch, entries: &[Entry]) -> u64 {
        let ids: Vec<u8> = entries.iter().flat_map(|e| e.tx_id().0.to_le_bytes()).collect();
        digest64(&[b"il", &author.0.to_le_bytes(), &epoch.to_le_bytes(), &ids])
    }

    pub fn new(author: NodeId, epoch: Epoch, entries: Vec<Entry>) -> Self {
        let sig = Signature::sign(author, Self::digest(author, epoch, &entries));
        InclusionList {
            author,
            epoch,
            entries,
            sig,
        }
    }

    pub fn is_authentic(&self) -> bool {
        self.sig
            .verify(self.author, Self::digest(self.author, self.epoch, &self.entries))
    }

    /// Distinct entries of a single, expected form.
    pub fn is_well_formed(&self, form: EntryForm) -> bool {
        let mut seen = BTreeSet::new();
        self.entries.iter().all(|e| e.form() == form && seen.insert(e.tx_id()))
    }

    pub fn contains(&self, id: TxId) -> bool {
        self.entries.iter().any(|e| e.tx_id() == id)
    }

    pub fn full_txs(&self) -> impl Iterator<Item = &Transaction> {
        self.entries.iter().filter_map(Entry::as_full)
    }
}

/// Builds a signed list over `candidates`, ordered by `(submit_round, tx_id)`.
///
/// `omit` removes committed, already-proposed, or censored entries.
pub fn make_il(
    author: NodeId,
    epoch: Epoch,
    candidates: impl IntoIterator<Item = (Round, Entry)>,
    omit: impl Fn(TxId) -> bool,
) -> InclusionList {
    let mut keyed: Vec<(Round, TxId, Entry)> = candidates
        .into_iter()
        .filter(|(_, e)| !omit(e.tx_id()))
        .map(|(r, e)| (r, e.tx_id(), e))
        .collect();
    keyed.sort_by_key(|(r, id, _)| (*r, *id));
    keyed.dedup_by_key(|(_, id, _)| *id);
    InclusionList::new(author, epoch, keyed.into_iter().map(|(_, _, e)| e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn make_il_orders_and_filters() {
        let t1 = Transaction::new(0, 1, 100, None, 3);
        let t2 = Transaction::new(0, 2, 100, None, 1);
        let t3 = Transaction::new(0, 3, 100, None, 2);
        let il = make_il(
            NodeId(1),
            4,
            [&t1, &t2, &t3].map(|t| (t.submit_round, Entry::Full(t.clone()))),
            |id| id == t3.id,
        );
        assert_eq!(il.entries, vec![Entry::Full(t2), Entry::Full(t1)]);
        assert!(il.is_authentic());
        assert!(il.is_well_formed(EntryForm::FullTx));
        assert!(!il.is_well_formed(EntryForm::TxHash));
    }

    #[test]
    fn empty_list_is_still_signed() {
        let il = make_il(NodeId(2), 0, Vec::new(), |_| false);
        assert!(il.entries.is_empty());
        assert!(il.is_authentic());
    }

    #[test]
    fn tampering_breaks_signature() {
        let t = Transaction::new(0, 1, 100, None, 0);
        let mut il = make_il(NodeId(2), 0, [(0, Entry::Full(t))], |_| false);
        il.entries.clear();
        assert!(!il.is_authentic());
    }
}
