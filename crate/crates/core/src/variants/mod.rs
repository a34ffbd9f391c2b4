//! Inclusion-list strategies plugged into the epoch host.
//!
//! Each variant fixes the entry form of its lists, when a received list is
//! usable by the leader, how the block is derived from the chosen lists, and
//! what a replica checks before voting.

pub mod il;
pub mod select;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::consensus::{leader_of, Block, Evidence, Proposal, RejectReason, Verdict};
use crate::dissemination::RetrievabilityCertificate;
use crate::types::{Epoch, NodeId, Round, Transaction, TxId};

pub use il::{make_il, Entry, EntryForm, InclusionList};
pub use select::{resolve_conflicts, select, select_frequency, select_prefix, ConflictResolution, SelectionRule};

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Plain,
    IlBase,
    IlDa,
    IlRbc,
    IlGossip,
    IlLocal,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Plain,
        Variant::IlBase,
        Variant::IlDa,
        Variant::IlRbc,
        Variant::IlGossip,
        Variant::IlLocal,
    ];

    pub const IL: [Variant; 5] = [
        Variant::IlBase,
        Variant::IlDa,
        Variant::IlRbc,
        Variant::IlGossip,
        Variant::IlLocal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::IlBase => "il-base",
            Variant::IlDa => "il-da",
            Variant::IlRbc => "il-rbc",
            Variant::IlGossip => "il-gossip",
            Variant::IlLocal => "il-local",
        }
    }

    pub fn uses_ils(self) -> bool {
        self != Variant::Plain
    }

    pub fn entry_form(self) -> EntryForm {
        match self {
            Variant::Plain | Variant::IlBase | Variant::IlLocal => EntryForm::FullTx,
            Variant::IlRbc | Variant::IlGossip => EntryForm::TxHash,
            Variant::IlDa => EntryForm::DaCert,
        }
    }

    /// Lists a valid proposal must evidence (n−f), or lists-used size (2f+1).
    pub fn il_threshold(self, n: usize, f: usize) -> usize {
        match self {
            Variant::Plain => 0,
            Variant::IlLocal => 2 * f + 1,
            _ => n - f,
        }
    }

    /// Default number of replicas a client sends each transaction to.
    pub fn default_recipients(self, n: usize, f: usize) -> usize {
        match self {
            Variant::IlBase | Variant::IlGossip => 2 * f + 1,
            Variant::Plain | Variant::IlLocal | Variant::IlDa | Variant::IlRbc => n,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariantConfig {
    pub variant: Variant,
    pub selection_rule: SelectionRule,
    /// `None` is unbounded.
    pub block_capacity_bytes: Option<u64>,
    /// DA: blocks carry certificates instead of payloads.
    pub cert_only_blocks: bool,
    /// DA: lists may carry certificates that retrieve to ⊥.
    pub allow_invalid_certs: bool,
    /// Whether the leader's own list counts toward the threshold.
    pub leader_il_counts: bool,
    /// Plain host: propose even with an empty mempool.
    pub allow_empty_blocks: bool,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig {
            variant: Variant::Plain,
            selection_rule: SelectionRule::Frequency,
            block_capacity_bytes: None,
            cert_only_blocks: false,
            allow_invalid_certs: false,
            leader_il_counts: true,
            allow_empty_blocks: true,
        }
    }
}

impl VariantConfig {
    pub fn of(variant: Variant) -> Self {
        VariantConfig {
            variant,
            ..Default::default()
        }
    }

    fn da_blocks_carry_certs(&self) -> bool {
        self.cert_only_blocks || self.allow_invalid_certs
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CertStatus {
    Retrieved(Transaction),
    Bottom,
    Unknown,
}

/// Local knowledge a replica consults while building or judging blocks.
pub trait Resolver {
    fn is_committed(&self, id: TxId) -> bool;
    /// Payload available locally (RBC-delivered or gossip-received).
    fn has_payload(&self, id: TxId) -> bool;
    fn cert_status(&self, cert: &RetrievabilityCertificate) -> CertStatus;
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum IlStatus {
    Eligible,
    Pending,
    Invalid(RejectReason),
}

/// Whether a received list can be used (leader) or accepted (voter) now.
pub fn il_status(cfg: &VariantConfig, il: &InclusionList, resolver: &dyn Resolver) -> IlStatus {
    if !il.is_authentic() || !il.is_well_formed(cfg.variant.entry_form()) {
        return IlStatus::Invalid(RejectReason::InvalidIl);
    }
    let live = il.entries.iter().filter(|e| !resolver.is_committed(e.tx_id()));
    match cfg.variant {
        Variant::Plain | Variant::IlBase | Variant::IlLocal => IlStatus::Eligible,
        Variant::IlRbc | Variant::IlGossip => {
            if live.into_iter().all(|e| resolver.has_payload(e.tx_id())) {
                IlStatus::Eligible
            } else {
                IlStatus::Pending
            }
        }
        Variant::IlDa => {
            if cfg.allow_invalid_certs {
                return IlStatus::Eligible;
            }
            let mut pending = false;
            for entry in live {
                let Entry::Cert(cert) = entry else {
                    unreachable!("form checked")
                };
                match resolver.cert_status(cert) {
                    CertStatus::Retrieved(_) => {}
                    CertStatus::Bottom => return IlStatus::Invalid(RejectReason::UnretrievableCert),
                    CertStatus::Unknown => pending = true,
                }
            }
            if pending {
                IlStatus::Pending
            } else {
                IlStatus::Eligible
            }
        }
    }
}

fn union_in_author_order<'a>(ils: &[&'a InclusionList], resolver: &dyn Resolver) -> Vec<&'a Entry> {
    let mut sorted = ils.to_vec();
    sorted.sort_by_key(|il| il.author);
    let mut seen = BTreeSet::new();
    sorted
        .iter()
        .flat_map(|il| il.entries.iter())
        .filter(|e| !resolver.is_committed(e.tx_id()) && seen.insert(e.tx_id()))
        .collect()
}

/// Deterministic block content from the chosen lists.
pub fn derive_entries(cfg: &VariantConfig, ils: &[&InclusionList], resolver: &dyn Resolver) -> Vec<Entry> {
    let committed = |id| resolver.is_committed(id);
    match cfg.variant {
        Variant::Plain => Vec::new(),
        Variant::IlBase => select(ils, cfg.selection_rule, cfg.block_capacity_bytes, committed)
            .into_iter()
            .map(Entry::Full)
            .collect(),
        Variant::IlLocal => select(ils, SelectionRule::Prefix, None, committed)
            .into_iter()
            .map(Entry::Full)
            .collect(),
        Variant::IlRbc | Variant::IlGossip => union_in_author_order(ils, resolver).into_iter().cloned().collect(),
        Variant::IlDa => union_in_author_order(ils, resolver)
            .into_iter()
            .filter_map(|e| match e {
                Entry::Cert(cert) if cfg.da_blocks_carry_certs() => Some(Entry::Cert(cert.clone())),
                Entry::Cert(cert) => match resolver.cert_status(cert) {
                    CertStatus::Retrieved(tx) => Some(Entry::Full(tx)),
                    _ => None,
                },
                _ => None,
            })
            .collect(),
    }
}

/// Block over the chosen lists; evidence is the lists themselves, or their
/// authors for the local variant.
pub fn build_il_block(
    cfg: &VariantConfig,
    epoch: Epoch,
    leader: NodeId,
    round: Round,
    chosen: &[&InclusionList],
    resolver: &dyn Resolver,
) -> Block {
    let entries = derive_entries(cfg, chosen, resolver);
    let mut lists: Vec<InclusionList> = chosen.iter().map(|il| (*il).clone()).collect();
    lists.sort_by_key(|il| il.author);
    let evidence = if cfg.variant == Variant::IlLocal {
        Evidence::ListsUsed(lists.iter().map(|il| il.author).collect())
    } else {
        Evidence::Ils(lists)
    };
    Block {
        epoch,
        leader,
        proposed_round: round,
        entries,
        evidence,
    }
}

/// Plain-host block: pending transactions in `(submit_round, tx_id)` order,
/// cut at the first one that overflows capacity.
pub fn build_plain_block(
    epoch: Epoch,
    leader: NodeId,
    round: Round,
    mempool: impl IntoIterator<Item = Transaction>,
    capacity: Option<u64>,
) -> Block {
    let mut txs: Vec<Transaction> = mempool.into_iter().collect();
    txs.sort_by_key(|t| (t.submit_round, t.id));
    txs.dedup_by_key(|t| t.id);
    let mut used = 0;
    let mut seen_classes = BTreeSet::new();
    let mut entries = Vec::new();
    for tx in txs {
        if capacity.is_some_and(|cap| used + tx.size_bytes > cap) {
            break;
        }
        if let Some(class) = tx.conflict_class {
            if !seen_classes.insert(class) {
                continue;
            }
        }
        used += tx.size_bytes;
        entries.push(Entry::Full(tx));
    }
    Block {
        epoch,
        leader,
        proposed_round: round,
        entries,
        evidence: Evidence::None,
    }
}

/// Replica-side context for judging one proposal.
pub struct Judge<'a> {
    pub cfg: &'a VariantConfig,
    pub n: usize,
    pub f: usize,
    pub me: NodeId,
    /// The list this replica sent for the proposal's epoch, if any.
    pub own_il: Option<&'a InclusionList>,
}

impl Judge<'_> {
    pub fn validate(&self, proposal: &Proposal, resolver: &dyn Resolver) -> Verdict {
        let block = &proposal.block;
        if block.leader != leader_of(block.epoch, self.n) {
            return Verdict::Reject(RejectReason::WrongLeader);
        }
        if !proposal.is_authentic() {
            return Verdict::Reject(RejectReason::BadSignature);
        }
        if let Some(reason) = self.check_entries(block, resolver) {
            return Verdict::Reject(reason);
        }
        match (&block.evidence, self.cfg.variant) {
            (Evidence::None, Variant::Plain) => Verdict::Accept,
            (Evidence::ListsUsed(ids), Variant::IlLocal) => self.validate_local(block, ids, resolver),
            (Evidence::Ils(ils), v) if v.uses_ils() && v != Variant::IlLocal => {
                self.validate_embedded(block, ils, resolver)
            }
            _ => Verdict::Reject(RejectReason::UnexpectedEvidence),
        }
    }

    fn check_entries(&self, block: &Block, resolver: &dyn Resolver) -> Option<RejectReason> {
        let mut ids = BTreeSet::new();
        let mut classes = BTreeSet::new();
        let mut bytes = 0u64;
        for entry in &block.entries {
            if !ids.insert(entry.tx_id()) {
                return Some(RejectReason::DuplicateTx);
            }
            if resolver.is_committed(entry.tx_id()) {
                return Some(RejectReason::AlreadyCommitted);
            }
            if let Entry::Full(tx) = entry {
                bytes += tx.size_bytes;
                if tx.conflict_class.is_some_and(|c| !classes.insert(c)) {
                    return Some(RejectReason::ConflictingTxs);
                }
            }
        }
        let capacity_binds = matches!(self.cfg.variant, Variant::Plain | Variant::IlBase);
        if capacity_binds && self.cfg.block_capacity_bytes.is_some_and(|cap| bytes > cap) {
            return Some(RejectReason::CapacityExceeded);
        }
        None
    }

    fn validate_embedded(&self, block: &Block, ils: &[InclusionList], resolver: &dyn Resolver) -> Verdict {
        let mut authors = BTreeSet::new();
        let mut pending = false;
        for il in ils {
            if il.epoch != block.epoch || !authors.insert(il.author) {
                return Verdict::Reject(RejectReason::InvalidIl);
            }
            match il_status(self.cfg, il, resolver) {
                IlStatus::Eligible => {}
                IlStatus::Pending => pending = true,
                IlStatus::Invalid(reason) => return Verdict::Reject(reason),
            }
        }
        let counted = authors
            .iter()
            .filter(|a| self.cfg.leader_il_counts || **a != block.leader)
            .count();
        if counted < self.cfg.variant.il_threshold(self.n, self.f) {
            return Verdict::Reject(RejectReason::InsufficientIls);
        }
        if pending {
            return Verdict::Pending;
        }
        let refs: Vec<&InclusionList> = ils.iter().collect();
        if derive_entries(self.cfg, &refs, resolver) != block.entries {
            return Verdict::Reject(RejectReason::BlockMismatch);
        }
        Verdict::Accept
    }

    fn validate_local(&self, block: &Block, ids: &[NodeId], resolver: &dyn Resolver) -> Verdict {
        validate_local(self.n, self.f, self.me, self.own_il, block, ids, resolver)
    }
}

/// Lists-used check: at least 2f+1 distinct ids; a listed replica also checks
/// that every live entry of its own list made it into the block (or lost a
/// conflict to a transaction of the same class that did).
pub fn validate_local(
    n: usize,
    f: usize,
    me: NodeId,
    own_il: Option<&InclusionList>,
    block: &Block,
    lists_used: &[NodeId],
    resolver: &dyn Resolver,
) -> Verdict {
    let distinct: BTreeSet<NodeId> = lists_used.iter().copied().collect();
    if distinct.len() != lists_used.len() || distinct.iter().any(|id| id.index() >= n) {
        return Verdict::Reject(RejectReason::InvalidIl);
    }
    if distinct.len() < 2 * f + 1 {
        return Verdict::Reject(RejectReason::InsufficientLists);
    }
    if !distinct.contains(&me) {
        return Verdict::Accept;
    }
    let Some(own) = own_il else {
        return Verdict::Accept;
    };
    let in_block: BTreeSet<TxId> = block.tx_ids().collect();
    let classes: BTreeSet<u64> = block
        .entries
        .iter()
        .filter_map(|e| e.as_full().and_then(|t| t.conflict_class))
        .collect();
    let honored = own
        .full_txs()
        .filter(|t| !resolver.is_committed(t.id))
        .all(|t| in_block.contains(&t.id) || t.conflict_class.is_some_and(|c| classes.contains(&c)));
    if honored {
        Verdict::Accept
    } else {
        Verdict::Reject(RejectReason::IlOmitted)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[derive(Default)]
    pub(crate) struct MapResolver {
        pub committed: BTreeSet<TxId>,
        pub payloads: BTreeSet<TxId>,
        pub certs: BTreeMap<TxId, CertStatus>,
    }

    impl Resolver for MapResolver {
        fn is_committed(&self, id: TxId) -> bool {
            self.committed.contains(&id)
        }
        fn has_payload(&self, id: TxId) -> bool {
            self.payloads.contains(&id)
        }
        fn cert_status(&self, cert: &RetrievabilityCertificate) -> CertStatus {
            self.certs
                .get(&cert.content_hash)
                .cloned()
                .unwrap_or(CertStatus::Unknown)
        }
    }

    fn full_il(author: u32, epoch: Epoch, txs: &[&Transaction]) -> InclusionList {
        InclusionList::new(
            NodeId(author),
            epoch,
            txs.iter().map(|t| Entry::Full((*t).clone())).collect(),
        )
    }

    fn judge<'a>(cfg: &'a VariantConfig, me: u32, own: Option<&'a InclusionList>) -> Judge<'a> {
        Judge {
            cfg,
            n: 4,
            f: 1,
            me: NodeId(me),
            own_il: own,
        }
    }

    #[test]
    fn base_threshold_is_n_minus_f() {
        let cfg = VariantConfig::of(Variant::IlBase);
        let t = Transaction::new(0, 1, 100, None, 0);
        let r = MapResolver::default();
        let ils: Vec<InclusionList> = (0..4).map(|a| full_il(a, 4, &[&t])).collect();
        let two: Vec<&InclusionList> = ils[..2].iter().collect();
        let three: Vec<&InclusionList> = ils[..3].iter().collect();
        let p2 = Proposal::new(build_il_block(&cfg, 4, NodeId(0), 9, &two, &r));
        let p3 = Proposal::new(build_il_block(&cfg, 4, NodeId(0), 9, &three, &r));
        assert_eq!(
            judge(&cfg, 3, None).validate(&p2, &r),
            Verdict::Reject(RejectReason::InsufficientIls)
        );
        assert_eq!(judge(&cfg, 3, None).validate(&p3, &r), Verdict::Accept);
        match &p3.block.evidence {
            Evidence::Ils(v) => assert_eq!(v.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_leader_rejected() {
        let cfg = VariantConfig::of(Variant::Plain);
        let p = Proposal::new(build_plain_block(1, NodeId(0), 0, [], None));
        assert_eq!(
            judge(&cfg, 2, None).validate(&p, &MapResolver::default()),
            Verdict::Reject(RejectReason::WrongLeader)
        );
    }

    #[test]
    fn leader_own_list_toggle() {
        let mut cfg = VariantConfig::of(Variant::IlBase);
        cfg.leader_il_counts = false;
        let r = MapResolver::default();
        let ils: Vec<InclusionList> = (0..4).map(|a| full_il(a, 0, &[])).collect();
        let with_leader: Vec<&InclusionList> = ils[..3].iter().collect();
        let p = Proposal::new(build_il_block(&cfg, 0, NodeId(0), 0, &with_leader, &r));
        assert_eq!(
            judge(&cfg, 1, None).validate(&p, &r),
            Verdict::Reject(RejectReason::InsufficientIls)
        );
        let others: Vec<&InclusionList> = ils[1..].iter().collect();
        let p = Proposal::new(build_il_block(&cfg, 0, NodeId(0), 0, &others, &r));
        assert_eq!(judge(&cfg, 1, None).validate(&p, &r), Verdict::Accept);
    }

    #[test]
    fn tampered_block_mismatch() {
        let cfg = VariantConfig::of(Variant::IlBase);
        let r = MapResolver::default();
        let t = Transaction::new(0, 1, 100, None, 0);
        let ils: Vec<InclusionList> = (0..3).map(|a| full_il(a, 0, &[&t])).collect();
        let refs: Vec<&InclusionList> = ils.iter().collect();
        let mut block = build_il_block(&cfg, 0, NodeId(0), 0, &refs, &r);
        block.entries.clear();
        let p = Proposal::new(block);
        assert_eq!(
            judge(&cfg, 1, None).validate(&p, &r),
            Verdict::Reject(RejectReason::BlockMismatch)
        );
    }

    #[test]
    fn rbc_lists_wait_for_payloads() {
        let cfg = VariantConfig::of(Variant::IlRbc);
        let t = Transaction::new(0, 1, 100, None, 0);
        let il = InclusionList::new(NodeId(1), 0, vec![Entry::Hash(t.id)]);
        let mut r = MapResolver::default();
        assert_eq!(il_status(&cfg, &il, &r), IlStatus::Pending);
        r.payloads.insert(t.id);
        assert_eq!(il_status(&cfg, &il, &r), IlStatus::Eligible);
    }

    #[test]
    fn rbc_block_dedups_hashes() {
        let cfg = VariantConfig::of(Variant::IlRbc);
        let t = Transaction::new(0, 1, 100, None, 0);
        let ils: Vec<InclusionList> = (0..3)
            .map(|a| InclusionList::new(NodeId(a), 0, vec![Entry::Hash(t.id)]))
            .collect();
        let refs: Vec<&InclusionList> = ils.iter().collect();
        let b = build_il_block(&cfg, 0, NodeId(0), 0, &refs, &MapResolver::default());
        assert_eq!(b.entries, vec![Entry::Hash(t.id)]);
    }

    #[test]
    fn local_checks() {
        let cfg = VariantConfig::of(Variant::IlLocal);
        let r = MapResolver::default();
        let t1 = Transaction::new(1, 1, 100, None, 0);
        let t2 = Transaction::new(2, 2, 100, None, 0);
        let ils = [full_il(0, 0, &[]), full_il(1, 0, &[&t1]), full_il(2, 0, &[&t2])];
        let refs: Vec<&InclusionList> = ils.iter().collect();
        let honest = Proposal::new(build_il_block(&cfg, 0, NodeId(0), 0, &refs, &r));
        for me in 0..4 {
            let own = ils.get(me as usize);
            assert_eq!(judge(&cfg, me, own).validate(&honest, &r), Verdict::Accept);
        }
        // Leader lists r1 but drops t1.
        let mut block = honest.block.clone();
        block.entries.retain(|e| e.tx_id() != t1.id);
        let cheat = Proposal::new(block);
        assert_eq!(
            judge(&cfg, 1, Some(&ils[1])).validate(&cheat, &r),
            Verdict::Reject(RejectReason::IlOmitted)
        );
        assert_eq!(judge(&cfg, 2, Some(&ils[2])).validate(&cheat, &r), Verdict::Accept);
        assert_eq!(judge(&cfg, 3, None).validate(&cheat, &r), Verdict::Accept);
        // Only 2f lists.
        let short = Proposal::new(build_il_block(&cfg, 0, NodeId(0), 0, &refs[..2], &r));
        assert_eq!(
            judge(&cfg, 3, None).validate(&short, &r),
            Verdict::Reject(RejectReason::InsufficientLists)
        );
    }

    #[test]
    fn da_invalid_cert_excludes_list() {
        let cfg = VariantConfig::of(Variant::IlDa);
        let cert = RetrievabilityCertificate {
            content_hash: TxId(5),
            acks: vec![],
        };
        let il = InclusionList::new(NodeId(1), 0, vec![Entry::Cert(cert)]);
        let mut r = MapResolver::default();
        r.certs.insert(TxId(5), CertStatus::Bottom);
        assert_eq!(
            il_status(&cfg, &il, &r),
            IlStatus::Invalid(RejectReason::UnretrievableCert)
        );
        let lax = VariantConfig {
            allow_invalid_certs: true,
            ..cfg
        };
        assert_eq!(il_status(&lax, &il, &r), IlStatus::Eligible);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
    }
}
