//! Whole-system simulation: replicas, a client endpoint and storage nodes
//! driven by the round scheduler.
//!
//! Per round: deliveries in `(deliver_round, id)` order (handlers may send),
//! then client submissions, then each replica's end-of-round duties (timers,
//! pending judgements, leader readiness) in id order.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::adversary::{censor_lists_used, censor_subset, AdversaryConfig, Fallback, LeaderStrategy, NetworkStrategy};
use crate::consensus::{
    leader_of, Block, BlockRef, EpochAction, EpochState, Phase, Proposal, Verdict, Vote, VoteOutcome,
};
use crate::dissemination::{
    DaParams, Dispersal, GossipConfig, GossipState, RbcAction, RbcInstance, RbcMessage, RbcTag,
    RetrievabilityCertificate, RetrieveSession, StorageNode,
};
use crate::metrics::{Accounting, SizeModel};
use crate::net::{DelayPolicy, EnvelopeMeta, MsgKind, NetConfig, NetError, Network};
use crate::types::{Epoch, NodeId, Round, Signature, Transaction, TxId};
use crate::variants::{
    build_il_block, build_plain_block, il_status, make_il, CertStatus, Entry, IlStatus, InclusionList, Judge, Resolver,
    Variant, VariantConfig,
};

mod submission {
    use serde::{Deserialize, Serialize};

    use crate::types::{NodeId, Round, Transaction};

    /// One client transaction and where it is sent.
    #[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Submission {
        pub round: Round,
        pub client: u32,
        pub nonce: u64,
        pub size_bytes: u64,
        #[serde(default)]
        pub conflict_class: Option<u64>,
        pub recipients: Vec<NodeId>,
        #[serde(default)]
        pub target: bool,
        /// DA only: the client skips dispersal and sends a certificate
        /// without acknowledgements.
        #[serde(default)]
        pub forged_cert: bool,
    }

    impl Submission {
        pub fn tx(&self) -> Transaction {
            Transaction::new(
                self.client,
                self.nonce,
                self.size_bytes,
                self.conflict_class,
                self.round,
            )
        }
    }
}

pub use submission::Submission;

#[derive(Clone, Debug)]
pub enum Msg {
    Tx(Transaction),
    Il(InclusionList),
    Proposal(Proposal),
    /// Vote, with the sender's next-epoch list when addressed to that leader.
    Vote(Vote, Option<InclusionList>),
    Rbc(RbcMessage),
    GossipPush(Transaction),
    GossipDigest(Vec<TxId>),
    GossipRequest(Vec<TxId>),
    GossipReply(Vec<Transaction>),
    DaStore(Transaction),
    DaAck(TxId, Signature),
    DaCert(RetrievabilityCertificate),
    DaQuery(TxId),
    DaReply(TxId, Option<Transaction>),
}

impl Msg {
    pub fn kind(&self) -> MsgKind {
        match self {
            Msg::Tx(_) => MsgKind::ClientTx,
            Msg::Il(_) => MsgKind::InclusionList,
            Msg::Proposal(_) => MsgKind::Proposal,
            Msg::Vote(v, _) => match v.phase {
                Phase::Vote1 => MsgKind::Vote1,
                Phase::Vote2 => MsgKind::Vote2,
            },
            Msg::Rbc(RbcMessage::Send(..)) => MsgKind::RbcSend,
            Msg::Rbc(RbcMessage::Echo(..)) => MsgKind::RbcEcho,
            Msg::Rbc(RbcMessage::Ready(..)) => MsgKind::RbcReady,
            Msg::GossipPush(_) => MsgKind::GossipPush,
            Msg::GossipDigest(_) => MsgKind::GossipDigest,
            Msg::GossipRequest(_) => MsgKind::GossipRequest,
            Msg::GossipReply(_) => MsgKind::GossipReply,
            Msg::DaStore(_) => MsgKind::DaStore,
            Msg::DaAck(..) => MsgKind::DaAck,
            Msg::DaCert(_) => MsgKind::DaCert,
            Msg::DaQuery(_) => MsgKind::DaQuery,
            Msg::DaReply(..) => MsgKind::DaReply,
        }
    }

    pub fn bytes(&self, sizes: &SizeModel, variant: Variant) -> u64 {
        let hashes = |ids: &[TxId]| ids.len() as u64 * sizes.hash_bytes;
        match self {
            Msg::Tx(tx) | Msg::GossipPush(tx) | Msg::DaStore(tx) => tx.size_bytes,
            Msg::Il(il) => sizes.il_bytes(il),
            // Base-variant entries are re-derived from the embedded lists.
            Msg::Proposal(p) => sizes.proposal_bytes(&p.block, variant != Variant::IlBase),
            Msg::Vote(_, il) => sizes.sig_bytes + il.as_ref().map_or(0, |il| sizes.il_bytes(il)),
            Msg::Rbc(m) => m.value().size_bytes,
            Msg::GossipDigest(ids) | Msg::GossipRequest(ids) => hashes(ids),
            Msg::GossipReply(txs) => txs.iter().map(|t| t.size_bytes).sum(),
            Msg::DaAck(..) => sizes.sig_bytes,
            Msg::DaCert(_) => sizes.cert(),
            Msg::DaQuery(_) | Msg::DaReply(_, None) => sizes.hash_bytes,
            Msg::DaReply(_, Some(tx)) => tx.size_bytes,
        }
    }
}

/// Everything one simulation needs.
#[derive(Clone, Debug)]
pub struct SimSetup {
    pub net: NetConfig,
    pub variant: VariantConfig,
    pub gossip: GossipConfig,
    pub da: DaParams,
    pub adversary: AdversaryConfig,
    pub sizes: SizeModel,
    /// Run until every honest replica has left epoch `epochs - 1`.
    pub epochs: Epoch,
    pub max_rounds: Round,
    pub epoch_timeout: Round,
    pub record_trace: bool,
    pub submissions: Vec<Submission>,
}

/// Epoch timeout: four worst-case hops plus the variant's dissemination slack.
pub fn default_epoch_timeout(variant: Variant, n: usize, delta_cap: Round, gossip: &GossipConfig) -> Round {
    let extra = match variant {
        Variant::IlRbc => 2 * delta_cap,
        Variant::IlDa => 4 * delta_cap,
        Variant::IlGossip => (n as Round - 1) * gossip.anti_entropy_period + 2 * delta_cap,
        Variant::Plain | Variant::IlBase | Variant::IlLocal => 0,
    };
    4 * delta_cap + extra
}

impl SimSetup {
    pub fn new(net: NetConfig, variant: VariantConfig) -> Self {
        let gossip = GossipConfig::default();
        let da = DaParams {
            n_s: net.n,
            f_s: net.f,
            first_storage: net.n as u32 + 1,
        };
        let epoch_timeout = default_epoch_timeout(variant.variant, net.n, net.delta_cap, &gossip);
        SimSetup {
            net,
            variant,
            gossip,
            da,
            adversary: AdversaryConfig::default(),
            sizes: SizeModel::default(),
            epochs: 6,
            max_rounds: 10_000,
            epoch_timeout,
            record_trace: false,
            submissions: Vec::new(),
        }
    }

    pub fn client(&self) -> NodeId {
        NodeId(self.net.n as u32)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubmitRecord {
    pub round: Round,
    pub recipients: Vec<NodeId>,
    pub target: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalRecord {
    pub replica: NodeId,
    pub tx: TxId,
    pub start: Round,
    pub end: Round,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProposalRecord {
    pub epoch: Epoch,
    pub leader: NodeId,
    pub round: Round,
    pub block: BlockRef,
}

/// Event log of one run; honest replicas only unless stated.
#[derive(Clone, Debug)]
pub struct RunLog {
    pub n: usize,
    pub f: usize,
    pub variant: Variant,
    pub delta: Round,
    pub delta_cap: Round,
    pub rounds: Round,
    pub honest: BTreeSet<NodeId>,
    pub submissions: BTreeMap<TxId, SubmitRecord>,
    /// Round each honest replica could first put the transaction in a list
    /// (plain: mempool receipt).
    pub eligible: BTreeMap<TxId, BTreeMap<NodeId, Round>>,
    /// Round the client formed the certificate.
    pub dispersed: BTreeMap<TxId, Round>,
    pub retrievals: Vec<RetrievalRecord>,
    /// All proposals, including malicious ones.
    pub proposals: Vec<ProposalRecord>,
    pub blocks: BTreeMap<BlockRef, Block>,
    pub commits: BTreeMap<Epoch, BTreeMap<NodeId, (BlockRef, Round)>>,
    pub decided: BTreeMap<Epoch, BlockRef>,
    pub il_builds: BTreeMap<Epoch, BTreeMap<NodeId, Round>>,
    pub agreement_violations: Vec<Epoch>,
    pub honest_timeouts: u64,
    pub rejections: BTreeMap<String, u64>,
    pub accounting: Accounting,
    pub trace: Option<Vec<EnvelopeMeta>>,
    pub trace_digest: [u8; 32],
}

impl RunLog {
    fn record_commit(&mut self, epoch: Epoch, who: NodeId, block: BlockRef, round: Round) {
        self.commits
            .entry(epoch)
            .or_default()
            .entry(who)
            .or_insert((block, round));
        match self.decided.get(&epoch) {
            None => {
                self.decided.insert(epoch, block);
            }
            Some(b) if *b != block => self.agreement_violations.push(epoch),
            Some(_) => {}
        }
    }

    /// Round at which the `2f+1`-th honest replica committed `epoch`.
    pub fn commit_round(&self, epoch: Epoch) -> Option<Round> {
        let mut rounds: Vec<Round> = self.commits.get(&epoch)?.values().map(|(_, r)| *r).collect();
        rounds.sort_unstable();
        rounds.get(2 * self.f).copied()
    }

    /// Committed epochs in order, with their blocks.
    pub fn chain(&self) -> impl Iterator<Item = (Epoch, &Block)> {
        self.decided.iter().map(|(e, r)| (*e, &self.blocks[r]))
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error in `{key}`: {reason}")]
    Config { key: &'static str, reason: String },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("simulation hit the round cap at round {round} with {pending} envelopes in flight")]
    Timeout {
        round: Round,
        pending: usize,
        partial: Box<RunLog>,
    },
}

struct Shared {
    n: usize,
    f: usize,
    variant: VariantConfig,
    da: DaParams,
    client: NodeId,
    timeout: Round,
    delta_cap: Round,
    targets: BTreeSet<TxId>,
    adversary: AdversaryConfig,
    honest: BTreeSet<NodeId>,
}

struct Cx<'a> {
    round: Round,
    sh: &'a Shared,
    out: &'a mut Vec<(NodeId, NodeId, Msg)>,
    log: &'a mut RunLog,
}

impl Cx<'_> {
    fn send(&mut self, from: NodeId, to: NodeId, msg: Msg) {
        self.out.push((from, to, msg));
    }

    fn multicast(&mut self, from: NodeId, msg: Msg) {
        for r in 0..self.sh.n as u32 {
            if NodeId(r) != from {
                self.out.push((from, NodeId(r), msg.clone()));
            }
        }
    }
}

struct IlSlot {
    il: InclusionList,
    eligible: Option<Round>,
    invalid: bool,
}

enum CensorDecision {
    Block(Block),
    Wait,
    GiveUp,
}

struct Replica {
    id: NodeId,
    malicious: bool,
    bribed: bool,
    da: DaParams,
    epoch: Epoch,
    epoch_start: Round,
    states: BTreeMap<Epoch, EpochState>,
    /// List-eligible entries keyed by id, with their ordering round.
    pool: BTreeMap<TxId, (Round, Entry)>,
    committed: BTreeSet<TxId>,
    payloads: BTreeMap<TxId, Transaction>,
    rbc: BTreeMap<RbcTag, RbcInstance>,
    gossip: Option<GossipState>,
    retrievals: BTreeMap<TxId, (Round, RetrieveSession)>,
    cert_results: BTreeMap<TxId, Option<Transaction>>,
    client_certs: BTreeMap<TxId, RetrievabilityCertificate>,
    own_ils: BTreeMap<Epoch, InclusionList>,
    inbox: BTreeMap<Epoch, BTreeMap<NodeId, IlSlot>>,
    proposals: BTreeMap<Epoch, Vec<Proposal>>,
    judged: BTreeSet<BlockRef>,
    proposed: BTreeSet<Epoch>,
    voted_all: BTreeSet<BlockRef>,
}

impl Resolver for Replica {
    fn is_committed(&self, id: TxId) -> bool {
        self.committed.contains(&id)
    }

    fn has_payload(&self, id: TxId) -> bool {
        self.payloads.contains_key(&id)
    }

    fn cert_status(&self, cert: &RetrievabilityCertificate) -> CertStatus {
        if !cert.is_valid(&self.da) {
            return CertStatus::Bottom;
        }
        match self.cert_results.get(&cert.content_hash) {
            Some(Some(tx)) => CertStatus::Retrieved(tx.clone()),
            Some(None) => CertStatus::Bottom,
            None => CertStatus::Unknown,
        }
    }
}

impl Replica {
    fn new(id: NodeId, setup: &SimSetup) -> Self {
        let gossip = (setup.variant.variant == Variant::IlGossip)
            .then(|| GossipState::new(id, setup.net.n, setup.gossip.clone(), setup.net.seed));
        Replica {
            id,
            malicious: setup.adversary.malicious.contains(&id),
            bribed: setup.adversary.bribed.contains(&id),
            da: setup.da,
            epoch: 0,
            epoch_start: 0,
            states: BTreeMap::new(),
            pool: BTreeMap::new(),
            committed: BTreeSet::new(),
            payloads: BTreeMap::new(),
            rbc: BTreeMap::new(),
            gossip,
            retrievals: BTreeMap::new(),
            cert_results: BTreeMap::new(),
            client_certs: BTreeMap::new(),
            own_ils: BTreeMap::new(),
            inbox: BTreeMap::new(),
            proposals: BTreeMap::new(),
            judged: BTreeSet::new(),
            proposed: BTreeSet::new(),
            voted_all: BTreeSet::new(),
        }
    }

    /// Bribed replicas deviate only in what they list and propose, so they
    /// count as honest for the event log.
    fn honest(&self) -> bool {
        !self.malicious
    }

    /// Drops target transactions during dissemination.
    fn drops(&self, sh: &Shared, id: TxId) -> bool {
        self.malicious && sh.targets.contains(&id)
    }

    fn vote_all(&self, sh: &Shared) -> bool {
        self.malicious && sh.adversary.leader_strategy == LeaderStrategy::Equivocate
    }

    fn state(&mut self, epoch: Epoch, f: usize) -> &mut EpochState {
        let me = self.id;
        self.states
            .entry(epoch)
            .or_insert_with(|| EpochState::new(epoch, me, f))
    }

    fn uses_ils(sh: &Shared) -> bool {
        sh.variant.variant.uses_ils()
    }

    fn start(&mut self, cx: &mut Cx) {
        if Self::uses_ils(cx.sh) {
            let il = self.build_il(0, &BTreeSet::new(), cx);
            self.deliver_il(il, cx);
        }
    }

    fn make_eligible(&mut self, key: Round, entry: Entry, cx: &mut Cx) {
        let id = entry.tx_id();
        if self.honest() {
            cx.log
                .eligible
                .entry(id)
                .or_default()
                .entry(self.id)
                .or_insert(cx.round);
        }
        if !self.committed.contains(&id) {
            self.pool.entry(id).or_insert((key, entry));
        }
    }

    fn handle(&mut self, from: NodeId, msg: Msg, cx: &mut Cx) {
        match msg {
            Msg::Tx(tx) => {
                if cx.sh.variant.variant == Variant::IlGossip {
                    self.gossip_receive(tx, None, false, cx);
                } else {
                    self.make_eligible(tx.submit_round, Entry::Full(tx), cx);
                }
            }
            Msg::Il(il) => {
                if il.author == from {
                    self.on_il(il, cx);
                }
            }
            Msg::Proposal(p) => {
                if p.block.leader == from {
                    self.on_proposal(p, cx);
                }
            }
            Msg::Vote(v, il) => {
                if let Some(il) = il.filter(|il| il.author == from) {
                    self.on_il(il, cx);
                }
                if v.voter == from {
                    self.on_vote(v, cx);
                }
            }
            Msg::Rbc(m) => self.on_rbc(from, m, cx),
            Msg::GossipPush(tx) => self.gossip_receive(tx, Some(from), false, cx),
            Msg::GossipDigest(ids) => self.on_digest(from, ids, cx),
            Msg::GossipRequest(ids) => {
                let g = self.gossip.as_ref().expect("gossip variant");
                let txs: Vec<Transaction> = g
                    .lookup(&ids)
                    .into_iter()
                    .filter(|t| !self.drops(cx.sh, t.id))
                    .collect();
                if !txs.is_empty() {
                    cx.send(self.id, from, Msg::GossipReply(txs));
                }
            }
            Msg::GossipReply(txs) => {
                for tx in txs {
                    self.gossip_receive(tx, Some(from), true, cx);
                }
            }
            Msg::DaCert(cert) => self.on_client_cert(cert, cx),
            Msg::DaReply(h, tx) => self.on_da_reply(from, h, tx, cx),
            Msg::DaStore(_) | Msg::DaAck(..) | Msg::DaQuery(_) => {}
        }
    }

    // ---- dissemination -------------------------------------------------

    fn on_rbc(&mut self, from: NodeId, m: RbcMessage, cx: &mut Cx) {
        if self.drops(cx.sh, m.value().id) {
            return;
        }
        let tag = m.tag();
        let (me, client, n, f) = (self.id, cx.sh.client, cx.sh.n, cx.sh.f);
        let actions = self
            .rbc
            .entry(tag)
            .or_insert_with(|| RbcInstance::new(me, client, tag, n, f))
            .handle(from, m);
        for action in actions {
            match action {
                RbcAction::Multicast(m) => cx.multicast(me, Msg::Rbc(m)),
                RbcAction::Deliver(tx) => {
                    self.payloads.insert(tx.id, tx.clone());
                    self.make_eligible(tx.submit_round, Entry::Hash(tx.id), cx);
                }
            }
        }
    }

    fn gossip_receive(&mut self, tx: Transaction, from: Option<NodeId>, via_sync: bool, cx: &mut Cx) {
        let g = self.gossip.as_mut().expect("gossip variant");
        let (fresh, peers) = g.on_receive(tx.clone(), from, via_sync);
        if !fresh {
            return;
        }
        self.payloads.insert(tx.id, tx.clone());
        self.make_eligible(tx.submit_round, Entry::Hash(tx.id), cx);
        if !self.drops(cx.sh, tx.id) {
            for p in peers {
                cx.send(self.id, p, Msg::GossipPush(tx.clone()));
            }
        }
    }

    fn on_digest(&mut self, from: NodeId, ids: Vec<TxId>, cx: &mut Cx) {
        let g = self.gossip.as_ref().expect("gossip variant");
        let (push, pull) = g.reconcile(&ids, |_| true);
        let push: Vec<Transaction> = push.into_iter().filter(|t| !self.drops(cx.sh, t.id)).collect();
        if !push.is_empty() {
            cx.send(self.id, from, Msg::GossipReply(push));
        }
        if !pull.is_empty() {
            cx.send(self.id, from, Msg::GossipRequest(pull));
        }
    }

    fn on_client_cert(&mut self, cert: RetrievabilityCertificate, cx: &mut Cx) {
        let h = cert.content_hash;
        if cx.sh.variant.allow_invalid_certs {
            self.make_eligible(cx.round, Entry::Cert(cert), cx);
            return;
        }
        self.client_certs.entry(h).or_insert_with(|| cert.clone());
        match self.cert_status(&cert) {
            CertStatus::Retrieved(tx) => self.make_eligible(tx.submit_round, Entry::Cert(cert), cx),
            CertStatus::Bottom => {}
            CertStatus::Unknown => self.ensure_retrievals([&cert], cx),
        }
    }

    fn ensure_retrievals<'c>(&mut self, certs: impl IntoIterator<Item = &'c RetrievabilityCertificate>, cx: &mut Cx) {
        for cert in certs {
            let h = cert.content_hash;
            if !cert.is_valid(&self.da) || self.cert_results.contains_key(&h) || self.retrievals.contains_key(&h) {
                continue;
            }
            let session = RetrieveSession::start(cert.clone(), self.da);
            for node in self.da.storage_nodes() {
                cx.send(self.id, node, Msg::DaQuery(h));
            }
            self.retrievals.insert(h, (cx.round, session));
        }
    }

    fn on_da_reply(&mut self, from: NodeId, h: TxId, reply: Option<Transaction>, cx: &mut Cx) {
        let Some((_, session)) = self.retrievals.get_mut(&h) else {
            return;
        };
        if let Some(result) = session.on_reply(from, reply) {
            self.finish_retrieval(h, result, cx);
        }
    }

    fn finish_retrieval(&mut self, h: TxId, result: Option<Transaction>, cx: &mut Cx) {
        let Some((start, _)) = self.retrievals.remove(&h) else {
            return;
        };
        if self.honest() {
            cx.log.retrievals.push(RetrievalRecord {
                replica: self.id,
                tx: h,
                start,
                end: cx.round,
                ok: result.is_some(),
            });
        }
        self.cert_results.insert(h, result.clone());
        if let (Some(tx), Some(cert)) = (result, self.client_certs.get(&h).cloned()) {
            self.make_eligible(tx.submit_round, Entry::Cert(cert), cx);
        }
    }

    // ---- lists ---------------------------------------------------------

    fn build_il(&mut self, epoch: Epoch, exclude: &BTreeSet<TxId>, cx: &mut Cx) -> InclusionList {
        let censoring = self.malicious || self.bribed;
        let il = make_il(self.id, epoch, self.pool.values().cloned(), |id| {
            self.committed.contains(&id) || exclude.contains(&id) || (censoring && cx.sh.targets.contains(&id))
        });
        if self.honest() {
            cx.log.il_builds.entry(epoch).or_default().insert(self.id, cx.round);
        }
        self.own_ils.insert(epoch, il.clone());
        il
    }

    fn deliver_il(&mut self, il: InclusionList, cx: &mut Cx) {
        let leader = leader_of(il.epoch, cx.sh.n);
        if leader == self.id {
            self.on_il(il, cx);
        } else {
            cx.send(self.id, leader, Msg::Il(il));
        }
    }

    fn on_il(&mut self, il: InclusionList, cx: &mut Cx) {
        let e = il.epoch;
        if leader_of(e, cx.sh.n) != self.id || e < self.epoch || self.proposed.contains(&e) {
            return;
        }
        self.inbox.entry(e).or_default().entry(il.author).or_insert(IlSlot {
            il,
            eligible: None,
            invalid: false,
        });
    }

    /// Re-evaluates unresolved lists; eligibility is sticky once reached.
    fn refresh_ils(&mut self, epoch: Epoch, cx: &mut Cx) {
        let Some(slots) = self.inbox.get(&epoch) else {
            return;
        };
        let mut verdicts = Vec::new();
        let mut wanted = Vec::new();
        for (author, slot) in slots {
            if slot.eligible.is_some() || slot.invalid {
                continue;
            }
            let status = il_status(&cx.sh.variant, &slot.il, self);
            if status == IlStatus::Pending && cx.sh.variant.variant == Variant::IlDa {
                wanted.extend(slot.il.entries.iter().filter_map(|e| match e {
                    Entry::Cert(c) => Some(c.clone()),
                    _ => None,
                }));
            }
            verdicts.push((*author, status));
        }
        self.ensure_retrievals(wanted.iter(), cx);
        let slots = self.inbox.get_mut(&epoch).expect("checked above");
        for (author, status) in verdicts {
            let slot = slots.get_mut(&author).expect("collected above");
            match status {
                IlStatus::Eligible => slot.eligible = Some(cx.round),
                IlStatus::Invalid(_) => slot.invalid = true,
                IlStatus::Pending => {}
            }
        }
    }

    /// Eligible lists in `(eligible_round, author)` order.
    fn eligible_ils(&self, epoch: Epoch, sh: &Shared) -> Vec<&InclusionList> {
        let Some(slots) = self.inbox.get(&epoch) else {
            return Vec::new();
        };
        let mut v: Vec<(Round, NodeId, &InclusionList)> = slots
            .iter()
            .filter(|(a, _)| sh.variant.leader_il_counts || **a != self.id)
            .filter_map(|(a, s)| s.eligible.map(|r| (r, *a, &s.il)))
            .collect();
        v.sort_by_key(|(r, a, _)| (*r, *a));
        v.into_iter().map(|(_, _, il)| il).collect()
    }

    // ---- consensus -----------------------------------------------------

    fn on_proposal(&mut self, p: Proposal, cx: &mut Cx) {
        let e = p.block.epoch;
        cx.log.blocks.entry(p.block_ref).or_insert_with(|| p.block.clone());
        if self.vote_all(cx.sh) {
            self.vote_everything(e, p.block_ref, cx);
            return;
        }
        if e < self.epoch {
            return;
        }
        self.proposals.entry(e).or_default().push(p);
        if e == self.epoch {
            self.try_judge(cx);
        }
    }

    fn vote_everything(&mut self, epoch: Epoch, block: BlockRef, cx: &mut Cx) {
        if self.voted_all.insert(block) {
            for phase in [Phase::Vote1, Phase::Vote2] {
                cx.multicast(self.id, Msg::Vote(Vote::new(epoch, phase, block, self.id), None));
            }
        }
    }

    fn try_judge(&mut self, cx: &mut Cx) {
        let e = self.epoch;
        let Some(candidates) = self.proposals.get(&e).cloned() else {
            return;
        };
        for p in candidates {
            if self.judged.contains(&p.block_ref) {
                continue;
            }
            if self.state(e, cx.sh.f).voted1().is_some() {
                return;
            }
            if cx.sh.variant.variant == Variant::IlDa && !cx.sh.variant.allow_invalid_certs {
                if let crate::consensus::Evidence::Ils(ils) = &p.block.evidence {
                    let certs: Vec<RetrievabilityCertificate> = ils
                        .iter()
                        .flat_map(|il| il.entries.iter())
                        .filter_map(|e| match e {
                            Entry::Cert(c) => Some(c.clone()),
                            _ => None,
                        })
                        .collect();
                    self.ensure_retrievals(certs.iter(), cx);
                }
            }
            let verdict = Judge {
                cfg: &cx.sh.variant,
                n: cx.sh.n,
                f: cx.sh.f,
                me: self.id,
                own_il: self.own_ils.get(&e),
            }
            .validate(&p, self);
            match verdict {
                Verdict::Accept => {
                    self.judged.insert(p.block_ref);
                    let actions = self.state(e, cx.sh.f).on_valid_proposal(p.block_ref);
                    self.process(actions, cx);
                }
                Verdict::Reject(reason) => {
                    self.judged.insert(p.block_ref);
                    if self.honest() {
                        *cx.log.rejections.entry(reason.to_string()).or_default() += 1;
                    }
                }
                Verdict::Pending => {}
            }
        }
    }

    fn on_vote(&mut self, v: Vote, cx: &mut Cx) {
        let (outcome, actions) = self.state(v.epoch, cx.sh.f).on_vote(&v);
        if let VoteOutcome::Equivocation { .. } = outcome {
            assert!(
                !cx.sh.honest.contains(&v.voter),
                "honest replica {} voted twice in epoch {} ({:?})",
                v.voter,
                v.epoch,
                v.phase
            );
        }
        self.process(actions, cx);
    }

    fn process(&mut self, actions: Vec<EpochAction>, cx: &mut Cx) {
        for action in actions {
            match action {
                EpochAction::Vote(v) => {
                    if !self.vote_all(cx.sh) {
                        self.broadcast_vote(v, cx);
                    }
                }
                EpochAction::Commit(qc) => self.on_commit(qc.epoch, qc.block, cx),
            }
        }
    }

    fn broadcast_vote(&mut self, v: Vote, cx: &mut Cx) {
        let next = v.epoch + 1;
        let mut il = None;
        if v.phase == Phase::Vote2 && Self::uses_ils(cx.sh) && self.epoch <= next && !self.own_ils.contains_key(&next) {
            let exclude: BTreeSet<TxId> = cx
                .log
                .blocks
                .get(&v.block)
                .map(|b| b.tx_ids().collect())
                .unwrap_or_default();
            il = Some(self.build_il(next, &exclude, cx));
        }
        let leader = leader_of(next, cx.sh.n);
        for r in 0..cx.sh.n as u32 {
            let to = NodeId(r);
            if to == self.id {
                continue;
            }
            let attach = if to == leader { il.clone() } else { None };
            cx.send(self.id, to, Msg::Vote(v, attach));
        }
        if leader == self.id {
            if let Some(il) = il {
                self.on_il(il, cx);
            }
        }
    }

    fn on_commit(&mut self, epoch: Epoch, block: BlockRef, cx: &mut Cx) {
        let ids: Vec<TxId> = cx
            .log
            .blocks
            .get(&block)
            .map(|b| b.tx_ids().collect())
            .unwrap_or_default();
        self.committed.extend(ids);
        let committed = &self.committed;
        self.pool.retain(|id, _| !committed.contains(id));
        if self.honest() {
            cx.log.record_commit(epoch, self.id, block, cx.round);
        }
        if epoch >= self.epoch {
            self.advance(epoch + 1, cx);
        }
    }

    fn advance(&mut self, to: Epoch, cx: &mut Cx) {
        if to <= self.epoch {
            return;
        }
        self.epoch = to;
        self.epoch_start = cx.round;
        if Self::uses_ils(cx.sh) && !self.own_ils.contains_key(&to) {
            let il = self.build_il(to, &BTreeSet::new(), cx);
            self.deliver_il(il, cx);
        }
        self.try_judge(cx);
    }

    // ---- end of round ----------------------------------------------------

    fn tick(&mut self, cx: &mut Cx) {
        if let Some(g) = self.gossip.as_ref() {
            if g.is_tick(cx.round) {
                let peer = g.sync_peer(cx.round);
                let digest = g.digest(|id| !self.drops(cx.sh, id));
                cx.send(self.id, peer, Msg::GossipDigest(digest));
            }
        }
        let deadline = 2 * cx.sh.delta_cap;
        let expired: Vec<TxId> = self
            .retrievals
            .iter()
            .filter(|(_, (start, _))| cx.round >= start + deadline)
            .map(|(h, _)| *h)
            .collect();
        for h in expired {
            let result = self.retrievals.get_mut(&h).expect("listed").1.on_deadline();
            self.finish_retrieval(h, result, cx);
        }
        let e = self.epoch;
        let committed = self.states.get(&e).and_then(EpochState::committed).is_some();
        if !committed && cx.round >= self.epoch_start + cx.sh.timeout {
            self.state(e, cx.sh.f).abandon();
            if self.honest() {
                cx.log.honest_timeouts += 1;
            }
            self.advance(e + 1, cx);
        }
        self.try_judge(cx);
        let e = self.epoch;
        if leader_of(e, cx.sh.n) == self.id && !self.proposed.contains(&e) {
            self.try_propose(cx);
        }
    }

    fn strategy(&self, sh: &Shared) -> LeaderStrategy {
        if self.malicious {
            sh.adversary.leader_strategy
        } else if self.bribed {
            LeaderStrategy::Censor
        } else {
            LeaderStrategy::Honest
        }
    }

    fn try_propose(&mut self, cx: &mut Cx) {
        let e = self.epoch;
        let strategy = self.strategy(cx.sh);
        let block = match strategy {
            LeaderStrategy::Silent => {
                self.proposed.insert(e);
                return;
            }
            LeaderStrategy::Honest | LeaderStrategy::Equivocate => self.honest_block(cx),
            LeaderStrategy::Censor => match self.censor_block(cx) {
                CensorDecision::Block(b) => Some(b),
                CensorDecision::Wait => None,
                CensorDecision::GiveUp => match cx.sh.adversary.fallback {
                    Fallback::Silent => {
                        self.proposed.insert(e);
                        return;
                    }
                    Fallback::Honest => self.honest_block(cx),
                },
            },
        };
        let Some(block) = block else {
            return;
        };
        self.proposed.insert(e);
        if strategy == LeaderStrategy::Equivocate {
            let mut twin = block.clone();
            twin.proposed_round += 1;
            let (a, b) = (Proposal::new(block), Proposal::new(twin));
            let others: Vec<NodeId> = (0..cx.sh.n as u32).map(NodeId).filter(|r| *r != self.id).collect();
            let half = others.len() / 2;
            for p in [&a, &b] {
                self.record_proposal(p, cx);
            }
            for (i, to) in others.into_iter().enumerate() {
                let p = if i < half { &a } else { &b };
                cx.send(self.id, to, Msg::Proposal(p.clone()));
            }
            self.on_proposal(a, cx);
            self.on_proposal(b, cx);
        } else {
            let p = Proposal::new(block);
            self.record_proposal(&p, cx);
            cx.multicast(self.id, Msg::Proposal(p.clone()));
            self.on_proposal(p, cx);
        }
    }

    fn record_proposal(&self, p: &Proposal, cx: &mut Cx) {
        cx.log.blocks.entry(p.block_ref).or_insert_with(|| p.block.clone());
        cx.log.proposals.push(ProposalRecord {
            epoch: p.block.epoch,
            leader: self.id,
            round: cx.round,
            block: p.block_ref,
        });
    }

    fn mempool(&self) -> Vec<Transaction> {
        self.pool
            .values()
            .filter_map(|(_, e)| e.as_full().cloned())
            .filter(|t| !self.committed.contains(&t.id))
            .collect()
    }

    fn honest_block(&mut self, cx: &mut Cx) -> Option<Block> {
        let (e, sh) = (self.epoch, cx.sh);
        if sh.variant.variant == Variant::Plain {
            let txs = self.mempool();
            if txs.is_empty() && !sh.variant.allow_empty_blocks {
                return None;
            }
            return Some(build_plain_block(
                e,
                self.id,
                cx.round,
                txs,
                sh.variant.block_capacity_bytes,
            ));
        }
        self.refresh_ils(e, cx);
        let need = match sh.variant.variant {
            Variant::IlLocal => sh.n - sh.f,
            v => v.il_threshold(sh.n, sh.f),
        };
        let eligible = self.eligible_ils(e, sh);
        if eligible.len() < need {
            return None;
        }
        Some(build_il_block(
            &sh.variant,
            e,
            self.id,
            cx.round,
            &eligible[..need],
            self,
        ))
    }

    fn censor_block(&mut self, cx: &mut Cx) -> CensorDecision {
        let (e, sh) = (self.epoch, cx.sh);
        if sh.variant.variant == Variant::Plain {
            let txs: Vec<Transaction> = self
                .mempool()
                .into_iter()
                .filter(|t| !sh.targets.contains(&t.id))
                .collect();
            return CensorDecision::Block(build_plain_block(
                e,
                self.id,
                cx.round,
                txs,
                sh.variant.block_capacity_bytes,
            ));
        }
        self.refresh_ils(e, cx);
        let eligible = self.eligible_ils(e, sh);
        let dirty: Vec<bool> = eligible
            .iter()
            .map(|il| il.entries.iter().any(|x| sh.targets.contains(&x.tx_id())))
            .collect();
        let v = sh.variant.variant;
        let plan = if v == Variant::IlLocal {
            censor_lists_used(&dirty, v.il_threshold(sh.n, sh.f), sh.n, sh.f)
        } else {
            censor_subset(&dirty, v.il_threshold(sh.n, sh.f))
        };
        if let Some(idx) = plan {
            let chosen: Vec<&InclusionList> = idx.iter().map(|i| eligible[*i]).collect();
            let mut block = build_il_block(&sh.variant, e, self.id, cx.round, &chosen, self);
            if v == Variant::IlLocal {
                block.entries.retain(|x| !sh.targets.contains(&x.tx_id()));
            }
            return CensorDecision::Block(block);
        }
        let settled = self
            .inbox
            .get(&e)
            .is_some_and(|slots| slots.len() == sh.n && slots.values().all(|s| s.eligible.is_some() || s.invalid));
        if settled || cx.round >= self.epoch_start + sh.timeout / 2 {
            CensorDecision::GiveUp
        } else {
            CensorDecision::Wait
        }
    }
}

struct ClientNode {
    id: NodeId,
    dispersals: BTreeMap<TxId, (Dispersal, Vec<NodeId>)>,
}

pub struct Sim {
    sh: Shared,
    sizes: SizeModel,
    epochs: Epoch,
    max_rounds: Round,
    net: Network<Msg>,
    replicas: Vec<Replica>,
    client: ClientNode,
    storage: Vec<StorageNode>,
    schedule: BTreeMap<Round, Vec<Submission>>,
    log: RunLog,
}

impl Sim {
    pub fn new(setup: SimSetup) -> Result<Self, SimError> {
        setup.net.validate()?;
        let (n, f) = (setup.net.n, setup.net.f);
        setup
            .adversary
            .validate(n, f)
            .map_err(|(key, reason)| SimError::Config { key, reason })?;
        if setup.variant.variant == Variant::IlGossip {
            setup.gossip.validate(n).map_err(|reason| SimError::Config {
                key: "gossip.fanout",
                reason,
            })?;
        }
        if setup.da.n_s < 3 * setup.da.f_s + 1 || setup.da.n_s == 0 {
            return Err(SimError::Config {
                key: "da.n_s",
                reason: format!("need n_s ≥ 3f_s+1 (n_s={}, f_s={})", setup.da.n_s, setup.da.f_s),
            });
        }
        let client = setup.client();
        let node_count = n + 1 + setup.da.n_s;
        let policy = match setup.adversary.network_strategy {
            NetworkStrategy::Fair => DelayPolicy::Fair,
            NetworkStrategy::MaxDelay => DelayPolicy::MaxDelay,
            NetworkStrategy::Random => DelayPolicy::Random,
            NetworkStrategy::TargetedDelay => DelayPolicy::TargetedDelay,
        };
        let mut net =
            Network::new(setup.net.clone(), node_count)?.with_policy(policy, setup.adversary.delay_victims.clone());
        net.record_trace(setup.record_trace);

        for s in &setup.submissions {
            if let Some(r) = s.recipients.iter().find(|r| r.index() >= n) {
                return Err(SimError::Config {
                    key: "workload.recipients",
                    reason: format!("recipient {r} is not a replica"),
                });
            }
        }
        let targets: BTreeSet<TxId> = setup
            .submissions
            .iter()
            .filter(|s| s.target)
            .map(|s| s.tx().id)
            .collect();
        let honest: BTreeSet<NodeId> = (0..n as u32)
            .map(NodeId)
            .filter(|id| !setup.adversary.malicious.contains(id))
            .collect();
        let mut schedule: BTreeMap<Round, Vec<Submission>> = BTreeMap::new();
        for s in &setup.submissions {
            schedule.entry(s.round).or_default().push(s.clone());
        }
        let replicas = (0..n as u32).map(|i| Replica::new(NodeId(i), &setup)).collect();
        let storage = setup.da.storage_nodes().map(StorageNode::new).collect();
        let log = RunLog {
            n,
            f,
            variant: setup.variant.variant,
            delta: setup.net.actual_delay,
            delta_cap: setup.net.delta_cap,
            rounds: 0,
            honest: honest.clone(),
            submissions: BTreeMap::new(),
            eligible: BTreeMap::new(),
            dispersed: BTreeMap::new(),
            retrievals: Vec::new(),
            proposals: Vec::new(),
            blocks: BTreeMap::new(),
            commits: BTreeMap::new(),
            decided: BTreeMap::new(),
            il_builds: BTreeMap::new(),
            agreement_violations: Vec::new(),
            honest_timeouts: 0,
            rejections: BTreeMap::new(),
            accounting: Accounting::default(),
            trace: None,
            trace_digest: [0; 32],
        };
        Ok(Sim {
            sh: Shared {
                n,
                f,
                variant: setup.variant.clone(),
                da: setup.da,
                client,
                timeout: setup.epoch_timeout,
                delta_cap: setup.net.delta_cap,
                targets,
                adversary: setup.adversary.clone(),
                honest,
            },
            sizes: setup.sizes.resolved(&setup.da),
            epochs: setup.epochs,
            max_rounds: setup.max_rounds,
            net,
            replicas,
            client: ClientNode {
                id: client,
                dispersals: BTreeMap::new(),
            },
            storage,
            schedule,
            log,
        })
    }

    fn done(&self) -> bool {
        self.replicas
            .iter()
            .filter(|r| self.sh.honest.contains(&r.id) || self.sh.honest.is_empty())
            .all(|r| r.epoch >= self.epochs)
    }

    fn flush(&mut self, out: Vec<(NodeId, NodeId, Msg)>) {
        for (from, to, msg) in out {
            let bytes = msg.bytes(&self.sizes, self.sh.variant.variant);
            let kind = msg.kind();
            self.log.accounting.record(kind, bytes);
            self.net
                .send(from, to, kind, bytes, msg)
                .expect("simulation only addresses known nodes");
        }
    }

    fn on_replicas(&mut self, mut body: impl FnMut(&mut Replica, &mut Cx)) {
        let mut out = Vec::new();
        {
            let mut cx = Cx {
                round: self.net.round(),
                sh: &self.sh,
                out: &mut out,
                log: &mut self.log,
            };
            for r in self.replicas.iter_mut() {
                body(r, &mut cx);
            }
        }
        self.flush(out);
    }

    fn deliver(&mut self, from: NodeId, to: NodeId, msg: Msg) {
        let round = self.net.round();
        let mut out = Vec::new();
        if to.index() < self.sh.n {
            let mut cx = Cx {
                round,
                sh: &self.sh,
                out: &mut out,
                log: &mut self.log,
            };
            self.replicas[to.index()].handle(from, msg, &mut cx);
        } else if to == self.client.id {
            if let Msg::DaAck(h, sig) = msg {
                if let Some((d, recipients)) = self.client.dispersals.get_mut(&h) {
                    if let Some(cert) = d.on_ack(from, sig) {
                        self.log.dispersed.insert(h, round);
                        for r in recipients.iter() {
                            out.push((self.client.id, *r, Msg::DaCert(cert.clone())));
                        }
                    }
                }
            }
        } else {
            let node = &mut self.storage[(to.0 - self.sh.da.first_storage) as usize];
            match msg {
                Msg::DaStore(tx) => {
                    let id = tx.id;
                    let sig = node.store(tx);
                    out.push((to, from, Msg::DaAck(id, sig)));
                }
                Msg::DaQuery(h) => out.push((to, from, Msg::DaReply(h, node.query(h)))),
                _ => {}
            }
        }
        self.flush(out);
    }

    fn submit(&mut self) {
        let round = self.net.round();
        let Some(batch) = self.schedule.remove(&round) else {
            return;
        };
        let mut out = Vec::new();
        let me = self.client.id;
        for s in batch {
            let tx = s.tx();
            self.log.submissions.insert(
                tx.id,
                SubmitRecord {
                    round,
                    recipients: s.recipients.clone(),
                    target: s.target,
                },
            );
            match self.sh.variant.variant {
                Variant::IlRbc => {
                    let tag = RbcTag {
                        client: s.client,
                        seq: s.nonce,
                    };
                    for r in &s.recipients {
                        out.push((me, *r, Msg::Rbc(RbcMessage::Send(tag, tx.clone()))));
                    }
                }
                Variant::IlDa if s.forged_cert => {
                    let cert = RetrievabilityCertificate {
                        content_hash: tx.id,
                        acks: Vec::new(),
                    };
                    for r in &s.recipients {
                        out.push((me, *r, Msg::DaCert(cert.clone())));
                    }
                }
                Variant::IlDa => {
                    for node in self.sh.da.storage_nodes() {
                        out.push((me, node, Msg::DaStore(tx.clone())));
                    }
                    self.client
                        .dispersals
                        .insert(tx.id, (Dispersal::new(tx, self.sh.da), s.recipients.clone()));
                }
                _ => {
                    for r in &s.recipients {
                        out.push((me, *r, Msg::Tx(tx.clone())));
                    }
                }
            }
        }
        self.flush(out);
    }

    fn finish_log(mut self) -> RunLog {
        self.log.rounds = self.net.round();
        // In-flight envelopes land after the horizon and are not handled.
        self.net.drain();
        self.log.trace = self.net.trace().map(<[EnvelopeMeta]>::to_vec);
        self.log.trace_digest = self.net.trace_digest();
        self.log
    }

    pub fn run(mut self) -> Result<RunLog, SimError> {
        self.on_replicas(|r, cx| r.start(cx));
        self.submit();
        self.on_replicas(|r, cx| r.tick(cx));
        while !self.done() {
            if self.net.round() >= self.max_rounds {
                let round = self.net.round();
                let pending = self.net.pending();
                return Err(SimError::Timeout {
                    round,
                    pending,
                    partial: Box::new(self.finish_log()),
                });
            }
            for env in self.net.step() {
                self.deliver(env.meta.sender, env.meta.recipient, env.payload);
            }
            self.submit();
            self.on_replicas(|r, cx| r.tick(cx));
        }
        Ok(self.finish_log())
    }
}

pub fn run(setup: SimSetup) -> Result<RunLog, SimError> {
    Sim::new(setup)?.run()
}
