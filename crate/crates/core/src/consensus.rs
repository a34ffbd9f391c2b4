//! Leader-based epoch host: propose, vote-1, vote-2, commit.
//!
//! Each epoch is an independent single-shot slot with a round-robin leader and
//! 2f+1 quorums. Inclusion-list variants only change how the leader builds a
//! block and how replicas judge it; [`EpochState`] is variant-agnostic.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::types::{digest64, Epoch, NodeId, Round, Signature, TxId};
use crate::variants::il::{Entry, InclusionList};

pub fn leader_of(epoch: Epoch, n: usize) -> NodeId {
    NodeId((epoch % n as u64) as u32)
}

pub fn quorum(f: usize) -> usize {
    2 * f + 1
}

#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockRef(pub u64);

impl fmt::Debug for BlockRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blk:{:016x}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Evidence {
    None,
    Ils(Vec<InclusionList>),
    ListsUsed(Vec<NodeId>),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Block {
    pub epoch: Epoch,
    pub leader: NodeId,
    /// Informational; distinguishes otherwise identical equivocated blocks.
    pub proposed_round: Round,
    pub entries: Vec<Entry>,
    pub evidence: Evidence,
}

impl Block {
    pub fn hash(&self) -> BlockRef {
        let bytes = serde_json::to_vec(self).expect("block serializes");
        BlockRef(digest64(&[b"block", &bytes]))
    }

    pub fn tx_ids(&self) -> impl Iterator<Item = TxId> + '_ {
        self.entries.iter().map(Entry::tx_id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub block: Block,
    pub block_ref: BlockRef,
    pub leader_sig: Signature,
}

impl Proposal {
    pub fn new(block: Block) -> Self {
        let block_ref = block.hash();
        let leader_sig = Signature::sign(block.leader, block_ref.0);
        Proposal {
            block,
            block_ref,
            leader_sig,
        }
    }

    /// Leader identity and signature check; `block_ref` must match the body.
    pub fn is_authentic(&self) -> bool {
        self.block.hash() == self.block_ref && self.leader_sig.verify(self.block.leader, self.block_ref.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Vote1,
    Vote2,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vote {
    pub epoch: Epoch,
    pub phase: Phase,
    pub block: BlockRef,
    pub voter: NodeId,
    pub sig: Signature,
}

impl Vote {
    fn digest(epoch: Epoch, phase: Phase, block: BlockRef) -> u64 {
        let phase_byte = [phase as u8];
        digest64(&[b"vote", &epoch.to_le_bytes(), &phase_byte, &block.0.to_le_bytes()])
    }

    pub fn new(epoch: Epoch, phase: Phase, block: BlockRef, voter: NodeId) -> Self {
        Vote {
            epoch,
            phase,
            block,
            voter,
            sig: Signature::sign(voter, Self::digest(epoch, phase, block)),
        }
    }

    pub fn is_authentic(&self) -> bool {
        self.sig
            .verify(self.voter, Self::digest(self.epoch, self.phase, self.block))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuorumCertificate {
    pub epoch: Epoch,
    pub phase: Phase,
    pub block: BlockRef,
    pub voters: Vec<NodeId>,
}

/// Machine-readable rejection reasons for proposals.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    WrongLeader,
    WrongEpoch,
    BadSignature,
    InsufficientIls,
    InvalidIl,
    UnexpectedEvidence,
    BlockMismatch,
    CapacityExceeded,
    DuplicateTx,
    ConflictingTxs,
    AlreadyCommitted,
    InsufficientLists,
    IlOmitted,
    UnretrievableCert,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("serializes");
        write!(f, "{}", s.as_str().unwrap_or("unknown"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
    /// Payloads or retrievals outstanding; re-check later.
    Pending,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EpochAction {
    /// Broadcast this vote to every other replica.
    Vote(Vote),
    Commit(QuorumCertificate),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum VoteOutcome {
    Counted,
    Duplicate,
    /// Same voter, same phase, different block: the first vote stands.
    Equivocation {
        first: BlockRef,
    },
    Rejected,
}

/// One replica's view of one epoch's voting.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EpochState {
    pub epoch: Epoch,
    me: NodeId,
    quorum: usize,
    abandoned: bool,
    voted1: Option<BlockRef>,
    voted2: Option<BlockRef>,
    vote1: BTreeMap<NodeId, BlockRef>,
    vote2: BTreeMap<NodeId, BlockRef>,
    committed: Option<BlockRef>,
}

impl EpochState {
    pub fn new(epoch: Epoch, me: NodeId, f: usize) -> Self {
        EpochState {
            epoch,
            me,
            quorum: quorum(f),
            abandoned: false,
            voted1: None,
            voted2: None,
            vote1: BTreeMap::new(),
            vote2: BTreeMap::new(),
            committed: None,
        }
    }

    pub fn committed(&self) -> Option<BlockRef> {
        self.committed
    }

    pub fn voted1(&self) -> Option<BlockRef> {
        self.voted1
    }

    pub fn voted2(&self) -> Option<BlockRef> {
        self.voted2
    }

    /// The first vote counted from `voter` in `phase`.
    pub fn vote_of(&self, voter: NodeId, phase: Phase) -> Option<BlockRef> {
        match phase {
            Phase::Vote1 => self.vote1.get(&voter).copied(),
            Phase::Vote2 => self.vote2.get(&voter).copied(),
        }
    }

    /// Timeout: stop casting vote-1 in this epoch. Late quorums still commit.
    pub fn abandon(&mut self) {
        self.abandoned = true;
    }

    /// Called once a proposal for this epoch passed validation.
    pub fn on_valid_proposal(&mut self, block: BlockRef) -> Vec<EpochAction> {
        let mut out = Vec::new();
        if self.abandoned || self.voted1.is_some() {
            return out;
        }
        self.voted1 = Some(block);
        self.vote1.insert(self.me, block);
        out.push(EpochAction::Vote(Vote::new(self.epoch, Phase::Vote1, block, self.me)));
        self.progress(&mut out);
        out
    }

    pub fn on_vote(&mut self, vote: &Vote) -> (VoteOutcome, Vec<EpochAction>) {
        let mut out = Vec::new();
        if vote.epoch != self.epoch || !vote.is_authentic() || vote.voter == self.me {
            return (VoteOutcome::Rejected, out);
        }
        let book = match vote.phase {
            Phase::Vote1 => &mut self.vote1,
            Phase::Vote2 => &mut self.vote2,
        };
        if let Some(first) = book.get(&vote.voter) {
            let outcome = if *first == vote.block {
                VoteOutcome::Duplicate
            } else {
                VoteOutcome::Equivocation { first: *first }
            };
            return (outcome, out);
        }
        book.insert(vote.voter, vote.block);
        self.progress(&mut out);
        (VoteOutcome::Counted, out)
    }

    fn support(book: &BTreeMap<NodeId, BlockRef>, block: BlockRef) -> Vec<NodeId> {
        book.iter().filter(|(_, b)| **b == block).map(|(v, _)| *v).collect()
    }

    fn quorum_block(&self, book: &BTreeMap<NodeId, BlockRef>) -> Option<BlockRef> {
        let mut tally: BTreeMap<BlockRef, usize> = BTreeMap::new();
        for b in book.values() {
            *tally.entry(*b).or_default() += 1;
        }
        tally.into_iter().find(|(_, c)| *c >= self.quorum).map(|(b, _)| b)
    }

    fn progress(&mut self, out: &mut Vec<EpochAction>) {
        if self.voted2.is_none() {
            if let Some(b) = self.quorum_block(&self.vote1) {
                self.voted2 = Some(b);
                self.vote2.insert(self.me, b);
                out.push(EpochAction::Vote(Vote::new(self.epoch, Phase::Vote2, b, self.me)));
            }
        }
        if self.committed.is_none() {
            if let Some(b) = self.quorum_block(&self.vote2) {
                self.committed = Some(b);
                out.push(EpochAction::Commit(QuorumCertificate {
                    epoch: self.epoch,
                    phase: Phase::Vote2,
                    block: b,
                    voters: Self::support(&self.vote2, b),
                }));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_leaders() {
        assert_eq!(leader_of(0, 4), NodeId(0));
        assert_eq!(leader_of(5, 4), NodeId(1));
    }

    #[test]
    fn rotation_window_has_f_plus_one_honest_leaders() {
        // Any f faulty replicas: the 3f+1 leaders of epochs 0..=3f include
        // every replica once, so at least 2f+1 ≥ f+1 are honest.
        for f in [1usize, 2] {
            let n = 3 * f + 1;
            for faulty_mask in 0u32..(1 << n) {
                if faulty_mask.count_ones() as usize != f {
                    continue;
                }
                let honest = (0..=(4 * f) as u64)
                    .map(|e| leader_of(e, n))
                    .filter(|l| faulty_mask & (1 << l.0) == 0)
                    .collect::<std::collections::BTreeSet<_>>()
                    .len();
                assert!(honest >= f + 1);
            }
        }
    }

    fn drive(state: &mut EpochState, voters: &[u32], phase: Phase, block: BlockRef) -> Vec<EpochAction> {
        voters
            .iter()
            .flat_map(|v| state.on_vote(&Vote::new(state.epoch, phase, block, NodeId(*v))).1)
            .collect()
    }

    #[test]
    fn three_vote2_commit_two_do_not() {
        let b = BlockRef(9);
        let mut s = EpochState::new(0, NodeId(3), 1);
        assert!(drive(&mut s, &[0, 1], Phase::Vote2, b).is_empty());
        assert_eq!(s.committed(), None);
        let out = drive(&mut s, &[2], Phase::Vote2, b);
        assert!(matches!(out.as_slice(), [EpochAction::Commit(qc)] if qc.voters.len() == 3));
    }

    #[test]
    fn vote1_quorum_triggers_single_vote2() {
        let b = BlockRef(1);
        let mut s = EpochState::new(2, NodeId(0), 1);
        let out = s.on_valid_proposal(b);
        assert_eq!(out.len(), 1);
        let out = drive(&mut s, &[1, 2], Phase::Vote1, b);
        assert!(matches!(out.as_slice(), [EpochAction::Vote(v)] if v.phase == Phase::Vote2));
        assert!(drive(&mut s, &[3], Phase::Vote1, b).is_empty());
    }

    #[test]
    fn equivocating_voter_counted_once() {
        let mut s = EpochState::new(0, NodeId(0), 1);
        let first = Vote::new(0, Phase::Vote1, BlockRef(1), NodeId(2));
        let second = Vote::new(0, Phase::Vote1, BlockRef(2), NodeId(2));
        assert_eq!(s.on_vote(&first).0, VoteOutcome::Counted);
        assert_eq!(s.on_vote(&second).0, VoteOutcome::Equivocation { first: BlockRef(1) });
        assert_eq!(s.on_vote(&first).0, VoteOutcome::Duplicate);
    }

    #[test]
    fn forged_vote_rejected() {
        let mut s = EpochState::new(0, NodeId(0), 1);
        let mut v = Vote::new(0, Phase::Vote1, BlockRef(1), NodeId(2));
        v.voter = NodeId(1);
        assert_eq!(s.on_vote(&v).0, VoteOutcome::Rejected);
    }

    #[test]
    fn abandoned_epoch_still_commits_late_quorum() {
        let b = BlockRef(4);
        let mut s = EpochState::new(0, NodeId(0), 1);
        s.abandon();
        assert!(s.on_valid_proposal(b).is_empty());
        drive(&mut s, &[1, 2, 3], Phase::Vote2, b);
        assert_eq!(s.committed(), Some(b));
    }
}
