//! Exhaustive and randomized checks of the protocol building blocks against
//! byzantine schedules: single-epoch consensus and reliable broadcast at
//! n=4, f=1 by state-space search, and data-availability reads by sampling.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::{BlockRef, EpochAction, EpochState, Phase, Vote};
use crate::dissemination::da::{DaParams, Dispersal, RetrievabilityCertificate, RetrieveSession, StorageNode};
use crate::dissemination::rbc::{RbcAction, RbcInstance, RbcMessage, RbcTag};
use crate::types::{NodeId, Transaction, TxId};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckReport {
    /// Distinct states visited or schedules sampled.
    pub explored: u64,
    /// States in which at least one honest replica had decided.
    pub decided_states: u64,
    pub violations: Vec<String>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    fn fail(&mut self, what: String) {
        if self.violations.len() < 16 {
            self.violations.push(what);
        }
    }
}

// ---- consensus ------------------------------------------------------------

const N: usize = 4;
const F: usize = 1;
/// Replica 0 leads epoch 0 and is byzantine; 1..=3 are honest.
const BYZ: u32 = 0;
const BLOCKS: [BlockRef; 2] = [BlockRef(0xA), BlockRef(0xB)];

/// A message in flight: `(recipient, sender, kind, block index)`, where kind
/// 0 is a proposal, 1 a vote-1 and 2 a vote-2.
type Key = (u8, u8, u8, u8);

#[derive(Clone, PartialEq, Eq, Hash)]
struct ConsensusState {
    replicas: Vec<EpochState>,
    abandoned: u8,
    pending: BTreeSet<Key>,
}

fn block_index(b: BlockRef) -> u8 {
    BLOCKS.iter().position(|x| *x == b).expect("known block") as u8
}

/// Single-epoch search with a byzantine leader that may propose either of two
/// blocks to any honest replica and cast any vote, arbitrary delivery order
/// and arbitrary timeouts. Explores up to `max_depth` steps.
pub fn check_consensus_epoch(max_depth: usize) -> CheckReport {
    consensus_search(F, max_depth)
}

/// `assumed_f` sets the replicas' quorum size; anything but `F` is a
/// deliberately broken configuration the search must catch.
fn consensus_search(assumed_f: usize, max_depth: usize) -> CheckReport {
    let mut pending = BTreeSet::new();
    for to in 1..N as u8 {
        for b in 0..2u8 {
            for kind in 0..3u8 {
                pending.insert((to, BYZ as u8, kind, b));
            }
        }
    }
    let root = ConsensusState {
        replicas: (0..N as u32)
            .map(|i| EpochState::new(0, NodeId(i), assumed_f))
            .collect(),
        abandoned: 0,
        pending,
    };
    let mut report = CheckReport::default();
    let mut seen = HashSet::new();
    seen.insert(fingerprint(&root));
    let mut stack = vec![(root, 0usize)];
    while let Some((state, depth)) = stack.pop() {
        report.explored += 1;
        let decided: BTreeSet<BlockRef> = (1..N).filter_map(|i| state.replicas[i].committed()).collect();
        if !decided.is_empty() {
            report.decided_states += 1;
        }
        if decided.len() > 1 {
            report.fail(format!("honest replicas committed {decided:?}"));
            continue;
        }
        if depth == max_depth {
            continue;
        }
        for key in &state.pending {
            let mut next = state.clone();
            next.pending.remove(key);
            deliver(&mut next, *key);
            prune(&mut next);
            if seen.insert(fingerprint(&next)) {
                stack.push((next, depth + 1));
            }
        }
        for i in 1..N {
            if state.abandoned & (1 << i) == 0 && state.replicas[i].voted1().is_none() {
                let mut next = state.clone();
                next.abandoned |= 1 << i;
                next.replicas[i].abandon();
                prune(&mut next);
                if seen.insert(fingerprint(&next)) {
                    stack.push((next, depth + 1));
                }
            }
        }
    }
    report
}

/// Exact packed encoding of a state: per honest replica its commit and the
/// first vote counted from each replica (2 bits each, 54 bits), then the
/// timeout flags and the pending-message bitset.
fn fingerprint(state: &ConsensusState) -> [u64; 3] {
    let code = |b: Option<BlockRef>| b.map_or(0u64, |b| 1 + block_index(b) as u64);
    let mut local = 0u64;
    for r in &state.replicas[1..] {
        // A replica's own votes are in its books.
        let mut fields = vec![r.committed()];
        for phase in [Phase::Vote1, Phase::Vote2] {
            fields.extend((0..N as u32).map(|v| r.vote_of(NodeId(v), phase)));
        }
        for b in fields {
            local = local << 2 | code(b);
        }
    }
    let mut pending = [0u64; 2];
    for &(to, from, kind, b) in &state.pending {
        let idx = ((to as usize - 1) * N + from as usize) * 6 + kind as usize * 2 + b as usize;
        pending[idx / 64] |= 1 << (idx % 64);
    }
    [local, pending[0], pending[1] | (state.abandoned as u64) << 56]
}

/// Drops messages that can no longer change the recipient's behaviour: a
/// second byzantine message for the same slot (only the first counts),
/// proposals after vote-1 or a timeout, vote-1 after vote-2, and anything
/// sent to a replica that already committed.
fn prune(state: &mut ConsensusState) {
    let replicas = &state.replicas;
    let abandoned = state.abandoned;
    state.pending.retain(|&(to, from, kind, _)| {
        let r = &replicas[to as usize];
        if r.committed().is_some() {
            return false;
        }
        match kind {
            0 => r.voted1().is_none() && abandoned & (1 << to) == 0,
            1 if r.voted2().is_some() => false,
            _ => {
                from != BYZ as u8
                    || r.vote_of(NodeId(from as u32), if kind == 1 { Phase::Vote1 } else { Phase::Vote2 })
                        .is_none()
            }
        }
    });
}

fn deliver(state: &mut ConsensusState, (to, from, kind, b): Key) {
    let block = BLOCKS[b as usize];
    let replica = &mut state.replicas[to as usize];
    let actions = match kind {
        0 => replica.on_valid_proposal(block),
        _ => {
            let phase = if kind == 1 { Phase::Vote1 } else { Phase::Vote2 };
            replica.on_vote(&Vote::new(0, phase, block, NodeId(from as u32))).1
        }
    };
    for action in actions {
        if let EpochAction::Vote(v) = action {
            let kind = if v.phase == Phase::Vote1 { 1 } else { 2 };
            for peer in 1..N as u8 {
                if peer != to {
                    state.pending.insert((peer, to, kind, block_index(v.block)));
                }
            }
        }
    }
}

// ---- reliable broadcast ---------------------------------------------------

const RBC_TAG: RbcTag = RbcTag { client: 0, seq: 0 };
const RBC_SENDER: NodeId = NodeId(100);
/// Replica 3 is byzantine; 0..=2 are honest.
const RBC_BYZ: usize = 3;
const RBC_HONEST: usize = 3;

/// `(recipient, sender, kind, value index)`; kind 0 SEND, 1 ECHO, 2 READY.
type RbcKey = (u8, u32, u8, u8);

#[derive(Clone, PartialEq, Eq, Hash)]
struct RbcState {
    replicas: Vec<RbcInstance>,
    /// Messages from honest replicas, which must eventually arrive.
    honest: BTreeSet<RbcKey>,
    /// Messages the byzantine parties may or may not send.
    optional: BTreeSet<RbcKey>,
}

fn rbc_values() -> [Transaction; 2] {
    [
        Transaction::new(0, 0, 250, None, 0),
        Transaction::new(0, 1, 250, None, 0),
    ]
}

/// Enumerates every byzantine sender choice (nothing, value v or value w to
/// each honest replica, up to permuting the replicas), every message the byzantine replica may inject and
/// every delivery order, and checks:
/// - consistency: honest replicas never deliver different values;
/// - totality: once honest traffic is drained, either all honest replicas
///   delivered or none did;
/// - validity: a sender that gave every replica the same value has it
///   delivered everywhere once honest traffic is drained.
pub fn check_rbc(max_depth: usize) -> CheckReport {
    rbc_search(F, max_depth)
}

fn rbc_search(assumed_f: usize, max_depth: usize) -> CheckReport {
    let values = rbc_values();
    let ids: [TxId; 2] = [values[0].id, values[1].id];
    let mut report = CheckReport::default();
    for choice in 0..3u32.pow(RBC_HONEST as u32) {
        let sends: Vec<Option<u8>> = (0..RBC_HONEST)
            .map(|i| match (choice / 3u32.pow(i as u32)) % 3 {
                0 => None,
                v => Some(v as u8 - 1),
            })
            .collect();
        // Honest replicas are interchangeable, so one ordering per multiset.
        if sends.windows(2).any(|w| w[0] > w[1]) {
            continue;
        }
        let mut optional = BTreeSet::new();
        for (i, s) in sends.iter().enumerate() {
            if let Some(v) = s {
                optional.insert((i as u8, RBC_SENDER.0, 0, *v));
            }
        }
        for to in 0..RBC_HONEST as u8 {
            for kind in 1..3u8 {
                for v in 0..2u8 {
                    optional.insert((to, RBC_BYZ as u32, kind, v));
                }
            }
        }
        let uniform = sends
            .iter()
            .all(|s| s.is_some() && *s == sends[0])
            .then(|| sends[0].unwrap());
        let root = RbcState {
            replicas: (0..RBC_HONEST as u32)
                .map(|i| RbcInstance::new(NodeId(i), RBC_SENDER, RBC_TAG, N, assumed_f))
                .collect(),
            honest: BTreeSet::new(),
            optional,
        };
        // A uniform honest sender must actually send, so its SENDs are owed.
        let root = match uniform {
            Some(_) => RbcState {
                honest: root.optional.iter().filter(|k| k.2 == 0).copied().collect(),
                optional: root.optional.iter().filter(|k| k.2 != 0).copied().collect(),
                ..root
            },
            None => root,
        };
        explore_rbc(root, max_depth, uniform.map(|v| ids[v as usize]), &values, &mut report);
    }
    report
}

fn explore_rbc(
    root: RbcState,
    max_depth: usize,
    valid: Option<TxId>,
    values: &[Transaction; 2],
    report: &mut CheckReport,
) {
    let ids = [values[0].id, values[1].id];
    let mut seen = HashSet::new();
    seen.insert(rbc_fingerprint(&root, &ids));
    let mut stack = vec![(root, 0usize)];
    while let Some((state, depth)) = stack.pop() {
        report.explored += 1;
        let delivered: Vec<Option<TxId>> = state.replicas.iter().map(RbcInstance::delivered).collect();
        let distinct: BTreeSet<TxId> = delivered.iter().flatten().copied().collect();
        if !distinct.is_empty() {
            report.decided_states += 1;
        }
        if distinct.len() > 1 {
            report.fail(format!("consistency: honest delivered {distinct:?}"));
            continue;
        }
        if state.honest.is_empty() {
            let count = delivered.iter().flatten().count();
            if count != 0 && count != RBC_HONEST {
                report.fail(format!(
                    "totality: {count} of {RBC_HONEST} honest delivered after quiescence"
                ));
            }
            if let Some(v) = valid {
                if delivered.iter().any(|d| *d != Some(v)) {
                    report.fail(format!("validity: {delivered:?} with honest sender of {v}"));
                }
            }
        }
        if depth == max_depth {
            continue;
        }
        let keys = state
            .honest
            .iter()
            .map(|k| (*k, true))
            .chain(state.optional.iter().map(|k| (*k, false)));
        for (key, owed) in keys {
            let mut next = state.clone();
            if owed {
                next.honest.remove(&key);
            } else {
                next.optional.remove(&key);
            }
            deliver_rbc(&mut next, key, values);
            prune_rbc(&mut next);
            if seen.insert(rbc_fingerprint(&next, &ids)) {
                stack.push((next, depth + 1));
            }
        }
    }
}

/// Drops messages that can no longer matter: anything to a replica that
/// delivered, SEND after ECHO, ECHO after READY, and a second ECHO or READY
/// from the same sender.
fn prune_rbc(state: &mut RbcState) {
    let replicas = &state.replicas;
    let relevant = |&(to, from, kind, _): &RbcKey| {
        let r = &replicas[to as usize];
        if r.delivered().is_some() {
            return false;
        }
        match kind {
            0 => !r.sent_echo(),
            1 => !r.sent_ready() && r.echo_of(NodeId(from)).is_none(),
            _ => r.ready_of(NodeId(from)).is_none(),
        }
    };
    state.honest.retain(relevant);
    state.optional.retain(relevant);
}

/// Packed state: per honest replica the first ECHO and READY counted from
/// each replica and its delivery (2 bits each), then both message bitsets.
fn rbc_fingerprint(state: &RbcState, ids: &[TxId; 2]) -> (u64, u128, u128) {
    let code = |v: Option<TxId>| {
        v.map_or(0u64, |v| {
            1 + ids.iter().position(|x| *x == v).expect("known value") as u64
        })
    };
    let mut local = 0u64;
    for r in &state.replicas {
        local = local << 2 | code(r.delivered());
        for p in 0..N as u32 {
            local = local << 4 | code(r.echo_of(NodeId(p))) << 2 | code(r.ready_of(NodeId(p)));
        }
    }
    let bits = |set: &BTreeSet<RbcKey>| {
        set.iter().fold(0u128, |acc, &(to, from, kind, v)| {
            let from = if from == RBC_SENDER.0 { N } else { from as usize };
            let idx = ((to as usize * (N + 1) + from) * 3 + kind as usize) * 2 + v as usize;
            acc | 1 << idx
        })
    };
    (local, bits(&state.honest), bits(&state.optional))
}

fn deliver_rbc(state: &mut RbcState, (to, from, kind, v): RbcKey, values: &[Transaction; 2]) {
    let value = values[v as usize].clone();
    let msg = match kind {
        0 => RbcMessage::Send(RBC_TAG, value),
        1 => RbcMessage::Echo(RBC_TAG, value),
        _ => RbcMessage::Ready(RBC_TAG, value),
    };
    for action in state.replicas[to as usize].handle(NodeId(from), msg) {
        if let RbcAction::Multicast(m) = action {
            let kind = match m {
                RbcMessage::Send(..) => 0,
                RbcMessage::Echo(..) => 1,
                RbcMessage::Ready(..) => 2,
            };
            let v = values.iter().position(|x| x.id == m.value().id).expect("known value") as u8;
            for peer in 0..RBC_HONEST as u8 {
                if peer != to {
                    state.honest.insert((peer, to as u32, kind, v));
                }
            }
        }
    }
}

// ---- data availability ----------------------------------------------------

/// Samples `schedules` adversarial storage behaviours at `n_s = 4, f_s = 1`:
/// a random byzantine storage node (which may ack without storing, lie or
/// stay silent, differently towards each reader), a random client that may
/// disperse to only part of the storage set, and random reply orders. Checks
/// that every honest reader of one certificate gets the same result and that
/// full honest dispersal always yields the original transaction.
pub fn check_da(schedules: u64, seed: u64) -> CheckReport {
    let params = DaParams {
        n_s: 4,
        f_s: 1,
        first_storage: 10,
    };
    let readers = 3;
    let mut report = CheckReport::default();
    for s in 0..schedules {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ s.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let tx = Transaction::new(7, s, 250, None, 0);
        let lie = Transaction::new(8, s, 250, None, 0);
        let byz = rng.gen_range(0..params.n_s);
        let honest_client = rng.gen_bool(0.5);
        let mut nodes: Vec<StorageNode> = params.storage_nodes().map(StorageNode::new).collect();
        let mut dispersal = Dispersal::new(tx.clone(), params);
        let mut cert: Option<RetrievabilityCertificate> = None;
        let mut order: Vec<usize> = (0..params.n_s).collect();
        order.shuffle(&mut rng);
        for i in order {
            let reached = honest_client || i == byz || rng.gen_bool(0.6);
            if !reached {
                continue;
            }
            let sig = if i == byz {
                // Acks without storing.
                crate::types::Signature::sign(nodes[i].id, tx.id.0)
            } else {
                nodes[i].store(tx.clone())
            };
            if let Some(c) = dispersal.on_ack(nodes[i].id, sig) {
                cert.get_or_insert(c);
            }
        }
        let Some(cert) = cert else {
            report.explored += 1;
            if honest_client {
                report.fail(format!("schedule {s}: honest dispersal produced no certificate"));
            }
            continue;
        };
        let mut results = Vec::with_capacity(readers);
        for _ in 0..readers {
            let mut read = RetrieveSession::start(cert.clone(), params);
            let mut replies: Vec<usize> = (0..params.n_s).collect();
            replies.shuffle(&mut rng);
            for i in replies {
                let reply = if i == byz {
                    match rng.gen_range(0..3) {
                        0 => continue,
                        1 => Some(lie.clone()),
                        _ => None,
                    }
                } else {
                    nodes[i].query(cert.content_hash)
                };
                read.on_reply(nodes[i].id, reply);
                if read.is_done() {
                    break;
                }
            }
            results.push(read.on_deadline());
        }
        report.explored += 1;
        if results.iter().any(|r| r.is_some()) {
            report.decided_states += 1;
        }
        if results.windows(2).any(|w| w[0] != w[1]) {
            report.fail(format!("schedule {s}: readers disagree"));
        }
        if honest_client && results.iter().any(|r| r.as_ref() != Some(&tx)) {
            report.fail(format!("schedule {s}: honest dispersal not retrieved"));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shallow_consensus_search_is_safe() {
        let r = check_consensus_epoch(8);
        assert!(r.passed(), "{:?}", r.violations);
        assert!(r.explored > 100);
    }

    #[test]
    fn undersized_quorums_are_caught() {
        assert!(!consensus_search(0, 6).passed());
        assert!(!rbc_search(0, 6).passed());
    }

    #[test]
    fn da_sample_agrees() {
        let r = check_da(50, 3);
        assert!(r.passed(), "{:?}", r.violations);
    }
}
