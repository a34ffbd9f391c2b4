//! Deterministic round-based message scheduler.
//!
//! Every send is assigned a delivery round by the active [`DelayPolicy`] at
//! send time. Delivery order within a round is `(deliver_round, id)`, so a
//! `(NetConfig, seed)` pair fixes the whole trace.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::{NodeId, Round};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub n: usize,
    pub f: usize,
    /// Worst-case post-GST one-way delay, Δ.
    pub delta_cap: Round,
    /// Actual one-way delay between honest parties, δ.
    pub actual_delay: Round,
    pub gst: Round,
    /// Finite stand-in for the unknown pre-GST delay bound.
    pub pre_gst_cap: Round,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            n: 4,
            f: 1,
            delta_cap: 1,
            actual_delay: 1,
            gst: 0,
            pre_gst_cap: 10,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn with_nf(n: usize, f: usize) -> Self {
        NetConfig {
            n,
            f,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.n < 3 * self.f + 1 {
            return Err(NetError::Config {
                key: "net.n",
                reason: format!("n ≥ 3f+1 violated (n={}, f={})", self.n, self.f),
            });
        }
        if self.actual_delay < 1 || self.actual_delay > self.delta_cap {
            return Err(NetError::Config {
                key: "net.actual_delay",
                reason: format!(
                    "need 1 ≤ actual_delay ≤ delta_cap (got {} and {})",
                    self.actual_delay, self.delta_cap
                ),
            });
        }
        if self.pre_gst_cap < self.delta_cap {
            return Err(NetError::Config {
                key: "net.pre_gst_cap",
                reason: "pre_gst_cap must be at least delta_cap".into(),
            });
        }
        Ok(())
    }
}

/// Message-kind tag used for accounting and traces.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MsgKind {
    ClientTx,
    InclusionList,
    Proposal,
    Vote1,
    Vote2,
    RbcSend,
    RbcEcho,
    RbcReady,
    GossipPush,
    GossipDigest,
    GossipRequest,
    GossipReply,
    DaStore,
    DaAck,
    DaCert,
    DaQuery,
    DaReply,
}

impl MsgKind {
    pub const ALL: [MsgKind; 17] = [
        MsgKind::ClientTx,
        MsgKind::InclusionList,
        MsgKind::Proposal,
        MsgKind::Vote1,
        MsgKind::Vote2,
        MsgKind::RbcSend,
        MsgKind::RbcEcho,
        MsgKind::RbcReady,
        MsgKind::GossipPush,
        MsgKind::GossipDigest,
        MsgKind::GossipRequest,
        MsgKind::GossipReply,
        MsgKind::DaStore,
        MsgKind::DaAck,
        MsgKind::DaCert,
        MsgKind::DaQuery,
        MsgKind::DaReply,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MsgKind::ClientTx => "client-tx",
            MsgKind::InclusionList => "inclusion-list",
            MsgKind::Proposal => "proposal",
            MsgKind::Vote1 => "vote-1",
            MsgKind::Vote2 => "vote-2",
            MsgKind::RbcSend => "rbc-send",
            MsgKind::RbcEcho => "rbc-echo",
            MsgKind::RbcReady => "rbc-ready",
            MsgKind::GossipPush => "gossip-push",
            MsgKind::GossipDigest => "gossip-digest",
            MsgKind::GossipRequest => "gossip-request",
            MsgKind::GossipReply => "gossip-reply",
            MsgKind::DaStore => "da-store",
            MsgKind::DaAck => "da-ack",
            MsgKind::DaCert => "da-cert",
            MsgKind::DaQuery => "da-query",
            MsgKind::DaReply => "da-reply",
        }
    }
}

/// Envelope metadata; this is what traces record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvelopeMeta {
    pub id: u64,
    pub sender: NodeId,
    pub recipient: NodeId,
    pub kind: MsgKind,
    pub payload_bytes: u64,
    pub send_round: Round,
    pub deliver_round: Round,
}

#[derive(Clone, Debug)]
pub struct Envelope<M> {
    pub meta: EnvelopeMeta,
    pub payload: M,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelayPolicy {
    /// Every message takes exactly δ after GST; δ before GST too.
    #[default]
    Fair,
    /// Every message takes the largest legal delay.
    MaxDelay,
    /// Uniform legal delay drawn from the seeded RNG.
    Random,
    /// Largest legal delay on links touching a victim; δ elsewhere.
    TargetedDelay,
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("configuration error at `{key}`: {reason}")]
    Config { key: &'static str, reason: String },
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("simulation finished at round {0}; no further sends accepted")]
    Finished(Round),
    #[error("round cap {round} reached before predicate held ({pending} envelopes pending)")]
    Timeout {
        round: Round,
        pending: usize,
        /// Most recent deliveries, newest last.
        recent: Vec<EnvelopeMeta>,
    },
}

const RECENT_WINDOW: usize = 32;

pub struct Network<M> {
    cfg: NetConfig,
    node_count: usize,
    round: Round,
    next_id: u64,
    queue: BTreeMap<(Round, u64), Envelope<M>>,
    policy: DelayPolicy,
    victims: BTreeSet<NodeId>,
    rng: ChaCha8Rng,
    finished: bool,
    trace: Option<Vec<EnvelopeMeta>>,
    trace_hash: Sha256,
    recent: Vec<EnvelopeMeta>,
    sent: u64,
    delivered: u64,
}

impl<M> Network<M> {
    /// `node_count` covers every addressable party, replicas first.
    pub fn new(cfg: NetConfig, node_count: usize) -> Result<Self, NetError> {
        cfg.validate()?;
        if node_count < cfg.n {
            return Err(NetError::Config {
                key: "net.n",
                reason: "node_count smaller than replica count".into(),
            });
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Network {
            cfg,
            node_count,
            round: 0,
            next_id: 0,
            queue: BTreeMap::new(),
            policy: DelayPolicy::Fair,
            victims: BTreeSet::new(),
            rng,
            finished: false,
            trace: None,
            trace_hash: Sha256::new(),
            recent: Vec::new(),
            sent: 0,
            delivered: 0,
        })
    }

    pub fn with_policy(mut self, policy: DelayPolicy, victims: BTreeSet<NodeId>) -> Self {
        self.policy = policy;
        self.victims = victims;
        self
    }

    pub fn record_trace(&mut self, on: bool) {
        self.trace = if on { Some(Vec::new()) } else { None };
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn round(&self) -> Round {
        self.round
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn sent_count(&self) -> u64 {
        self.sent
    }

    pub fn delivered_count(&self) -> u64 {
        self.delivered
    }

    pub fn finish(&mut self) {
        self.finished = true;
    }

    /// Closes the network and delivers everything still in flight, so the
    /// trace accounts for every envelope ever sent.
    pub fn drain(&mut self) -> Vec<Envelope<M>> {
        self.finished = true;
        let mut out = Vec::with_capacity(self.queue.len());
        while !self.queue.is_empty() {
            out.extend(self.step());
        }
        out
    }

    /// Largest delay the model permits for a message sent now.
    pub fn delay_bound(&self) -> Round {
        if self.round >= self.cfg.gst {
            self.cfg.delta_cap
        } else {
            self.cfg.pre_gst_cap
        }
    }

    fn choose_delay(&mut self, sender: NodeId, recipient: NodeId) -> Round {
        let bound = self.delay_bound();
        let delta = self.cfg.actual_delay;
        match self.policy {
            DelayPolicy::Fair => delta,
            DelayPolicy::MaxDelay => bound,
            DelayPolicy::Random => self.rng.gen_range(1..=bound),
            DelayPolicy::TargetedDelay => {
                if self.victims.contains(&sender) || self.victims.contains(&recipient) {
                    bound
                } else {
                    delta
                }
            }
        }
    }

    pub fn send(
        &mut self,
        sender: NodeId,
        recipient: NodeId,
        kind: MsgKind,
        payload_bytes: u64,
        payload: M,
    ) -> Result<EnvelopeMeta, NetError> {
        if self.finished {
            return Err(NetError::Finished(self.round));
        }
        for node in [sender, recipient] {
            if node.index() >= self.node_count {
                return Err(NetError::UnknownNode(node));
            }
        }
        let delay = self.choose_delay(sender, recipient);
        let meta = EnvelopeMeta {
            id: self.next_id,
            sender,
            recipient,
            kind,
            payload_bytes,
            send_round: self.round,
            deliver_round: self.round + delay,
        };
        self.next_id += 1;
        self.sent += 1;
        self.queue.insert(
            (meta.deliver_round, meta.id),
            Envelope {
                meta: meta.clone(),
                payload,
            },
        );
        Ok(meta)
    }

    fn check_delay(&self, meta: &EnvelopeMeta) {
        let delay = meta.deliver_round - meta.send_round;
        assert!(delay >= 1, "envelope {} delivered in its send round", meta.id);
        let bound = if meta.send_round >= self.cfg.gst {
            self.cfg.delta_cap
        } else {
            self.cfg.pre_gst_cap
        };
        assert!(
            delay <= bound,
            "envelope {} exceeded delay bound ({delay} > {bound})",
            meta.id
        );
    }

    /// Advances one round and returns the envelopes due in it.
    pub fn step(&mut self) -> Vec<Envelope<M>> {
        self.round += 1;
        let mut due = Vec::new();
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 != self.round {
                debug_assert!(entry.key().0 > self.round);
                break;
            }
            due.push(entry.remove());
        }
        for env in &due {
            self.check_delay(&env.meta);
            self.trace_hash.update(env.meta.id.to_le_bytes());
            self.trace_hash.update(env.meta.deliver_round.to_le_bytes());
            self.trace_hash.update(env.meta.recipient.0.to_le_bytes());
            if let Some(trace) = self.trace.as_mut() {
                trace.push(env.meta.clone());
            }
            if self.recent.len() == RECENT_WINDOW {
                self.recent.remove(0);
            }
            self.recent.push(env.meta.clone());
        }
        self.delivered += due.len() as u64;
        due
    }

    /// Steps until `done` holds, feeding each delivery to `handle`.
    pub fn run_until<P, H>(&mut self, cap: Round, mut done: P, mut handle: H) -> Result<Round, NetError>
    where
        P: FnMut(&Self) -> bool,
        H: FnMut(&mut Self, Envelope<M>),
    {
        while !done(self) {
            if self.round >= cap {
                return Err(self.timeout_error());
            }
            for env in self.step() {
                handle(self, env);
            }
        }
        Ok(self.round)
    }

    pub fn timeout_error(&self) -> NetError {
        NetError::Timeout {
            round: self.round,
            pending: self.queue.len(),
            recent: self.recent.clone(),
        }
    }

    pub fn trace(&self) -> Option<&[EnvelopeMeta]> {
        self.trace.as_deref()
    }

    /// Running hash over the delivery order so far.
    pub fn trace_digest(&self) -> [u8; 32] {
        let out = self.trace_hash.clone().finalize();
        let mut d = [0u8; 32];
        d.copy_from_slice(&out);
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(cfg: NetConfig) -> Network<u32> {
        Network::new(cfg, 8).unwrap()
    }

    fn advance_to(net: &mut Network<u32>, round: Round) {
        while net.round() < round {
            assert!(net.step().is_empty());
        }
    }

    #[test]
    fn default_delay_after_gst() {
        let mut n = net(NetConfig::default());
        advance_to(&mut n, 5);
        let meta = n.send(NodeId(0), NodeId(1), MsgKind::Vote1, 64, 0).unwrap();
        assert_eq!(meta.deliver_round, 6);
    }

    #[test]
    fn max_delay_hits_delta_cap() {
        let cfg = NetConfig {
            delta_cap: 3,
            ..Default::default()
        };
        let mut n = net(cfg).with_policy(DelayPolicy::MaxDelay, BTreeSet::new());
        advance_to(&mut n, 5);
        let meta = n.send(NodeId(0), NodeId(1), MsgKind::Vote1, 64, 0).unwrap();
        assert_eq!(meta.deliver_round, 8);
    }

    #[test]
    fn pre_gst_delays_respect_cap_over_many_seeds() {
        for seed in 0..1000 {
            let cfg = NetConfig {
                delta_cap: 3,
                gst: 10,
                pre_gst_cap: 20,
                seed,
                ..Default::default()
            };
            let mut n = net(cfg).with_policy(DelayPolicy::Random, BTreeSet::new());
            advance_to(&mut n, 2);
            let meta = n.send(NodeId(0), NodeId(1), MsgKind::Vote1, 1, 0).unwrap();
            assert!(meta.deliver_round > 2 && meta.deliver_round <= 22, "{meta:?}");
        }
    }

    #[test]
    fn same_round_delivery_sorted_by_id() {
        let mut n = net(NetConfig::default());
        for i in 0..8u32 {
            n.send(NodeId(i % 4), NodeId(1), MsgKind::Vote1, 1, i).unwrap();
        }
        let got: Vec<u64> = n.step().iter().map(|e| e.meta.id).collect();
        assert_eq!(got, (0..8).collect::<Vec<_>>());
        assert!(n.step().is_empty());
    }

    #[test]
    fn unknown_node_rejected() {
        let mut n = net(NetConfig::default());
        assert!(matches!(
            n.send(NodeId(0), NodeId(99), MsgKind::Vote1, 1, 0),
            Err(NetError::UnknownNode(NodeId(99)))
        ));
    }

    #[test]
    fn run_until_cap_and_noop() {
        let mut n = net(NetConfig::default());
        assert_eq!(n.run_until(10, |_| true, |_, _| {}).unwrap(), 0);
        match n.run_until(10, |_| false, |_, _| {}) {
            Err(NetError::Timeout { round, .. }) => assert_eq!(round, 10),
            other => panic!("expected timeout, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(NetConfig::with_nf(4, 2).validate().is_err());
        let cfg = NetConfig {
            actual_delay: 3,
            delta_cap: 2,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn random_trace(seed: u64) -> ([u8; 32], u64) {
        let cfg = NetConfig {
            delta_cap: 4,
            gst: 15,
            pre_gst_cap: 12,
            seed,
            ..Default::default()
        };
        let mut n = net(cfg).with_policy(DelayPolicy::Random, BTreeSet::new());
        for i in 0..200u32 {
            n.send(NodeId(i % 8), NodeId((i * 3) % 8), MsgKind::Vote2, 1, i)
                .unwrap();
            if i % 7 == 0 {
                for env in n.step() {
                    if env.payload % 3 == 0 {
                        n.send(env.meta.recipient, env.meta.sender, MsgKind::Vote1, 1, 1000)
                            .unwrap();
                    }
                }
            }
        }
        let mut sent = n.sent_count();
        while n.pending() > 0 {
            n.step();
        }
        assert_eq!(n.delivered_count(), sent);
        sent = n.delivered_count();
        (n.trace_digest(), sent)
    }

    #[test]
    fn replay_is_identical_and_lossless() {
        assert_eq!(random_trace(7), random_trace(7));
        assert_ne!(random_trace(7).0, random_trace(8).0);
    }
}
