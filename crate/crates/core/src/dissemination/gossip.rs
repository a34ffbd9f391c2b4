//! Push gossip with periodic push-pull anti-entropy.
//!
//! First receipt triggers a push to `fanout` peers drawn from a seeded RNG.
//! Every `anti_entropy_period` rounds a replica sends its digest to one peer;
//! peers are visited round-robin so every pair syncs within `n - 1` periods.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::types::{NodeId, Round, Transaction, TxId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GossipConfig {
    /// Peers per forward, c_gos.
    pub fanout: usize,
    pub anti_entropy_period: Round,
    pub forward_once: bool,
}

impl Default for GossipConfig {
    fn default() -> Self {
        GossipConfig {
            fanout: 2,
            anti_entropy_period: 2,
            forward_once: true,
        }
    }
}

impl GossipConfig {
    pub fn validate(&self, n: usize) -> Result<(), String> {
        if self.fanout < 1 || self.fanout > n.saturating_sub(1) {
            return Err(format!("fanout must lie in [1, n-1] (got {}, n={n})", self.fanout));
        }
        if self.anti_entropy_period == 0 {
            return Err("anti_entropy_period must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GossipState {
    me: NodeId,
    n: usize,
    cfg: GossipConfig,
    known: BTreeMap<TxId, Transaction>,
    rng: ChaCha8Rng,
}

impl GossipState {
    pub fn new(me: NodeId, n: usize, cfg: GossipConfig, seed: u64) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(me.0) << 32) ^ 0x9e37_79b9_7f4a_7c15);
        GossipState {
            me,
            n,
            cfg,
            known: BTreeMap::new(),
            rng,
        }
    }

    pub fn has(&self, id: TxId) -> bool {
        self.known.contains_key(&id)
    }

    pub fn get(&self, id: TxId) -> Option<&Transaction> {
        self.known.get(&id)
    }

    /// Records a payload; returns `(newly_learned, peers_to_push_to)`.
    ///
    /// Only the first receipt pushes. With `forward_once` set, payloads learned
    /// through anti-entropy (`via_sync`) are not pushed at all.
    pub fn on_receive(&mut self, tx: Transaction, from: Option<NodeId>, via_sync: bool) -> (bool, Vec<NodeId>) {
        let id = tx.id;
        if self.known.contains_key(&id) {
            return (false, Vec::new());
        }
        self.known.insert(id, tx);
        if via_sync && self.cfg.forward_once {
            return (true, Vec::new());
        }
        let mut peers: Vec<NodeId> = (0..self.n as u32)
            .map(NodeId)
            .filter(|p| *p != self.me && Some(*p) != from)
            .collect();
        peers.shuffle(&mut self.rng);
        peers.truncate(self.cfg.fanout);
        peers.sort();
        (true, peers)
    }

    pub fn is_tick(&self, round: Round) -> bool {
        round > 0 && round.is_multiple_of(self.cfg.anti_entropy_period)
    }

    /// Anti-entropy partner for the tick at `round`.
    pub fn sync_peer(&self, round: Round) -> NodeId {
        let tick = round / self.cfg.anti_entropy_period;
        let offset = 1 + (tick % (self.n as u64 - 1)) as u32;
        NodeId((self.me.0 + offset) % self.n as u32)
    }

    /// Identifiers known locally and still live.
    pub fn digest(&self, live: impl Fn(TxId) -> bool) -> Vec<TxId> {
        self.known.keys().copied().filter(|id| live(*id)).collect()
    }

    /// Compares a peer's digest with local knowledge: returns the payloads the
    /// peer lacks and the ids this replica should request.
    pub fn reconcile(&self, peer_digest: &[TxId], live: impl Fn(TxId) -> bool) -> (Vec<Transaction>, Vec<TxId>) {
        let theirs: BTreeSet<TxId> = peer_digest.iter().copied().collect();
        let push = self
            .known
            .iter()
            .filter(|(id, _)| !theirs.contains(id) && live(**id))
            .map(|(_, tx)| tx.clone())
            .collect();
        let pull = theirs
            .iter()
            .copied()
            .filter(|id| !self.known.contains_key(id))
            .collect();
        (push, pull)
    }

    pub fn lookup(&self, ids: &[TxId]) -> Vec<Transaction> {
        ids.iter().filter_map(|id| self.known.get(id).cloned()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_targets_respect_fanout_and_exclusions() {
        let cfg = GossipConfig {
            fanout: 3,
            ..Default::default()
        };
        let mut g = GossipState::new(NodeId(2), 7, cfg, 11);
        let (fresh, peers) = g.on_receive(Transaction::new(0, 0, 1, None, 0), Some(NodeId(5)), false);
        assert!(fresh);
        assert_eq!(peers.len(), 3);
        assert!(!peers.contains(&NodeId(2)) && !peers.contains(&NodeId(5)));
        let (fresh, peers) = g.on_receive(Transaction::new(0, 0, 1, None, 0), None, false);
        assert!(!fresh && peers.is_empty());
    }

    #[test]
    fn rotation_visits_every_peer() {
        let g = GossipState::new(NodeId(3), 7, GossipConfig::default(), 0);
        let peers: BTreeSet<NodeId> = (1..=6).map(|t| g.sync_peer(t * 2)).collect();
        assert_eq!(peers.len(), 6);
        assert!(!peers.contains(&NodeId(3)));
    }

    #[test]
    fn reconcile_is_push_pull() {
        let a = Transaction::new(0, 1, 1, None, 0);
        let b = Transaction::new(0, 2, 1, None, 0);
        let mut g = GossipState::new(NodeId(0), 4, GossipConfig::default(), 0);
        g.on_receive(a.clone(), None, false);
        let (push, pull) = g.reconcile(&[b.id], |_| true);
        assert_eq!(push, vec![a]);
        assert_eq!(pull, vec![b.id]);
    }

    #[test]
    fn fanout_bounds() {
        assert!(GossipConfig {
            fanout: 0,
            ..Default::default()
        }
        .validate(4)
        .is_err());
        assert!(GossipConfig {
            fanout: 4,
            ..Default::default()
        }
        .validate(4)
        .is_err());
        assert!(GossipConfig {
            fanout: 3,
            ..Default::default()
        }
        .validate(4)
        .is_ok());
    }
}
