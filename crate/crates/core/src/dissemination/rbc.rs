//! Bracha reliable broadcast of client transactions.
//!
//! SEND (client to all), ECHO and READY (all-to-all). Thresholds:
//! ECHO→READY at 2f+1 echoes, READY amplification at f+1 readies, delivery at
//! 2f+1 readies. A replica counts its own ECHO/READY the moment it sends them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::types::{NodeId, Transaction, TxId};

/// Broadcast instance identifier; chosen by the client, independent of value.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RbcTag {
    pub client: u32,
    pub seq: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RbcMessage {
    Send(RbcTag, Transaction),
    Echo(RbcTag, Transaction),
    Ready(RbcTag, Transaction),
}

impl RbcMessage {
    pub fn tag(&self) -> RbcTag {
        match self {
            RbcMessage::Send(t, _) | RbcMessage::Echo(t, _) | RbcMessage::Ready(t, _) => *t,
        }
    }

    pub fn value(&self) -> &Transaction {
        match self {
            RbcMessage::Send(_, v) | RbcMessage::Echo(_, v) | RbcMessage::Ready(_, v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RbcAction {
    /// Send to every other replica.
    Multicast(RbcMessage),
    Deliver(Transaction),
}

/// Per-replica state of one broadcast instance.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RbcInstance {
    me: NodeId,
    sender: NodeId,
    tag: RbcTag,
    n: usize,
    f: usize,
    sent_echo: bool,
    sent_ready: bool,
    delivered: Option<TxId>,
    echoes: BTreeMap<NodeId, TxId>,
    readies: BTreeMap<NodeId, TxId>,
    values: BTreeMap<TxId, Transaction>,
}

impl RbcInstance {
    pub fn new(me: NodeId, sender: NodeId, tag: RbcTag, n: usize, f: usize) -> Self {
        RbcInstance {
            me,
            sender,
            tag,
            n,
            f,
            sent_echo: false,
            sent_ready: false,
            delivered: None,
            echoes: BTreeMap::new(),
            readies: BTreeMap::new(),
            values: BTreeMap::new(),
        }
    }

    pub fn delivered(&self) -> Option<TxId> {
        self.delivered
    }

    pub fn sent_echo(&self) -> bool {
        self.sent_echo
    }

    pub fn sent_ready(&self) -> bool {
        self.sent_ready
    }

    /// The first ECHO counted from `from`.
    pub fn echo_of(&self, from: NodeId) -> Option<TxId> {
        self.echoes.get(&from).copied()
    }

    /// The first READY counted from `from`.
    pub fn ready_of(&self, from: NodeId) -> Option<TxId> {
        self.readies.get(&from).copied()
    }

    fn count(map: &BTreeMap<NodeId, TxId>, value: TxId) -> usize {
        map.values().filter(|v| **v == value).count()
    }

    /// Handles one message from `from`; duplicate ECHO/READY per sender are ignored.
    pub fn handle(&mut self, from: NodeId, msg: RbcMessage) -> Vec<RbcAction> {
        debug_assert_eq!(msg.tag(), self.tag);
        let mut out = Vec::new();
        match msg {
            RbcMessage::Send(tag, value) => {
                if from != self.sender || self.sent_echo {
                    return out;
                }
                self.sent_echo = true;
                self.echoes.insert(self.me, value.id);
                self.values.entry(value.id).or_insert_with(|| value.clone());
                out.push(RbcAction::Multicast(RbcMessage::Echo(tag, value)));
            }
            RbcMessage::Echo(_, value) => {
                if from.index() >= self.n || self.echoes.contains_key(&from) {
                    return out;
                }
                self.echoes.insert(from, value.id);
                self.values.entry(value.id).or_insert(value);
            }
            RbcMessage::Ready(_, value) => {
                if from.index() >= self.n || self.readies.contains_key(&from) {
                    return out;
                }
                self.readies.insert(from, value.id);
                self.values.entry(value.id).or_insert(value);
            }
        }
        self.progress(&mut out);
        out
    }

    fn progress(&mut self, out: &mut Vec<RbcAction>) {
        if !self.sent_ready {
            let candidate = self.values.keys().copied().find(|v| {
                Self::count(&self.echoes, *v) >= 2 * self.f + 1 || Self::count(&self.readies, *v) >= self.f + 1
            });
            if let Some(v) = candidate {
                self.sent_ready = true;
                self.readies.insert(self.me, v);
                out.push(RbcAction::Multicast(RbcMessage::Ready(
                    self.tag,
                    self.values[&v].clone(),
                )));
            }
        }
        if self.delivered.is_none() {
            let ready = self
                .values
                .keys()
                .copied()
                .find(|v| Self::count(&self.readies, *v) >= 2 * self.f + 1);
            if let Some(v) = ready {
                self.delivered = Some(v);
                out.push(RbcAction::Deliver(self.values[&v].clone()));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TAG: RbcTag = RbcTag { client: 0, seq: 0 };
    const CLIENT: NodeId = NodeId(100);

    /// Synchronous lock-step driver: every message takes one round.
    fn run_honest(n: usize, f: usize, values: &[Transaction]) -> Vec<(Option<TxId>, u64)> {
        let mut reps: Vec<RbcInstance> = (0..n)
            .map(|i| RbcInstance::new(NodeId(i as u32), CLIENT, TAG, n, f))
            .collect();
        let mut delivered_at = vec![None; n];
        let mut inflight: Vec<(NodeId, NodeId, RbcMessage)> = (0..n)
            .map(|i| {
                let v = values[i % values.len()].clone();
                (CLIENT, NodeId(i as u32), RbcMessage::Send(TAG, v))
            })
            .collect();
        let mut round = 0;
        while !inflight.is_empty() {
            round += 1;
            let mut next = Vec::new();
            for (from, to, msg) in inflight.drain(..) {
                for action in reps[to.index()].handle(from, msg) {
                    match action {
                        RbcAction::Multicast(m) => {
                            for j in 0..n {
                                if j != to.index() {
                                    next.push((to, NodeId(j as u32), m.clone()));
                                }
                            }
                        }
                        RbcAction::Deliver(_) => delivered_at[to.index()] = Some(round),
                    }
                }
            }
            inflight = next;
        }
        reps.iter()
            .zip(delivered_at)
            .map(|(r, at)| (r.delivered(), at.unwrap_or(0)))
            .collect()
    }

    #[test]
    fn honest_client_delivers_everywhere_after_three_steps() {
        let tx = Transaction::new(0, 0, 250, None, 0);
        for (d, at) in run_honest(4, 1, std::slice::from_ref(&tx)) {
            assert_eq!(d, Some(tx.id));
            assert_eq!(at, 3);
        }
    }

    #[test]
    fn even_split_equivocation_delivers_nothing_among_honest() {
        let v = Transaction::new(0, 0, 250, None, 0);
        let w = Transaction::new(0, 1, 250, None, 0);
        for (d, _) in run_honest(4, 1, &[v, w]) {
            assert_eq!(d, None);
        }
    }

    #[test]
    fn send_only_accepted_from_sender() {
        let tx = Transaction::new(0, 0, 250, None, 0);
        let mut r = RbcInstance::new(NodeId(0), CLIENT, TAG, 4, 1);
        assert!(r.handle(NodeId(2), RbcMessage::Send(TAG, tx.clone())).is_empty());
        assert_eq!(r.handle(CLIENT, RbcMessage::Send(TAG, tx.clone())).len(), 1);
        assert!(r.handle(CLIENT, RbcMessage::Send(TAG, tx)).is_empty());
    }

    #[test]
    fn ready_amplification_at_f_plus_one() {
        let tx = Transaction::new(0, 0, 250, None, 0);
        let mut r = RbcInstance::new(NodeId(0), CLIENT, TAG, 4, 1);
        assert!(r.handle(NodeId(1), RbcMessage::Ready(TAG, tx.clone())).is_empty());
        let out = r.handle(NodeId(2), RbcMessage::Ready(TAG, tx.clone()));
        assert!(matches!(
            out.as_slice(),
            [RbcAction::Multicast(RbcMessage::Ready(..)), RbcAction::Deliver(_)]
        ));
    }
}
