//! Deterministic transaction selection from full-payload inclusion lists.
//!
//! Conflicts are resolved first (lowest author id wins; earliest position
//! within one list), then a capacity rule picks the executed set:
//! - frequency: rank by (appearances desc, tx_id asc), keep the longest
//!   prefix of the ranking that fits;
//! - prefix: the largest `x` such that the union of the first `x` surviving
//!   entries of every list fits.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::types::{Transaction, TxId};
use crate::variants::il::InclusionList;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionRule {
    #[default]
    Frequency,
    Prefix,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConflictResolution {
    /// Surviving entries per list, in input order; multiplicity preserved.
    pub kept: Vec<Vec<Transaction>>,
    /// Losers of conflict resolution.
    pub dropped: BTreeSet<TxId>,
}

impl ConflictResolution {
    pub fn multiset(&self) -> impl Iterator<Item = &Transaction> {
        self.kept.iter().flatten()
    }
}

fn sorted_by_author<'a>(ils: &[&'a InclusionList]) -> Vec<&'a InclusionList> {
    let mut v = ils.to_vec();
    v.sort_by_key(|il| il.author);
    v
}

/// Keeps one transaction per conflict class. `skip` drops entries up front
/// (already committed). Lists are processed in ascending author order.
pub fn resolve_conflicts(ils: &[&InclusionList], skip: impl Fn(TxId) -> bool) -> ConflictResolution {
    let ils = sorted_by_author(ils);
    let mut winner: BTreeMap<u64, TxId> = BTreeMap::new();
    for il in &ils {
        for tx in il.full_txs() {
            if skip(tx.id) {
                continue;
            }
            if let Some(class) = tx.conflict_class {
                winner.entry(class).or_insert(tx.id);
            }
        }
    }
    let mut dropped = BTreeSet::new();
    let kept = ils
        .iter()
        .map(|il| {
            il.full_txs()
                .filter(|tx| !skip(tx.id))
                .filter(|tx| match tx.conflict_class {
                    Some(class) if winner[&class] != tx.id => {
                        dropped.insert(tx.id);
                        false
                    }
                    _ => true,
                })
                .cloned()
                .collect()
        })
        .collect();
    ConflictResolution { kept, dropped }
}

fn fits(txs: &[Transaction], capacity: Option<u64>) -> bool {
    capacity.is_none_or(|cap| txs.iter().map(|t| t.size_bytes).sum::<u64>() <= cap)
}

pub fn select_frequency(resolved: &ConflictResolution, capacity: Option<u64>) -> Vec<Transaction> {
    let mut freq: BTreeMap<TxId, (usize, &Transaction)> = BTreeMap::new();
    for tx in resolved.multiset() {
        freq.entry(tx.id).or_insert((0, tx)).0 += 1;
    }
    let mut ranked: Vec<(usize, TxId, &Transaction)> = freq.into_iter().map(|(id, (c, tx))| (c, id, tx)).collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<Transaction> = Vec::new();
    let mut used = 0u64;
    for (_, _, tx) in ranked {
        if capacity.is_some_and(|cap| used + tx.size_bytes > cap) {
            break;
        }
        used += tx.size_bytes;
        out.push(tx.clone());
    }
    out
}

fn prefix_union(resolved: &ConflictResolution, x: usize) -> Vec<Transaction> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for list in &resolved.kept {
        for tx in list.iter().take(x) {
            if seen.insert(tx.id) {
                out.push(tx.clone());
            }
        }
    }
    out
}

pub fn select_prefix(resolved: &ConflictResolution, capacity: Option<u64>) -> Vec<Transaction> {
    let longest = resolved.kept.iter().map(Vec::len).max().unwrap_or(0);
    let mut best = Vec::new();
    for x in 1..=longest {
        let union = prefix_union(resolved, x);
        if !fits(&union, capacity) {
            break;
        }
        best = union;
    }
    best
}

/// Executed transaction sequence of a full-payload block built from `ils`.
pub fn select(
    ils: &[&InclusionList],
    rule: SelectionRule,
    capacity: Option<u64>,
    skip: impl Fn(TxId) -> bool,
) -> Vec<Transaction> {
    let resolved = resolve_conflicts(ils, skip);
    match rule {
        SelectionRule::Frequency => select_frequency(&resolved, capacity),
        SelectionRule::Prefix => select_prefix(&resolved, capacity),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::NodeId;
    use crate::variants::il::Entry;

    fn il(author: u32, txs: &[&Transaction]) -> InclusionList {
        InclusionList::new(
            NodeId(author),
            0,
            txs.iter().map(|t| Entry::Full((*t).clone())).collect(),
        )
    }

    fn ids(txs: &[Transaction]) -> Vec<u64> {
        txs.iter().map(|t| t.id.0).collect()
    }

    #[test]
    fn frequency_and_prefix_on_three_lists() {
        let (a, b, c) = (
            Transaction::with_id(1, 100, None),
            Transaction::with_id(2, 100, None),
            Transaction::with_id(3, 100, None),
        );
        let lists = [il(0, &[&a, &b]), il(1, &[&b, &c]), il(2, &[&b, &a])];
        let refs: Vec<&InclusionList> = lists.iter().collect();
        // b appears 3 times, a twice, c once; capacity two transactions.
        let freq = select(&refs, SelectionRule::Frequency, Some(200), |_| false);
        assert_eq!(ids(&freq), vec![2, 1]);
        // x=1 → {a, b} fits; x=2 → {a, b, c} overflows.
        let prefix = select(&refs, SelectionRule::Prefix, Some(200), |_| false);
        assert_eq!(ids(&prefix), vec![1, 2]);
        let all = select(&refs, SelectionRule::Prefix, None, |_| false);
        assert_eq!(ids(&all), vec![1, 2, 3]);
    }

    #[test]
    fn lowest_author_wins_conflicts() {
        let x = Transaction::with_id(10, 1, Some(7));
        let y = Transaction::with_id(20, 1, Some(7));
        let lists = [il(2, &[&x]), il(1, &[&y])];
        let r = resolve_conflicts(&lists.iter().collect::<Vec<_>>(), |_| false);
        let survivors: Vec<TxId> = r.multiset().map(|t| t.id).collect();
        assert_eq!(survivors, vec![y.id]);
        assert_eq!(r.dropped, BTreeSet::from([x.id]));
    }

    #[test]
    fn earliest_position_wins_within_one_list() {
        let x = Transaction::with_id(50, 1, Some(1));
        let filler = Transaction::with_id(2, 1, None);
        let filler2 = Transaction::with_id(3, 1, None);
        let y = Transaction::with_id(5, 1, Some(1));
        let lists = [il(1, &[&x, &filler, &filler2, &y])];
        let r = resolve_conflicts(&lists.iter().collect::<Vec<_>>(), |_| false);
        assert!(r.dropped.contains(&y.id) && !r.dropped.contains(&x.id));
    }

    #[test]
    fn no_conflicts_is_identity() {
        let txs: Vec<Transaction> = (1..5).map(|i| Transaction::with_id(i, 1, None)).collect();
        let lists = [il(0, &[&txs[0], &txs[1]]), il(1, &[&txs[2], &txs[3], &txs[0]])];
        let r = resolve_conflicts(&lists.iter().collect::<Vec<_>>(), |_| false);
        assert_eq!(r.kept[0], lists[0].full_txs().cloned().collect::<Vec<_>>());
        assert_eq!(r.kept[1], lists[1].full_txs().cloned().collect::<Vec<_>>());
        assert!(r.dropped.is_empty());
    }
}
