//! Adversary configuration and the censoring leader's selection logic.
//!
//! Two models share one config: `malicious` replicas (at most f) run a
//! strategy from a fixed library, while `bribed` replicas are otherwise honest
//! but omit target transactions and, when leading, try to censor them.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::types::NodeId;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeaderStrategy {
    #[default]
    Honest,
    Silent,
    Censor,
    Equivocate,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkStrategy {
    #[default]
    Fair,
    MaxDelay,
    Random,
    TargetedDelay,
}

/// What a censoring leader does when no censoring block can gather a quorum.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fallback {
    #[default]
    Silent,
    Honest,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversaryConfig {
    pub malicious: BTreeSet<NodeId>,
    pub bribed: BTreeSet<NodeId>,
    /// Indices into the workload's submission list.
    pub targets: BTreeSet<usize>,
    pub leader_strategy: LeaderStrategy,
    pub network_strategy: NetworkStrategy,
    /// Endpoints slowed down by `targeted-delay`.
    pub delay_victims: BTreeSet<NodeId>,
    pub fallback: Fallback,
}

impl AdversaryConfig {
    pub fn validate(&self, n: usize, f: usize) -> Result<(), (&'static str, String)> {
        let out_of_range = |set: &BTreeSet<NodeId>| set.iter().find(|id| id.index() >= n).copied();
        if let Some(id) = out_of_range(&self.malicious) {
            return Err(("adversary.malicious", format!("replica {id} does not exist (n={n})")));
        }
        if self.malicious.len() > f {
            return Err((
                "adversary.malicious",
                format!("{} malicious replicas exceed f={f}", self.malicious.len()),
            ));
        }
        if let Some(id) = out_of_range(&self.bribed) {
            return Err(("adversary.bribed", format!("replica {id} does not exist (n={n})")));
        }
        Ok(())
    }
}

/// Embedded-evidence variants: the first `need` lists free of targets, if
/// that many exist. `dirty[i]` marks lists containing a target.
pub fn censor_subset(dirty: &[bool], need: usize) -> Option<Vec<usize>> {
    let clean: Vec<usize> = (0..dirty.len()).filter(|i| !dirty[*i]).collect();
    (clean.len() >= need).then(|| clean[..need].to_vec())
}

/// Lists-used variant: a set of at least `min_lists` authors such that the
/// replicas that would reject (listed authors whose list holds a target) still
/// leave `2f+1` votes. Uses as few dirty lists as possible.
pub fn censor_lists_used(dirty: &[bool], min_lists: usize, n: usize, f: usize) -> Option<Vec<usize>> {
    let clean: Vec<usize> = (0..dirty.len()).filter(|i| !dirty[*i]).collect();
    let tainted: Vec<usize> = (0..dirty.len()).filter(|i| dirty[*i]).collect();
    let fill = min_lists.saturating_sub(clean.len());
    if fill > tainted.len() || n - fill < 2 * f + 1 {
        return None;
    }
    let mut chosen: Vec<usize> = clean.into_iter().take(min_lists).collect();
    chosen.extend_from_slice(&tainted[..fill]);
    chosen.sort_unstable();
    Some(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subsets(len: usize) -> impl Iterator<Item = Vec<usize>> {
        (0u32..(1 << len)).map(move |m| (0..len).filter(|i| m & (1 << i) != 0).collect())
    }

    #[test]
    fn subset_matches_enumeration() {
        for len in 0..=7 {
            for need in 1..=len.max(1) {
                for mask in 0u32..(1 << len) {
                    let dirty: Vec<bool> = (0..len).map(|i| mask & (1 << i) != 0).collect();
                    let exists = subsets(len).any(|s| s.len() == need && s.iter().all(|i| !dirty[*i]));
                    let got = censor_subset(&dirty, need);
                    assert_eq!(got.is_some(), exists, "{dirty:?} need {need}");
                    if let Some(s) = got {
                        assert_eq!(s.len(), need);
                        assert!(s.iter().all(|i| !dirty[*i]));
                    }
                }
            }
        }
    }

    #[test]
    fn four_lists_two_dirty() {
        assert_eq!(censor_subset(&[true, false, true, false], 3), None);
        assert_eq!(censor_subset(&[true, false, false, false], 3), Some(vec![1, 2, 3]));
        assert_eq!(censor_subset(&[true, true, true, false], 3), None);
    }

    #[test]
    fn lists_used_matches_enumeration() {
        for (n, f) in [(4usize, 1usize), (7, 2)] {
            let min = 2 * f + 1;
            for mask in 0u32..(1 << n) {
                let dirty: Vec<bool> = (0..n).map(|i| mask & (1 << i) != 0).collect();
                let exists = subsets(n).any(|s| {
                    let rejecting = s.iter().filter(|i| dirty[**i]).count();
                    s.len() >= min && n - rejecting >= 2 * f + 1
                });
                let got = censor_lists_used(&dirty, min, n, f);
                assert_eq!(got.is_some(), exists, "n={n} {dirty:?}");
                if let Some(s) = got {
                    let rejecting = s.iter().filter(|i| dirty[**i]).count();
                    assert!(s.len() >= min && n - rejecting >= 2 * f + 1);
                }
            }
        }
    }

    #[test]
    fn validate_bounds() {
        let mut a = AdversaryConfig::default();
        a.malicious.insert(NodeId(1));
        assert!(a.validate(4, 1).is_ok());
        a.malicious.insert(NodeId(2));
        assert_eq!(a.validate(4, 1).unwrap_err().0, "adversary.malicious");
        let b = AdversaryConfig {
            bribed: [NodeId(9)].into(),
            ..Default::default()
        };
        assert_eq!(b.validate(4, 1).unwrap_err().0, "adversary.bribed");
    }
}
