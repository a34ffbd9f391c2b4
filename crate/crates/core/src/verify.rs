//! The acceptance suite: one pass/fail verdict per criterion.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{AdversaryConfig, LeaderStrategy, NetworkStrategy};
use crate::checker::{check_consensus_epoch, check_da, check_rbc};
use crate::experiments::{
    bribery_sweep, expected_bribes, latency_probe, max_censorship_probe, repeated_inclusions, scaling_probe,
    SCALING_SIZES,
};
use crate::metrics::{duplication_factor, render_json};
use crate::net::NetConfig;
use crate::scenario::{run_scenario, sweep, Experiment, ScenarioConfig, SizeCell, SweepGrid, WorkloadConfig};
use crate::sim::{run, RunLog};
use crate::types::{NodeId, Transaction, TxId};
use crate::variants::il::{Entry, InclusionList};
use crate::variants::select::{resolve_conflicts, select, SelectionRule};
use crate::variants::{Variant, VariantConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{verdict}] {:>2} {}: {}", self.id, self.name, self.detail)
    }
}

pub const CRITERIA: [(u8, &str); 11] = [
    (1, "censorship resistance"),
    (2, "plain censorship bound"),
    (3, "bribery thresholds"),
    (4, "latency increments"),
    (5, "communication scaling"),
    (6, "deduplication"),
    (7, "safety"),
    (8, "reliable broadcast"),
    (9, "data availability"),
    (10, "tie-breaking oracles"),
    (11, "determinism"),
];

const SEED: u64 = 1;

/// Runs criterion `id` (1..=11).
pub fn criterion(id: u8) -> CriterionResult {
    let name = CRITERIA
        .iter()
        .find(|(i, _)| *i == id)
        .map_or("unknown", |(_, n)| n)
        .to_owned();
    let outcome = std::panic::catch_unwind(|| match id {
        1 => censorship_resistance(),
        2 => plain_censorship(),
        3 => bribery(),
        4 => latency(),
        5 => scaling(),
        6 => deduplication(100),
        7 => safety(1000),
        8 => rbc(),
        9 => data_availability(),
        10 => tie_breaking(500),
        11 => determinism(),
        _ => Err(format!("no criterion {id}")),
    });
    let (passed, detail) = match outcome {
        Ok(Ok(detail)) => (true, detail),
        Ok(Err(detail)) => (false, detail),
        Err(panic) => (false, format!("panicked: {}", panic_message(&panic))),
    };
    CriterionResult {
        id,
        name,
        passed,
        detail,
    }
}

fn panic_message(panic: &Box<dyn std::any::Any + Send>) -> String {
    panic
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| panic.downcast_ref::<&str>().map(|s| (*s).to_owned()))
        .unwrap_or_else(|| "unknown panic".into())
}

/// Runs the given criteria in parallel; results keep the input order.
pub fn verify(ids: &[u8]) -> Vec<CriterionResult> {
    ids.par_iter().map(|id| criterion(*id)).collect()
}

pub fn verify_all() -> Vec<CriterionResult> {
    let ids: Vec<u8> = CRITERIA.iter().map(|(id, _)| *id).collect();
    verify(&ids)
}

type Check = Result<String, String>;

fn ensure(ok: bool, failures: &mut Vec<String>, what: impl FnOnce() -> String) {
    if !ok {
        failures.push(what());
    }
}

fn finish(failures: Vec<String>, summary: String) -> Check {
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(failures.join("; "))
    }
}

const CENSOR_SIZES: [(usize, usize); 3] = [(4, 1), (7, 2), (10, 3)];

fn censorship_resistance() -> Check {
    let mut failures = Vec::new();
    let mut cells = 0;
    for (n, f) in CENSOR_SIZES {
        for v in Variant::IL {
            let p = max_censorship_probe(v, n, f, SEED).map_err(|e| format!("{v} n={n}: {e}"))?;
            cells += 1;
            ensure(p.delay_epochs == 0 && p.delay_rounds == 0, &mut failures, || {
                format!(
                    "{v} n={n}: delayed {} epochs / {} rounds",
                    p.delay_epochs, p.delay_rounds
                )
            });
        }
    }
    finish(failures, format!("0 extra epochs in all {cells} variant/size cells"))
}

fn plain_censorship() -> Check {
    let mut failures = Vec::new();
    let mut seen = Vec::new();
    for (n, f) in CENSOR_SIZES {
        let p = max_censorship_probe(Variant::Plain, n, f, SEED).map_err(|e| format!("n={n}: {e}"))?;
        let period = p.proposal_period_rounds.unwrap_or(f64::NAN);
        ensure(
            p.delay_epochs == f as u64 && p.delay_rounds as f64 == f as f64 * period,
            &mut failures,
            || {
                format!(
                    "n={n} f={f}: {} epochs / {} rounds with period {period}",
                    p.delay_epochs, p.delay_rounds
                )
            },
        );
        seen.push(format!("f={f}: {}r", p.delay_rounds));
    }
    finish(failures, format!("delay = f periods ({})", seen.join(", ")))
}

fn bribery() -> Check {
    let mut failures = Vec::new();
    let mut seen = Vec::new();
    for (n, f) in [(4, 1), (7, 2)] {
        for v in Variant::IL {
            let b = bribery_sweep(v, n, f, SEED).map_err(|e| format!("{v} n={n}: {e}"))?;
            let want = expected_bribes(v, f);
            ensure(b.threshold == Some(want), &mut failures, || {
                format!("{v} n={n}: threshold {:?}, expected {want}", b.threshold)
            });
            ensure(want == 0 || !b.censored[want - 1], &mut failures, || {
                format!("{v} n={n}: {} bribes already censor", want - 1)
            });
            seen.push(format!("{v}@{n}={}", b.threshold.map_or("-".into(), |k| k.to_string())));
        }
    }
    finish(failures, format!("leader + k: {}", seen.join(" ")))
}

fn latency() -> Check {
    let mut failures = Vec::new();
    let mut seen = Vec::new();
    for v in [Variant::IlBase, Variant::IlRbc, Variant::IlDa, Variant::IlGossip] {
        let p = latency_probe(v, 7, 2, SEED).map_err(|e| format!("{v}: {e}"))?;
        let r = &p.report;
        let want = match v {
            Variant::IlRbc => Some(2),
            Variant::IlDa => {
                ensure(r.t_disp == Some(2) && r.t_ret == Some(2), &mut failures, || {
                    format!("il-da: t_disp {:?}, t_ret {:?}", r.t_disp, r.t_ret)
                });
                r.t_disp.zip(r.t_ret).map(|(d, t)| d + t)
            }
            Variant::IlGossip => r.t_prop,
            _ => Some(0),
        };
        ensure(
            want == Some(p.increment as u64) && p.increment >= 0,
            &mut failures,
            || format!("{v}: increment {} vs expected {want:?}", p.increment),
        );
        seen.push(format!("{v} +{}", p.increment));
    }
    finish(failures, seen.join(", "))
}

/// Transactions per replica for the scaling runs; large enough that per-list
/// content dominates fixed per-epoch costs.
pub const SCALING_LOAD: usize = 16;

fn scaling() -> Check {
    let mut failures = Vec::new();
    let base = scaling_probe(Variant::IlBase, &SCALING_SIZES, SCALING_LOAD, SEED).map_err(|e| e.to_string())?;
    let local = scaling_probe(Variant::IlLocal, &SCALING_SIZES, SCALING_LOAD, SEED).map_err(|e| e.to_string())?;
    ensure((1.8..=2.2).contains(&base.slope), &mut failures, || {
        format!("il-base slope {:.3} outside [1.8, 2.2]", base.slope)
    });
    ensure((0.8..=1.2).contains(&local.slope), &mut failures, || {
        format!("il-local slope {:.3} outside [0.8, 1.2]", local.slope)
    });
    finish(
        failures,
        format!("il-base {:.3}, il-local {:.3}", base.slope, local.slope),
    )
}

fn random_faulty(rng: &mut ChaCha8Rng, n: usize, f: usize) -> BTreeSet<NodeId> {
    sample(rng, n, f).into_iter().map(|i| NodeId(i as u32)).collect()
}

/// One seeded run with `f` malicious replicas at n=7, used for deduplication.
pub fn dedup_run(variant: Variant, seed: u64) -> Result<RunLog, String> {
    let (n, f) = (7, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strategies = [
        LeaderStrategy::Censor,
        LeaderStrategy::Silent,
        LeaderStrategy::Equivocate,
        LeaderStrategy::Honest,
    ];
    let cfg = ScenarioConfig {
        name: format!("dedup/{}/s{seed}", variant.name()),
        net: NetConfig {
            seed,
            delta_cap: 2,
            ..NetConfig::with_nf(n, f)
        },
        protocol: VariantConfig::of(variant),
        adversary: AdversaryConfig {
            malicious: random_faulty(&mut rng, n, f),
            targets: [0, 5].into(),
            leader_strategy: strategies[seed as usize % strategies.len()],
            network_strategy: NetworkStrategy::Random,
            ..AdversaryConfig::default()
        },
        workload: WorkloadConfig {
            tx_count: 12,
            start_round: 1,
            batch: 2,
            ..WorkloadConfig::default()
        },
        epochs: 8,
        compare_plain: false,
        ..ScenarioConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    run(cfg.setup()).map_err(|e| e.to_string())
}

fn deduplication(seeds: u64) -> Check {
    let mut failures = Vec::new();
    let mut txs = 0usize;
    for v in [Variant::IlDa, Variant::IlRbc, Variant::IlGossip, Variant::IlLocal] {
        for seed in 0..seeds {
            let log = dedup_run(v, seed).map_err(|e| format!("{v} seed {seed}: {e}"))?;
            let factor = duplication_factor(&log);
            txs += crate::metrics::first_inclusion(&log).len();
            ensure(
                factor == Some(1.0) && repeated_inclusions(&log) == 0,
                &mut failures,
                || format!("{v} seed {seed}: duplication factor {factor:?}"),
            );
        }
    }
    finish(
        failures,
        format!("factor 1.0 in {} runs ({txs} committed txs)", 4 * seeds),
    )
}

/// One seeded adversarial run for the safety suite.
pub fn safety_run(variant: Variant, seed: u64) -> Result<RunLog, String> {
    let (n, f) = if seed % 4 == 3 { (7, 2) } else { (4, 1) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5afe);
    let gst = [0, 5, 20][(seed % 3) as usize];
    let network_strategy = if seed.is_multiple_of(2) {
        NetworkStrategy::MaxDelay
    } else {
        NetworkStrategy::Random
    };
    let cfg = ScenarioConfig {
        name: format!("safety/{}/s{seed}", variant.name()),
        net: NetConfig {
            seed,
            delta_cap: 2,
            gst,
            pre_gst_cap: 6,
            ..NetConfig::with_nf(n, f)
        },
        protocol: VariantConfig::of(variant),
        adversary: AdversaryConfig {
            malicious: random_faulty(&mut rng, n, f),
            leader_strategy: LeaderStrategy::Equivocate,
            network_strategy,
            ..AdversaryConfig::default()
        },
        workload: WorkloadConfig {
            tx_count: 6,
            conflict_classes: Some(4),
            ..WorkloadConfig::default()
        },
        epochs: 5,
        compare_plain: false,
        ..ScenarioConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    run(cfg.setup()).map_err(|e| e.to_string())
}

fn safety(seeds: u64) -> Check {
    let mut failures = Vec::new();
    let mut committed = 0usize;
    for v in Variant::ALL {
        for seed in 0..seeds {
            match std::panic::catch_unwind(|| safety_run(v, seed)) {
                Ok(Ok(log)) => {
                    committed += log.decided.len();
                    ensure(log.agreement_violations.is_empty(), &mut failures, || {
                        format!("{v} seed {seed}: disagreement in epochs {:?}", log.agreement_violations)
                    });
                }
                Ok(Err(e)) => failures.push(format!("{v} seed {seed}: {e}")),
                Err(p) => failures.push(format!("{v} seed {seed}: {}", panic_message(&p))),
            }
        }
    }
    let exhaustive = check_consensus_epoch(usize::MAX);
    ensure(exhaustive.passed(), &mut failures, || {
        format!("single-epoch search: {:?}", exhaustive.violations)
    });
    failures.truncate(8);
    finish(
        failures,
        format!(
            "{} runs, {committed} decided epochs, 0 violations; single-epoch search over {} states",
            seeds * Variant::ALL.len() as u64,
            exhaustive.explored
        ),
    )
}

fn rbc() -> Check {
    let r = check_rbc(usize::MAX);
    if r.passed() {
        Ok(format!("{} states, {} with deliveries", r.explored, r.decided_states))
    } else {
        Err(r.violations.join("; "))
    }
}

fn data_availability() -> Check {
    let r = check_da(200, SEED);
    if r.passed() {
        Ok(format!("{} schedules, {} retrieved", r.explored, r.decided_states))
    } else {
        Err(r.violations.join("; "))
    }
}

/// Brute-force reference implementations of the selection rules.
pub mod oracle {
    use super::*;

    /// Winner of each conflict class: the occurrence with the smallest
    /// (author, position) over all lists.
    pub fn conflict_winners(ils: &[InclusionList]) -> BTreeMap<u64, TxId> {
        let mut best: BTreeMap<u64, ((NodeId, usize), TxId)> = BTreeMap::new();
        for il in ils {
            for (pos, tx) in il.full_txs().enumerate() {
                let Some(class) = tx.conflict_class else { continue };
                let key = (il.author, pos);
                let slot = best.entry(class).or_insert((key, tx.id));
                if key < slot.0 {
                    *slot = (key, tx.id);
                }
            }
        }
        best.into_iter().map(|(c, (_, id))| (c, id)).collect()
    }

    fn survives(tx: &Transaction, winners: &BTreeMap<u64, TxId>) -> bool {
        tx.conflict_class.is_none_or(|c| winners[&c] == tx.id)
    }

    /// Lists in author order with losing entries removed.
    pub fn surviving_lists(ils: &[InclusionList]) -> Vec<Vec<Transaction>> {
        let winners = conflict_winners(ils);
        let mut sorted: Vec<&InclusionList> = ils.iter().collect();
        sorted.sort_by_key(|il| il.author);
        sorted
            .iter()
            .map(|il| il.full_txs().filter(|t| survives(t, &winners)).cloned().collect())
            .collect()
    }

    fn size(txs: &[&Transaction]) -> u64 {
        txs.iter().map(|t| t.size_bytes).sum()
    }

    /// Largest set closed upwards under the (count desc, id asc) ranking that
    /// fits, found by checking every subset of the distinct transactions.
    pub fn frequency(ils: &[InclusionList], capacity: Option<u64>) -> Vec<TxId> {
        let lists = surviving_lists(ils);
        let mut count: BTreeMap<TxId, (usize, &Transaction)> = BTreeMap::new();
        for tx in lists.iter().flatten() {
            count.entry(tx.id).or_insert((0, tx)).0 += 1;
        }
        let distinct: Vec<(TxId, usize, &Transaction)> = count.iter().map(|(id, (c, t))| (*id, *c, *t)).collect();
        let above = |a: &(TxId, usize, &Transaction), b: &(TxId, usize, &Transaction)| {
            (a.1, std::cmp::Reverse(a.0)) > (b.1, std::cmp::Reverse(b.0))
        };
        let mut best: Vec<usize> = Vec::new();
        for mask in 0u32..(1 << distinct.len()) {
            let members: Vec<usize> = (0..distinct.len()).filter(|i| mask & (1 << i) != 0).collect();
            let closed = members
                .iter()
                .all(|&i| (0..distinct.len()).all(|j| !above(&distinct[j], &distinct[i]) || mask & (1 << j) != 0));
            let txs: Vec<&Transaction> = members.iter().map(|&i| distinct[i].2).collect();
            if closed && capacity.is_none_or(|c| size(&txs) <= c) && members.len() > best.len() {
                best = members;
            }
        }
        best.sort_by(|&a, &b| {
            if above(&distinct[a], &distinct[b]) {
                std::cmp::Ordering::Less
            } else {
                std::cmp::Ordering::Greater
            }
        });
        best.into_iter().map(|i| distinct[i].0).collect()
    }

    /// Union of the first `x` surviving entries of every list for the largest
    /// fitting `x`, in first-appearance order.
    pub fn prefix(ils: &[InclusionList], capacity: Option<u64>) -> Vec<TxId> {
        let lists = surviving_lists(ils);
        let longest = lists.iter().map(Vec::len).max().unwrap_or(0);
        let mut best = Vec::new();
        for x in 0..=longest {
            let mut union: Vec<&Transaction> = Vec::new();
            for list in &lists {
                for tx in list.iter().take(x) {
                    if !union.iter().any(|u| u.id == tx.id) {
                        union.push(tx);
                    }
                }
            }
            if capacity.is_none_or(|c| size(&union) <= c) {
                best = union.iter().map(|t| t.id).collect();
            }
        }
        best
    }
}

/// A random small selection instance: up to 5 lists of up to 6 entries drawn
/// from a pool of 8 transactions with small sizes and few conflict classes.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<InclusionList>, Option<u64>) {
    let pool: Vec<Transaction> = (0..8u64)
        .map(|i| {
            let class = rng.gen_bool(0.4).then(|| rng.gen_range(0..3));
            Transaction::with_id(100 + i, rng.gen_range(1..=4), class)
        })
        .collect();
    let lists = rng.gen_range(1..=5);
    let authors = sample(rng, 7, lists);
    let ils = authors
        .into_iter()
        .map(|a| {
            let len = rng.gen_range(0..=6);
            let entries = sample(rng, pool.len(), len)
                .into_iter()
                .map(|i| Entry::Full(pool[i].clone()))
                .collect();
            InclusionList::new(NodeId(a as u32), 0, entries)
        })
        .collect();
    let capacity = rng.gen_bool(0.8).then(|| rng.gen_range(1..=20));
    (ils, capacity)
}

/// Compares the implementation with the oracle on one instance.
pub fn check_selection_instance(ils: &[InclusionList], capacity: Option<u64>) -> Result<(), String> {
    let refs: Vec<&InclusionList> = ils.iter().collect();
    let resolved = resolve_conflicts(&refs, |_| false);
    let expect_kept = oracle::surviving_lists(ils);
    if resolved.kept != expect_kept {
        return Err(format!(
            "conflict resolution differs: {:?} vs {:?}",
            resolved.kept, expect_kept
        ));
    }
    let ids = |txs: Vec<Transaction>| txs.into_iter().map(|t| t.id).collect::<Vec<_>>();
    let freq = ids(select(&refs, SelectionRule::Frequency, capacity, |_| false));
    let want = oracle::frequency(ils, capacity);
    if freq != want {
        return Err(format!(
            "frequency: {freq:?} vs oracle {want:?} (capacity {capacity:?})"
        ));
    }
    let prefix = ids(select(&refs, SelectionRule::Prefix, capacity, |_| false));
    let want = oracle::prefix(ils, capacity);
    if prefix != want {
        return Err(format!("prefix: {prefix:?} vs oracle {want:?} (capacity {capacity:?})"));
    }
    Ok(())
}

fn tie_breaking(instances: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut conflicts = 0;
    for i in 0..instances {
        let (ils, capacity) = random_instance(&mut rng);
        if !oracle::conflict_winners(&ils).is_empty() {
            conflicts += 1;
        }
        check_selection_instance(&ils, capacity).map_err(|e| format!("instance {i}: {e}"))?;
    }
    Ok(format!("{instances} instances match ({conflicts} with conflicts)"))
}

fn determinism() -> Check {
    let mut failures = Vec::new();
    for v in Variant::ALL {
        let cfg = ScenarioConfig {
            name: format!("determinism/{}", v.name()),
            net: NetConfig {
                seed: 42,
                delta_cap: 2,
                ..NetConfig::with_nf(7, 2)
            },
            protocol: VariantConfig::of(v),
            adversary: AdversaryConfig {
                malicious: [NodeId(2)].into(),
                network_strategy: NetworkStrategy::Random,
                leader_strategy: LeaderStrategy::Equivocate,
                ..AdversaryConfig::default()
            },
            trace: true,
            ..ScenarioConfig::default()
        };
        let once = || -> Result<(String, String), String> {
            let o = run_scenario(&cfg).map_err(|e| e.to_string())?;
            let report = render_json(std::slice::from_ref(&o.report)).map_err(|e| e.to_string())?;
            let trace = serde_json::to_string(&o.log.trace).map_err(|e| e.to_string())?;
            Ok((report, trace))
        };
        let (a, b) = (once()?, once()?);
        ensure(a == b, &mut failures, || format!("{v}: repeated runs differ"));
    }
    let grid = SweepGrid {
        base: ScenarioConfig::default(),
        experiment: Experiment::Metrics,
        variants: Variant::ALL.to_vec(),
        sizes: vec![SizeCell { n: 4, f: 1 }, SizeCell { n: 7, f: 2 }],
        adversaries: Vec::new(),
        seeds: vec![1, 2],
    };
    let table = || {
        sweep(&grid)
            .map_err(|e| e.to_string())
            .and_then(|r| render_json(&r).map_err(|e| e.to_string()))
    };
    ensure(table()? == table()?, &mut failures, || "sweep tables differ".into());
    let verdicts = || tie_breaking(50);
    ensure(verdicts() == verdicts(), &mut failures, || "verdicts differ".into());
    finish(failures, "identical reports, traces, sweep tables and verdicts".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_agrees_with_hand_example() {
        let (a, b, c) = (
            Transaction::with_id(1, 100, None),
            Transaction::with_id(2, 100, None),
            Transaction::with_id(3, 100, None),
        );
        let il = |author: u32, txs: &[&Transaction]| {
            InclusionList::new(
                NodeId(author),
                0,
                txs.iter().map(|t| Entry::Full((*t).clone())).collect(),
            )
        };
        let ils = vec![il(0, &[&a, &b]), il(1, &[&b, &c]), il(2, &[&b, &a])];
        assert_eq!(oracle::frequency(&ils, Some(200)), vec![b.id, a.id]);
        assert_eq!(oracle::prefix(&ils, Some(200)), vec![a.id, b.id]);
        assert!(check_selection_instance(&ils, Some(200)).is_ok());
    }

    #[test]
    fn tie_breaking_small_batch() {
        assert!(tie_breaking(100).is_ok());
    }
}
