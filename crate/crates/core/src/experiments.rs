//! Canned experiments: censorship probes, bribery sweeps, latency and
//! communication scaling. Each builds scenarios and reads the metric suite.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;

use serde::{Deserialize, Serialize};

use crate::adversary::{AdversaryConfig, Fallback, LeaderStrategy};
use crate::metrics::{censorship_delay, first_inclusion, reference_epoch, scaling_fit, MetricsError, MetricsReport};
use crate::net::NetConfig;
use crate::scenario::{run_scenario, ConfigError, ScenarioConfig, ScenarioError, SweepGrid, WorkloadConfig};
use crate::sim::{run, RunLog, Submission};
use crate::types::{Epoch, NodeId, Round, TxId};
use crate::variants::{Variant, VariantConfig};

/// Index of the probed transaction in the workload.
const TARGET: usize = 0;

fn leader(epoch: Epoch, n: usize) -> NodeId {
    NodeId((epoch % n as u64) as u32)
}

/// Scenario with a single target transaction submitted to `recipients` once
/// the pipeline is warm, followed by background load.
pub fn target_scenario(variant: Variant, n: usize, f: usize, seed: u64, recipients: Vec<NodeId>) -> ScenarioConfig {
    let mut cfg = ScenarioConfig {
        name: format!("probe/{}/n{n}-f{f}", variant.name()),
        net: NetConfig {
            seed,
            ..NetConfig::with_nf(n, f)
        },
        protocol: VariantConfig::of(variant),
        epochs: 12 + 2 * f as u64,
        compare_plain: false,
        ..ScenarioConfig::default()
    };
    cfg.workload = WorkloadConfig {
        tx_count: 4,
        start_round: 6,
        extra: Vec::new(),
        ..WorkloadConfig::default()
    };
    let target = Submission {
        round: 5,
        client: 0,
        nonce: 1_000_000,
        size_bytes: cfg.size_model.tx_bytes,
        conflict_class: None,
        recipients,
        target: false,
        forged_cert: false,
    };
    let mut subs = vec![target];
    subs.extend(cfg.submissions());
    cfg.workload.tx_count = 0;
    cfg.workload.extra = subs;
    cfg.adversary.targets = [TARGET].into();
    cfg
}

pub fn target_id(cfg: &ScenarioConfig) -> TxId {
    cfg.submissions()[TARGET].tx().id
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CensorshipProbe {
    pub variant: Variant,
    pub n: usize,
    pub f: usize,
    pub malicious: BTreeSet<NodeId>,
    pub reference_epoch: Epoch,
    pub delay_rounds: Round,
    pub delay_epochs: u64,
    pub proposal_period_rounds: Option<f64>,
}

/// Strongest censoring attack in the honest-malicious model: the leaders of
/// the `f` epochs starting at the target's reference epoch are malicious, run
/// the censoring strategy and omit the target from their own lists. The
/// target goes to the malicious replicas first and to the fewest honest ones
/// the variant's client rule allows.
pub fn max_censorship_probe(variant: Variant, n: usize, f: usize, seed: u64) -> Result<CensorshipProbe, ScenarioError> {
    let r = variant.default_recipients(n, f);
    // Dry run: malicious replicas behave honestly until a target is in play,
    // so the honest schedule tells which epochs to corrupt.
    let dry_cfg = target_scenario(variant, n, f, seed, (0..r as u32).map(NodeId).collect());
    let tx = target_id(&dry_cfg);
    let dry = run(dry_cfg.setup())?;
    let first = reference_epoch(&dry, tx)
        .ok_or_else(|| MetricsError::Incomplete(format!("target {tx} never became eligible")))?;
    let malicious: BTreeSet<NodeId> = (first..first + f as u64).map(|e| leader(e, n)).collect();
    let mut recipients: Vec<NodeId> = malicious.iter().copied().collect();
    recipients.extend((0..n as u32).map(NodeId).filter(|id| !malicious.contains(id)));
    recipients.truncate(r);
    recipients.sort();
    let mut cfg = target_scenario(variant, n, f, seed, recipients);
    cfg.adversary = AdversaryConfig {
        malicious: malicious.clone(),
        targets: [TARGET].into(),
        leader_strategy: LeaderStrategy::Censor,
        fallback: Fallback::Silent,
        ..AdversaryConfig::default()
    };
    let outcome = run_scenario(&cfg)?;
    let (delay_rounds, delay_epochs) = censorship_delay(&outcome.log, tx)
        .ok_or_else(|| MetricsError::Incomplete(format!("target {tx} never committed")))?;
    Ok(CensorshipProbe {
        variant,
        n,
        f,
        malicious,
        reference_epoch: first,
        delay_rounds,
        delay_epochs,
        proposal_period_rounds: outcome.report.proposal_period_rounds,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BriberyResult {
    pub variant: Variant,
    pub n: usize,
    pub f: usize,
    pub bribed_epoch: Epoch,
    /// `censored[k]`: whether the leader plus `k` bribed replicas kept the
    /// target out of the bribed epoch's block.
    pub censored: Vec<bool>,
    /// Smallest `k` that censors, if any.
    pub threshold: Option<usize>,
}

/// Bribes the leader of the target's reference epoch plus `k` non-leaders
/// (lowest ids first) for every `k`, and records whether the bribed epoch's
/// committed block lacks the target. The client sends the target to every
/// replica so that the threshold depends only on the bribed set.
pub fn bribery_sweep(variant: Variant, n: usize, f: usize, seed: u64) -> Result<BriberyResult, ScenarioError> {
    let all: Vec<NodeId> = (0..n as u32).map(NodeId).collect();
    let base = target_scenario(variant, n, f, seed, all);
    let tx = target_id(&base);
    let dry = run_scenario(&base)?;
    let epoch = reference_epoch(&dry.log, tx)
        .ok_or_else(|| MetricsError::Incomplete(format!("target {tx} never became eligible")))?;
    let lead = leader(epoch, n);
    let others: Vec<NodeId> = (0..n as u32).map(NodeId).filter(|id| *id != lead).collect();
    let mut censored = Vec::with_capacity(n);
    for k in 0..n {
        let mut cfg = base.clone();
        cfg.name = format!("bribery/{}/n{n}-f{f}/k{k}", variant.name());
        cfg.adversary = AdversaryConfig {
            bribed: std::iter::once(lead).chain(others[..k].iter().copied()).collect(),
            targets: [TARGET].into(),
            fallback: Fallback::Honest,
            ..AdversaryConfig::default()
        };
        // With enough bribes the target may never commit, so skip the report.
        let log = run(cfg.setup())?;
        let block = log
            .decided
            .get(&epoch)
            .and_then(|r| log.blocks.get(r))
            .ok_or_else(|| MetricsError::Incomplete(format!("bribed epoch {epoch} not committed (k={k})")))?;
        censored.push(!block.tx_ids().any(|id| id == tx));
    }
    if let Some(k) = censored.windows(2).position(|w| w[0] && !w[1]) {
        panic!("censorship not monotone in bribes: k={k} censors but k+1 does not");
    }
    Ok(BriberyResult {
        variant,
        n,
        f,
        bribed_epoch: epoch,
        threshold: censored.iter().position(|c| *c),
        censored,
    })
}

/// Expected minimal number of bribed non-leaders.
pub fn expected_bribes(variant: Variant, f: usize) -> usize {
    match variant {
        Variant::Plain => 0,
        Variant::IlLocal => f,
        _ => 2 * f,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyProbe {
    pub variant: Variant,
    pub plain: MetricsReport,
    pub report: MetricsReport,
    /// Transaction latency minus the plain host's, same workload and seed.
    pub increment: i64,
}

fn latency_scenario(variant: Variant, n: usize, f: usize, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        name: format!("latency/{}/n{n}-f{f}", variant.name()),
        net: NetConfig {
            seed,
            ..NetConfig::with_nf(n, f)
        },
        protocol: VariantConfig::of(variant),
        workload: WorkloadConfig {
            tx_count: 2 * n,
            start_round: 2,
            ..WorkloadConfig::default()
        },
        epochs: 10,
        ..ScenarioConfig::default()
    }
}

/// Honest run of `variant` and of the plain host on the same workload.
pub fn latency_probe(variant: Variant, n: usize, f: usize, seed: u64) -> Result<LatencyProbe, ScenarioError> {
    let cfg = latency_scenario(variant, n, f, seed);
    let mut plain_cfg = cfg.clone();
    plain_cfg.protocol = VariantConfig::of(Variant::Plain);
    plain_cfg.workload.extra = cfg.submissions();
    plain_cfg.workload.tx_count = 0;
    let report = run_scenario(&cfg)?.report;
    let plain = run_scenario(&plain_cfg)?.report;
    let latency = |r: &MetricsReport| {
        r.tx_latency_rounds
            .ok_or_else(|| MetricsError::Incomplete(format!("{}: nothing committed", r.scenario)))
    };
    let increment = latency(&report)? as i64 - latency(&plain)? as i64;
    Ok(LatencyProbe {
        variant,
        plain,
        report,
        increment,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingResult {
    pub variant: Variant,
    /// `(n, incremental bytes over plain)`.
    pub points: Vec<(usize, f64)>,
    pub slope: f64,
}

pub const SCALING_SIZES: [usize; 4] = [4, 7, 13, 25];

/// Incremental bytes over plain with a fixed number of transactions per
/// replica, fitted in log-log space.
pub fn scaling_probe(
    variant: Variant,
    sizes: &[usize],
    txs_per_replica: usize,
    seed: u64,
) -> Result<ScalingResult, ScenarioError> {
    let mut points = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let f = (n - 1) / 3;
        let cfg = ScenarioConfig {
            name: format!("scaling/{}/n{n}", variant.name()),
            net: NetConfig {
                seed,
                ..NetConfig::with_nf(n, f)
            },
            protocol: VariantConfig::of(variant),
            workload: WorkloadConfig {
                txs_per_replica: Some(txs_per_replica),
                start_round: 1,
                batch: usize::MAX,
                ..WorkloadConfig::default()
            },
            epochs: 2,
            ..ScenarioConfig::default()
        };
        let report = run_scenario(&cfg)?.report;
        let extra = report
            .bytes_incremental_vs_plain
            .ok_or_else(|| MetricsError::Incomplete("no plain baseline".into()))?;
        points.push((n, extra as f64));
    }
    let slope = scaling_fit(&points)?;
    Ok(ScalingResult { variant, points, slope })
}

/// Transactions included more than once across the committed chain.
pub fn repeated_inclusions(log: &RunLog) -> usize {
    let first = first_inclusion(log);
    let mut seen = 0usize;
    for (_, block) in log.chain() {
        seen += block.tx_ids().count();
    }
    seen - first.len()
}

/// One row of a bribery grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BriberyRow {
    pub scenario: String,
    pub variant: Variant,
    pub n: usize,
    pub f: usize,
    pub seed: u64,
    /// Bribed non-leaders needed on top of the leader.
    pub threshold: Option<usize>,
    pub expected: usize,
    pub error: Option<String>,
}

pub const BRIBERY_COLUMNS: [&str; 8] = [
    "scenario",
    "variant",
    "n",
    "f",
    "seed",
    "threshold",
    "expected",
    "error",
];

/// Runs `bribery_sweep` for every variant, size and seed of the grid; the
/// grid's adversaries are ignored since the sweep chooses the bribed set.
pub fn bribery_grid(grid: &SweepGrid) -> Result<Vec<BriberyRow>, ConfigError> {
    grid.check()?;
    let seeds = if grid.seeds.is_empty() {
        vec![grid.base.net.seed]
    } else {
        grid.seeds.clone()
    };
    let mut cells = Vec::new();
    for v in &grid.variants {
        for size in &grid.sizes {
            for seed in &seeds {
                cells.push((*v, size.n, size.f, *seed));
            }
        }
    }
    Ok(cells
        .par_iter()
        .map(|&(variant, n, f, seed)| {
            let outcome = std::panic::catch_unwind(|| bribery_sweep(variant, n, f, seed));
            let (threshold, error) = match outcome {
                Ok(Ok(r)) => (r.threshold, None),
                Ok(Err(e)) => (None, Some(e.to_string())),
                Err(_) => (None, Some("bribery sweep panicked".to_owned())),
            };
            BriberyRow {
                scenario: format!("bribery/{}/n{n}-f{f}/s{seed}", variant.name()),
                variant,
                n,
                f,
                seed,
                threshold,
                expected: expected_bribes(variant, f),
                error,
            }
        })
        .collect())
}

fn bribery_fields(row: &BriberyRow) -> [String; 8] {
    [
        row.scenario.clone(),
        row.variant.name().to_owned(),
        row.n.to_string(),
        row.f.to_string(),
        row.seed.to_string(),
        row.threshold.map_or_else(|| "-".to_owned(), |k| format!("leader+{k}")),
        format!("leader+{}", row.expected),
        row.error.clone().unwrap_or_default(),
    ]
}

pub fn render_bribery_csv(rows: &[BriberyRow]) -> String {
    let mut out = BRIBERY_COLUMNS.join(",") + "\n";
    for row in rows {
        let fields = bribery_fields(row).map(|s| if s.contains(',') { format!("\"{s}\"") } else { s });
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn render_bribery_markdown(rows: &[BriberyRow]) -> String {
    let mut out = format!(
        "| {} |\n|{}|\n",
        BRIBERY_COLUMNS.join(" | "),
        vec!["---"; BRIBERY_COLUMNS.len()].join("|")
    );
    for row in rows {
        out.push_str(&format!("| {} |\n", bribery_fields(row).join(" | ")));
    }
    out
}

/// Writes `bribery.csv`, `bribery.json` and `bribery.md` into `dir`.
pub fn emit_bribery_table(rows: &[BriberyRow], dir: &Path) -> Result<(), MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::Empty);
    }
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("bribery.csv"), render_bribery_csv(rows))?;
    std::fs::write(dir.join("bribery.json"), serde_json::to_string_pretty(rows)? + "\n")?;
    std::fs::write(dir.join("bribery.md"), render_bribery_markdown(rows))?;
    Ok(())
}
