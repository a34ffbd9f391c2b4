//! Scenario configuration, single runs and parameter sweeps.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::AdversaryConfig;
use crate::dissemination::{DaParams, GossipConfig};
use crate::metrics::{compute_metrics, emit_table, MetricsError, MetricsReport, SizeModel};
use crate::net::NetConfig;
use crate::sim::{default_epoch_timeout, run, RunLog, SimError, SimSetup, Submission};
use crate::types::{NodeId, Round};
use crate::variants::{Variant, VariantConfig};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid `{key}`: {reason}")]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(key: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaConfig {
    /// Storage nodes; defaults to n.
    pub n_s: Option<usize>,
    /// Storage fault bound; defaults to f.
    pub f_s: Option<usize>,
}

/// Generated client load. Transaction `i` goes to `recipients` consecutive
/// replicas starting at `i * recipients mod n`, so load spreads round-robin.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    pub tx_count: usize,
    /// Overrides `tx_count` with `ceil(txs_per_replica * n / recipients)`, so
    /// each replica receives about this many transactions.
    pub txs_per_replica: Option<usize>,
    /// Defaults to `size_model.tx_bytes`.
    pub tx_size: Option<u64>,
    pub start_round: Round,
    /// Rounds between consecutive batches.
    pub interval: Round,
    /// Transactions per batch.
    pub batch: usize,
    /// Replicas each transaction is sent to; defaults to the variant's rule.
    pub recipients: Option<usize>,
    /// Transaction `i` gets conflict class `i mod k`.
    pub conflict_classes: Option<u64>,
    pub clients: u32,
    /// Hand-written submissions, appended after the generated ones.
    pub extra: Vec<Submission>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            tx_count: 8,
            txs_per_replica: None,
            tx_size: None,
            start_round: 1,
            interval: 1,
            batch: 1,
            recipients: None,
            conflict_classes: None,
            clients: 1,
            extra: Vec::new(),
        }
    }
}

fn default_name() -> String {
    "scenario".into()
}

fn default_epochs() -> u64 {
    8
}

fn default_max_rounds() -> Round {
    10_000
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub protocol: VariantConfig,
    #[serde(default)]
    pub gossip: GossipConfig,
    #[serde(default)]
    pub da: DaConfig,
    #[serde(default)]
    pub adversary: AdversaryConfig,
    #[serde(default)]
    pub workload: WorkloadConfig,
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    #[serde(default)]
    pub size_model: SizeModel,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: Round,
    /// Defaults to the variant's bound (see `default_epoch_timeout`).
    #[serde(default)]
    pub epoch_timeout: Option<Round>,
    #[serde(default)]
    pub trace: bool,
    /// Also run the plain host on the same workload to report incremental bytes.
    #[serde(default = "default_true")]
    pub compare_plain: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| ConfigError::new(key_of(&e), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn variant(&self) -> Variant {
        self.protocol.variant
    }

    pub fn da_params(&self) -> DaParams {
        DaParams {
            n_s: self.da.n_s.unwrap_or(self.net.n),
            f_s: self.da.f_s.unwrap_or(self.net.f),
            first_storage: self.net.n as u32 + 1,
        }
    }

    pub fn recipients(&self) -> usize {
        self.workload
            .recipients
            .unwrap_or_else(|| self.variant().default_recipients(self.net.n, self.net.f))
    }

    pub fn tx_count(&self) -> usize {
        match self.workload.txs_per_replica {
            Some(w) => (w * self.net.n).div_ceil(self.recipients()),
            None => self.workload.tx_count,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.net.validate().map_err(|e| match e {
            crate::net::NetError::Config { key, reason } => ConfigError::new(key, reason),
            other => ConfigError::new("net", other.to_string()),
        })?;
        let (n, f) = (self.net.n, self.net.f);
        self.adversary.validate(n, f).map_err(|(k, r)| ConfigError::new(k, r))?;
        self.size_model.validate().map_err(|(k, r)| ConfigError::new(k, r))?;
        if self.variant() == Variant::IlGossip {
            self.gossip
                .validate(n)
                .map_err(|r| ConfigError::new("gossip.fanout", r))?;
            if self.gossip.anti_entropy_period == 0 {
                return Err(ConfigError::new("gossip.anti_entropy_period", "must be positive"));
            }
        }
        let da = self.da_params();
        if da.n_s == 0 || da.n_s < 3 * da.f_s + 1 {
            return Err(ConfigError::new(
                "da.n_s",
                format!("need n_s ≥ 3f_s+1 (n_s={}, f_s={})", da.n_s, da.f_s),
            ));
        }
        let r = self.recipients();
        if r == 0 || r > n {
            return Err(ConfigError::new(
                "workload.recipients",
                format!("must lie in [1, n] (got {r})"),
            ));
        }
        if self.workload.batch == 0 {
            return Err(ConfigError::new("workload.batch", "must be positive"));
        }
        if self.workload.clients == 0 {
            return Err(ConfigError::new("workload.clients", "must be positive"));
        }
        if self.workload.conflict_classes == Some(0) {
            return Err(ConfigError::new("workload.conflict_classes", "must be positive"));
        }
        for s in &self.workload.extra {
            if let Some(bad) = s.recipients.iter().find(|id| id.index() >= n) {
                return Err(ConfigError::new(
                    "workload.extra",
                    format!("recipient {bad} is not a replica"),
                ));
            }
        }
        let total = self.tx_count() + self.workload.extra.len();
        if let Some(t) = self.adversary.targets.iter().find(|t| **t >= total) {
            return Err(ConfigError::new(
                "adversary.targets",
                format!("index {t} out of range ({total} submissions)"),
            ));
        }
        if self.epochs == 0 {
            return Err(ConfigError::new("epochs", "must be positive"));
        }
        if self.epoch_timeout == Some(0) {
            return Err(ConfigError::new("epoch_timeout", "must be positive"));
        }
        Ok(())
    }

    pub fn submissions(&self) -> Vec<Submission> {
        let n = self.net.n;
        let r = self.recipients();
        let w = &self.workload;
        let size = w.tx_size.unwrap_or(self.size_model.tx_bytes);
        let mut out: Vec<Submission> = (0..self.tx_count())
            .map(|i| Submission {
                round: w.start_round + (i / w.batch) as Round * w.interval,
                client: i as u32 % w.clients,
                nonce: i as u64,
                size_bytes: size,
                conflict_class: w.conflict_classes.map(|k| i as u64 % k),
                recipients: (0..r).map(|j| NodeId(((i * r + j) % n) as u32)).collect(),
                target: false,
                forged_cert: false,
            })
            .collect();
        out.extend(w.extra.iter().cloned());
        for t in &self.adversary.targets {
            out[*t].target = true;
        }
        out
    }

    pub fn epoch_timeout(&self) -> Round {
        self.epoch_timeout
            .unwrap_or_else(|| default_epoch_timeout(self.variant(), self.net.n, self.net.delta_cap, &self.gossip))
    }

    pub fn setup(&self) -> SimSetup {
        self.setup_with(self.submissions())
    }

    fn setup_with(&self, submissions: Vec<Submission>) -> SimSetup {
        SimSetup {
            net: self.net.clone(),
            variant: self.protocol.clone(),
            gossip: self.gossip.clone(),
            da: self.da_params(),
            adversary: self.adversary.clone(),
            sizes: self.size_model.clone(),
            epochs: self.epochs,
            max_rounds: self.max_rounds,
            epoch_timeout: self.epoch_timeout(),
            record_trace: self.trace,
            submissions,
        }
    }
}

/// Best-effort extraction of the offending key from a serde error.
fn key_of(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    for marker in ["unknown field `", "missing field `", "unknown variant `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            if let Some(key) = rest.split('`').next() {
                return key.to_owned();
            }
        }
    }
    "config".into()
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub struct Outcome {
    pub report: MetricsReport,
    pub log: RunLog,
}

/// Runs one scenario; with `compare_plain`, the plain host runs on the very
/// same submissions to obtain the byte baseline.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Outcome, ScenarioError> {
    cfg.validate()?;
    let submissions = cfg.submissions();
    let log = run(cfg.setup_with(submissions.clone()))?;
    let plain_bytes = if !cfg.compare_plain {
        None
    } else if cfg.variant() == Variant::Plain {
        Some(log.accounting.bytes_total)
    } else {
        let mut plain = cfg.clone();
        plain.protocol.variant = Variant::Plain;
        plain.trace = false;
        Some(run(plain.setup_with(submissions))?.accounting.bytes_total)
    };
    let report = compute_metrics(&cfg.name, &log, cfg.epoch_timeout(), plain_bytes)?;
    Ok(Outcome { report, log })
}

/// Writes the report files and, if recorded, `trace.jsonl`.
pub fn write_outputs(outcome: &Outcome, dir: &Path) -> Result<(), ScenarioError> {
    emit_table(std::slice::from_ref(&outcome.report), dir)?;
    if let Some(trace) = &outcome.log.trace {
        write_trace(trace, &dir.join("trace.jsonl"))?;
    }
    Ok(())
}

pub fn write_trace(trace: &[crate::net::EnvelopeMeta], path: &Path) -> Result<(), ScenarioError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for meta in trace {
        serde_json::to_writer(&mut file, meta).map_err(MetricsError::from)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeCell {
    pub n: usize,
    pub f: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedAdversary {
    pub name: String,
    pub adversary: AdversaryConfig,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    #[default]
    Metrics,
    Bribery,
}

/// Cartesian grid over variants, system sizes, adversaries and seeds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub base: ScenarioConfig,
    #[serde(default)]
    pub experiment: Experiment,
    pub variants: Vec<Variant>,
    pub sizes: Vec<SizeCell>,
    /// Empty means a single honest cell.
    #[serde(default)]
    pub adversaries: Vec<NamedAdversary>,
    /// Empty means the base seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl SweepGrid {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let grid: SweepGrid = serde_json::from_str(text).map_err(|e| ConfigError::new(key_of(&e), e.to_string()))?;
        grid.check()?;
        Ok(grid)
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        if self.variants.is_empty() {
            return Err(ConfigError::new("variants", "grid is empty"));
        }
        if self.sizes.is_empty() {
            return Err(ConfigError::new("sizes", "grid is empty"));
        }
        let names: BTreeSet<&str> = self.adversaries.iter().map(|a| a.name.as_str()).collect();
        if names.len() != self.adversaries.len() {
            return Err(ConfigError::new("adversaries", "names must be unique"));
        }
        Ok(())
    }

    /// Cell configs in deterministic order, named `adversary/variant/nN-fF/sSEED`.
    pub fn cells(&self) -> Vec<ScenarioConfig> {
        let honest = [NamedAdversary {
            name: "honest".into(),
            adversary: self.base.adversary.clone(),
        }];
        let adversaries: &[NamedAdversary] = if self.adversaries.is_empty() {
            &honest
        } else {
            &self.adversaries
        };
        let seeds = if self.seeds.is_empty() {
            vec![self.base.net.seed]
        } else {
            self.seeds.clone()
        };
        let mut out = Vec::new();
        for adv in adversaries {
            for v in &self.variants {
                for size in &self.sizes {
                    for seed in &seeds {
                        let mut cfg = self.base.clone();
                        cfg.name = format!("{}/{}/n{}-f{}/s{}", adv.name, v.name(), size.n, size.f, seed);
                        cfg.protocol.variant = *v;
                        cfg.net.n = size.n;
                        cfg.net.f = size.f;
                        cfg.net.seed = *seed;
                        cfg.adversary = adv.adversary.clone();
                        cfg.trace = false;
                        out.push(cfg);
                    }
                }
            }
        }
        out
    }
}

/// Runs every cell in parallel; failed cells become `failed` rows. Output
/// order is the cell order, independent of scheduling.
pub fn sweep(grid: &SweepGrid) -> Result<Vec<MetricsReport>, ConfigError> {
    grid.check()?;
    let cells = grid.cells();
    Ok(cells
        .par_iter()
        .map(|cfg| match run_scenario(cfg) {
            Ok(o) => o.report,
            Err(e) => MetricsReport::failed(&cfg.name, Some(cfg.variant()), cfg.net.n, cfg.net.f, e.to_string()),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_defaults() {
        let cfg = ScenarioConfig::default();
        assert_eq!(cfg.net.n, 4);
        let back = ScenarioConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn diagnostics_name_the_key() {
        let err = ScenarioConfig::from_json(r#"{"net": {"n": 4, "f": 2}}"#).unwrap_err();
        assert_eq!(err.key, "net.n");
        assert!(err.reason.contains("n ≥ 3f+1 violated"));
        let err = ScenarioConfig::from_json(r#"{"net": {"nn": 4}}"#).unwrap_err();
        assert_eq!(err.key, "nn");
        let err = ScenarioConfig::from_json(r#"{"protocol": {"variant": "il-foo"}}"#).unwrap_err();
        assert_eq!(err.key, "il-foo");
        let err = ScenarioConfig::from_json(r#"{"adversary": {"bribed": [7]}}"#).unwrap_err();
        assert_eq!(err.key, "adversary.bribed");
    }

    #[test]
    fn round_robin_recipients() {
        let cfg = ScenarioConfig::from_json(
            r#"{"net": {"n": 7, "f": 2}, "protocol": {"variant": "il-base"}, "workload": {"txs_per_replica": 3}}"#,
        )
        .unwrap();
        let subs = cfg.submissions();
        assert_eq!(subs.len(), 5); // ceil(3*7/5)
        let mut load = [0usize; 7];
        for s in &subs {
            assert_eq!(s.recipients.len(), 5);
            for r in &s.recipients {
                load[r.index()] += 1;
            }
        }
        assert!(load.iter().all(|l| (3..=4).contains(l)), "{load:?}");
    }

    #[test]
    fn empty_grid_rejected() {
        let grid = SweepGrid {
            base: ScenarioConfig::default(),
            experiment: Experiment::Metrics,
            variants: vec![],
            sizes: vec![SizeCell { n: 4, f: 1 }],
            adversaries: vec![],
            seeds: vec![],
        };
        assert_eq!(sweep(&grid).unwrap_err().key, "variants");
    }
}
