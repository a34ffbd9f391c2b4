//! Message/byte accounting and the metric suite computed from a run log.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{Block, Evidence};
use crate::dissemination::DaParams;
use crate::net::MsgKind;
use crate::sim::RunLog;
use crate::types::{Epoch, Round, TxId};
use crate::variants::{Entry, InclusionList, Variant};

/// Accounted sizes in bytes. `cert_bytes = None` derives the certificate size
/// as one hash plus `n_s - f_s` signatures.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SizeModel {
    pub tx_bytes: u64,
    pub hash_bytes: u64,
    pub sig_bytes: u64,
    pub cert_bytes: Option<u64>,
    pub il_entry_overhead_bytes: u64,
    /// Size of one replica id in a lists-used field.
    pub replica_id_bytes: u64,
}

impl Default for SizeModel {
    fn default() -> Self {
        SizeModel {
            tx_bytes: 250,
            hash_bytes: 32,
            sig_bytes: 64,
            cert_bytes: None,
            il_entry_overhead_bytes: 0,
            replica_id_bytes: 4,
        }
    }
}

impl SizeModel {
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        for (key, v) in [
            ("size_model.tx_bytes", self.tx_bytes),
            ("size_model.hash_bytes", self.hash_bytes),
            ("size_model.sig_bytes", self.sig_bytes),
            ("size_model.replica_id_bytes", self.replica_id_bytes),
        ] {
            if v == 0 {
                return Err((key, "must be positive".into()));
            }
        }
        if self.cert_bytes == Some(0) {
            return Err(("size_model.cert_bytes", "must be positive".into()));
        }
        Ok(())
    }

    /// Fills in the derived certificate size.
    pub fn resolved(&self, da: &DaParams) -> SizeModel {
        let cert = self
            .cert_bytes
            .unwrap_or(self.hash_bytes + da.ack_quorum() as u64 * self.sig_bytes);
        SizeModel {
            cert_bytes: Some(cert),
            ..self.clone()
        }
    }

    pub fn cert(&self) -> u64 {
        self.cert_bytes.expect("size model not resolved against DA parameters")
    }

    pub fn entry_bytes(&self, entry: &Entry) -> u64 {
        let body = match entry {
            Entry::Full(tx) => tx.size_bytes,
            Entry::Hash(_) => self.hash_bytes,
            Entry::Cert(_) => self.cert(),
        };
        body + self.il_entry_overhead_bytes
    }

    pub fn il_bytes(&self, il: &InclusionList) -> u64 {
        il.entries.iter().map(|e| self.entry_bytes(e)).sum::<u64>() + self.sig_bytes
    }

    /// `charge_entries = false` when validators re-derive the entries from the
    /// embedded lists, so only the evidence travels.
    pub fn proposal_bytes(&self, block: &Block, charge_entries: bool) -> u64 {
        let evidence = match &block.evidence {
            Evidence::None => 0,
            Evidence::Ils(ils) => ils.iter().map(|il| self.il_bytes(il)).sum(),
            Evidence::ListsUsed(ids) => ids.len() as u64 * self.replica_id_bytes,
        };
        let entries = if charge_entries {
            block
                .entries
                .iter()
                .map(|e| self.entry_bytes(e) - self.il_entry_overhead_bytes)
                .sum()
        } else {
            0
        };
        self.sig_bytes + evidence + entries
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindTotals {
    pub messages: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub per_kind: BTreeMap<MsgKind, KindTotals>,
    pub messages_total: u64,
    pub bytes_total: u64,
}

impl Accounting {
    pub fn record(&mut self, kind: MsgKind, bytes: u64) {
        let slot = self.per_kind.entry(kind).or_default();
        slot.messages += 1;
        slot.bytes += bytes;
        self.messages_total += 1;
        self.bytes_total += bytes;
    }

    pub fn bytes_of(&self, kinds: &[MsgKind]) -> u64 {
        kinds.iter().filter_map(|k| self.per_kind.get(k)).map(|t| t.bytes).sum()
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("run incomplete: {0}")]
    Incomplete(String),
    #[error("scaling fit needs at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("scaling fit needs positive values, got {0}")]
    NonPositive(f64),
    #[error("no reports to tabulate")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Per-scenario metric suite. Round counts are δ-denominated measurements
/// from the run; `epoch_timeout_rounds` is the Δ-denominated bound.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub variant: Option<Variant>,
    pub n: usize,
    pub f: usize,
    pub delta: Round,
    pub delta_cap: Round,
    pub committed_epochs: u64,
    pub committed_txs: u64,
    /// Max over committed transactions: first proposal containing it to its
    /// commit by 2f+1 honest replicas.
    pub proposal_latency_rounds: Option<Round>,
    /// Max over committed transactions of dissemination time (submission to
    /// list eligibility at every honest replica) plus proposal latency.
    pub tx_latency_rounds: Option<Round>,
    pub proposal_period_rounds: Option<f64>,
    /// Max over target transactions; `None` without targets.
    pub max_tx_censorship_rounds: Option<Round>,
    pub max_tx_censorship_epochs: Option<u64>,
    pub messages_total: u64,
    pub bytes_total: u64,
    pub bytes_incremental_vs_plain: Option<i64>,
    pub duplication_factor: Option<f64>,
    pub t_prop: Option<Round>,
    pub t_disp: Option<Round>,
    pub t_ret: Option<Round>,
    pub epoch_timeout_rounds: Round,
    pub honest_timeouts: u64,
    pub agreement_violations: u64,
    pub error: Option<String>,
}

impl MetricsReport {
    pub fn failed(scenario: &str, variant: Option<Variant>, n: usize, f: usize, error: String) -> Self {
        MetricsReport {
            scenario: scenario.to_owned(),
            variant,
            n,
            f,
            error: Some(error),
            ..Default::default()
        }
    }
}

/// Per-transaction timings extracted from a run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TxTiming {
    pub tx: TxId,
    pub submit: Round,
    /// Max over honest replicas of list-eligibility.
    pub eligible_all: Round,
    pub proposal: Round,
    pub commit: Round,
    pub epoch: Epoch,
}

impl TxTiming {
    pub fn latency(&self) -> Round {
        (self.eligible_all - self.submit) + (self.commit - self.proposal)
    }
}

fn eligible_all(log: &RunLog, tx: TxId) -> Option<Round> {
    log.eligible.get(&tx)?.values().copied().max()
}

/// First proposal round of each epoch's decided block.
fn decided_proposal_round(log: &RunLog, epoch: Epoch) -> Option<Round> {
    let block = log.decided.get(&epoch)?;
    log.proposals
        .iter()
        .filter(|p| p.block == *block)
        .map(|p| p.round)
        .min()
}

/// First committed epoch containing each transaction.
pub fn first_inclusion(log: &RunLog) -> BTreeMap<TxId, Epoch> {
    let mut out = BTreeMap::new();
    for (e, block) in log.chain() {
        for id in block.tx_ids() {
            out.entry(id).or_insert(e);
        }
    }
    out
}

pub fn tx_timings(log: &RunLog) -> Vec<TxTiming> {
    first_inclusion(log)
        .into_iter()
        .filter_map(|(tx, epoch)| {
            Some(TxTiming {
                tx,
                submit: log.submissions.get(&tx)?.round,
                eligible_all: eligible_all(log, tx)?,
                proposal: decided_proposal_round(log, epoch)?,
                commit: log.commit_round(epoch)?,
                epoch,
            })
        })
        .collect()
}

/// Last round whose eligible transactions an epoch's content is bound to
/// reflect. Plain proposals are built after the round's deliveries; lists
/// may be built mid-round, so only earlier rounds count for them.
pub fn content_cutoff(log: &RunLog, epoch: Epoch) -> Option<Round> {
    if log.variant == Variant::Plain {
        decided_proposal_round(log, epoch)
    } else {
        log.il_builds.get(&epoch)?.values().copied().min()?.checked_sub(1)
    }
}

/// First committed epoch whose content is bound to reflect the transaction,
/// once it is eligible at every honest replica.
pub fn reference_epoch(log: &RunLog, tx: TxId) -> Option<Epoch> {
    let ready = eligible_all(log, tx)?;
    log.decided
        .keys()
        .copied()
        .find(|e| content_cutoff(log, *e).is_some_and(|c| c >= ready))
}

/// Censorship delay of one transaction: commit of the block that includes it
/// minus commit of its reference epoch. Returns `(rounds, epochs)`.
pub fn censorship_delay(log: &RunLog, tx: TxId) -> Option<(Round, u64)> {
    let reference = reference_epoch(log, tx)?;
    let included = *first_inclusion(log).get(&tx)?;
    if included < reference {
        return Some((0, 0));
    }
    let rounds = log.commit_round(included)? - log.commit_round(reference)?;
    let epochs = log.decided.range(reference..included).count() as u64;
    Some((rounds, epochs))
}

/// Copies of transaction payloads in the committed output per distinct
/// committed transaction. Full payloads inside embedded lists count.
pub fn duplication_factor(log: &RunLog) -> Option<f64> {
    let mut copies = 0u64;
    let mut distinct = BTreeSet::new();
    for (_, block) in log.chain() {
        for entry in &block.entries {
            copies += 1;
            distinct.insert(entry.tx_id());
        }
        if let Evidence::Ils(ils) = &block.evidence {
            copies += ils.iter().map(|il| il.full_txs().count() as u64).sum::<u64>();
        }
    }
    (!distinct.is_empty()).then(|| copies as f64 / distinct.len() as f64)
}

fn proposal_period(log: &RunLog) -> Option<f64> {
    let mut first: BTreeMap<Epoch, Round> = BTreeMap::new();
    for p in &log.proposals {
        let r = first.entry(p.epoch).or_insert(p.round);
        *r = (*r).min(p.round);
    }
    let rounds: Vec<Round> = first.values().copied().collect();
    if rounds.len() < 2 {
        return None;
    }
    let span = rounds[rounds.len() - 1] - rounds[0];
    Some(span as f64 / (rounds.len() - 1) as f64)
}

fn t_prop(log: &RunLog) -> Option<Round> {
    if log.variant != Variant::IlGossip {
        return None;
    }
    log.eligible
        .values()
        .filter(|m| m.len() == log.honest.len())
        .map(|m| m.values().max().unwrap() - m.values().min().unwrap())
        .max()
}

pub fn compute_metrics(
    scenario: &str,
    log: &RunLog,
    epoch_timeout: Round,
    plain_bytes: Option<u64>,
) -> Result<MetricsReport, MetricsError> {
    if log.decided.is_empty() {
        return Err(MetricsError::Incomplete("no epoch committed".into()));
    }
    let timings = tx_timings(log);
    let targets: Vec<TxId> = log
        .submissions
        .iter()
        .filter(|(_, s)| s.target)
        .map(|(id, _)| *id)
        .collect();
    let mut censorship: Option<(Round, u64)> = None;
    for t in &targets {
        let Some(d) = censorship_delay(log, *t) else {
            return Err(MetricsError::Incomplete(format!("target {t} never committed")));
        };
        censorship = Some(censorship.map_or(d, |c| (c.0.max(d.0), c.1.max(d.1))));
    }
    let t_disp = (log.variant == Variant::IlDa)
        .then(|| {
            log.dispersed
                .iter()
                .filter_map(|(id, r)| Some(r - log.submissions.get(id)?.round))
                .max()
        })
        .flatten();
    let t_ret = log.retrievals.iter().filter(|r| r.ok).map(|r| r.end - r.start).max();
    Ok(MetricsReport {
        scenario: scenario.to_owned(),
        variant: Some(log.variant),
        n: log.n,
        f: log.f,
        delta: log.delta,
        delta_cap: log.delta_cap,
        committed_epochs: log.decided.len() as u64,
        committed_txs: first_inclusion(log).len() as u64,
        proposal_latency_rounds: timings.iter().map(|t| t.commit - t.proposal).max(),
        tx_latency_rounds: timings.iter().map(TxTiming::latency).max(),
        proposal_period_rounds: proposal_period(log),
        max_tx_censorship_rounds: censorship.map(|c| c.0),
        max_tx_censorship_epochs: censorship.map(|c| c.1),
        messages_total: log.accounting.messages_total,
        bytes_total: log.accounting.bytes_total,
        bytes_incremental_vs_plain: plain_bytes.map(|b| log.accounting.bytes_total as i64 - b as i64),
        duplication_factor: duplication_factor(log),
        t_prop: t_prop(log),
        t_disp,
        t_ret,
        epoch_timeout_rounds: epoch_timeout,
        honest_timeouts: log.honest_timeouts,
        agreement_violations: log.agreement_violations.len() as u64,
        error: None,
    })
}

/// Least-squares slope of `ln(value)` against `ln(n)`.
pub fn scaling_fit(points: &[(usize, f64)]) -> Result<f64, MetricsError> {
    if points.len() < 2 {
        return Err(MetricsError::TooFewPoints {
            need: 2,
            got: points.len(),
        });
    }
    if let Some((_, v)) = points.iter().find(|(n, v)| *v <= 0.0 || *n == 0) {
        return Err(MetricsError::NonPositive(*v));
    }
    let xs: Vec<f64> = points.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, v)| v.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(sxy / sxx)
}

pub const COLUMNS: [&str; 22] = [
    "scenario",
    "variant",
    "n",
    "f",
    "proposal_latency_rounds",
    "tx_latency_rounds",
    "tx_latency_increment",
    "proposal_period_rounds",
    "max_tx_censorship_rounds",
    "max_tx_censorship_epochs",
    "messages_total",
    "bytes_total",
    "bytes_incremental_vs_plain",
    "duplication_factor",
    "t_prop",
    "t_disp",
    "t_ret",
    "epoch_timeout_rounds",
    "honest_timeouts",
    "agreement_violations",
    "committed_epochs",
    "status",
];

fn sort_key(r: &MetricsReport) -> (usize, usize, usize, String) {
    let v = r
        .variant
        .and_then(|v| Variant::ALL.iter().position(|x| *x == v))
        .unwrap_or(usize::MAX);
    (r.n, r.f, v, r.scenario.clone())
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

fn rows(reports: &[MetricsReport]) -> Vec<Vec<String>> {
    let mut sorted: Vec<&MetricsReport> = reports.iter().collect();
    sorted.sort_by_key(|r| sort_key(r));
    let plain_latency = |r: &MetricsReport| {
        reports
            .iter()
            .find(|p| p.variant == Some(Variant::Plain) && p.n == r.n && p.f == r.f && p.error.is_none())
            .and_then(|p| p.tx_latency_rounds)
    };
    sorted
        .into_iter()
        .map(|r| {
            let increment = match (r.tx_latency_rounds, plain_latency(r)) {
                (Some(a), Some(b)) => format!("{:+}", a as i64 - b as i64),
                _ => String::new(),
            };
            vec![
                r.scenario.clone(),
                r.variant.map(|v| v.name().to_owned()).unwrap_or_default(),
                r.n.to_string(),
                r.f.to_string(),
                opt(&r.proposal_latency_rounds),
                opt(&r.tx_latency_rounds),
                increment,
                r.proposal_period_rounds.map(|p| format!("{p:.2}")).unwrap_or_default(),
                opt(&r.max_tx_censorship_rounds),
                opt(&r.max_tx_censorship_epochs),
                r.messages_total.to_string(),
                r.bytes_total.to_string(),
                opt(&r.bytes_incremental_vs_plain),
                r.duplication_factor.map(|d| format!("{d:.3}")).unwrap_or_default(),
                opt(&r.t_prop),
                opt(&r.t_disp),
                opt(&r.t_ret),
                r.epoch_timeout_rounds.to_string(),
                r.honest_timeouts.to_string(),
                r.agreement_violations.to_string(),
                r.committed_epochs.to_string(),
                match &r.error {
                    None => "ok".to_owned(),
                    Some(e) => format!("failed: {e}"),
                },
            ]
        })
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

pub fn render_csv(reports: &[MetricsReport]) -> String {
    let mut out = COLUMNS.join(",");
    out.push('\n');
    for row in rows(reports) {
        let fields: Vec<String> = row.iter().map(|s| csv_field(s)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn render_markdown(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", COLUMNS.join(" | "));
    let _ = writeln!(out, "|{}|", vec!["---"; COLUMNS.len()].join("|"));
    for row in rows(reports) {
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }
    out
}

/// Reports in table order, as pretty JSON.
pub fn render_json(reports: &[MetricsReport]) -> Result<String, MetricsError> {
    let mut sorted = reports.to_vec();
    sorted.sort_by_key(sort_key);
    Ok(serde_json::to_string_pretty(&sorted)? + "\n")
}

/// Writes `report.csv`, `report.json` and `report.md` into `dir`.
pub fn emit_table(reports: &[MetricsReport], dir: &Path) -> Result<(), MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::Empty);
    }
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.csv"), render_csv(reports))?;
    std::fs::write(dir.join("report.json"), render_json(reports)?)?;
    std::fs::write(dir.join("report.md"), render_markdown(reports))?;
    Ok(())
}
