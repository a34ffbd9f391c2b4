use std::collections::BTreeSet;

use il_lab::adversary::{AdversaryConfig, LeaderStrategy};
use il_lab::consensus::leader_of;
use il_lab::experiments::{bribery_grid, bribery_sweep, max_censorship_probe, render_bribery_csv};
use il_lab::metrics::{emit_table, render_csv, MetricsError};
use il_lab::net::{MsgKind, NetConfig};
use il_lab::scenario::{
    run_scenario, sweep, write_outputs, Experiment, NamedAdversary, ScenarioConfig, ScenarioError, SizeCell, SweepGrid,
};
use il_lab::sim::{run, SimError};
use il_lab::types::NodeId;
use il_lab::variants::{Variant, VariantConfig};

fn scenario(v: Variant, n: usize, f: usize) -> ScenarioConfig {
    ScenarioConfig {
        name: format!("it/{v}"),
        net: NetConfig::with_nf(n, f),
        protocol: VariantConfig::of(v),
        ..ScenarioConfig::default()
    }
}

fn grid(variants: &[Variant], sizes: &[(usize, usize)]) -> SweepGrid {
    SweepGrid {
        base: ScenarioConfig::default(),
        experiment: Experiment::Metrics,
        variants: variants.to_vec(),
        sizes: sizes.iter().map(|&(n, f)| SizeCell { n, f }).collect(),
        adversaries: Vec::new(),
        seeds: Vec::new(),
    }
}

#[test]
fn rotation_gives_f_plus_one_honest_leaders_within_4f_epochs() {
    for (n, f) in [(4usize, 1usize), (7, 2)] {
        // Every choice of f faulty replicas.
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != f {
                continue;
            }
            let honest: BTreeSet<NodeId> = (0..4 * f as u64)
                .map(|e| leader_of(e, n))
                .filter(|l| mask & (1 << l.0) == 0)
                .collect();
            assert!(honest.len() > f, "n={n} mask={mask:b}");
        }
    }
    assert_eq!(leader_of(0, 4), NodeId(0));
    assert_eq!(leader_of(5, 4), NodeId(1));
}

#[test]
fn epoch_zero_lists_reach_the_leader() {
    let mut cfg = scenario(Variant::IlBase, 4, 1);
    cfg.trace = true;
    let log = run(cfg.setup()).unwrap();
    let trace = log.trace.unwrap();
    let to_leader: BTreeSet<NodeId> = trace
        .iter()
        .filter(|e| e.kind == MsgKind::InclusionList && e.send_round == 0 && e.recipient == NodeId(0))
        .map(|e| e.sender)
        .collect();
    assert_eq!(to_leader, [NodeId(1), NodeId(2), NodeId(3)].into());
    assert!(
        log.il_builds[&0].contains_key(&NodeId(0)),
        "the leader builds its own list"
    );

    let mut plain = scenario(Variant::Plain, 4, 1);
    plain.trace = true;
    let trace = run(plain.setup()).unwrap().trace.unwrap();
    assert!(trace.iter().all(|e| e.kind != MsgKind::InclusionList));
}

#[test]
fn honest_plain_commits_three_rounds_after_proposal() {
    let report = run_scenario(&scenario(Variant::Plain, 4, 1)).unwrap().report;
    assert_eq!(report.proposal_latency_rounds, Some(3));
    assert_eq!(report.honest_timeouts, 0);
}

#[test]
fn base_list_variant_adds_no_proposal_latency() {
    let plain = run_scenario(&scenario(Variant::Plain, 4, 1)).unwrap().report;
    let base = run_scenario(&scenario(Variant::IlBase, 4, 1)).unwrap().report;
    assert_eq!(base.proposal_latency_rounds, plain.proposal_latency_rounds);
}

#[test]
fn silent_leaders_skip_their_epochs() {
    for (n, f) in [(4, 1), (7, 2)] {
        let mut cfg = scenario(Variant::Plain, n, f);
        cfg.workload.start_round = 0;
        cfg.adversary = AdversaryConfig {
            malicious: (0..f as u32).map(NodeId).collect(),
            leader_strategy: LeaderStrategy::Silent,
            ..AdversaryConfig::default()
        };
        let log = run(cfg.setup()).unwrap();
        assert_eq!(log.decided.keys().next(), Some(&(f as u64)), "n={n}");
    }
}

#[test]
fn bribery_thresholds_at_n4() {
    let base = bribery_sweep(Variant::IlBase, 4, 1, 1).unwrap();
    assert_eq!(base.threshold, Some(2));
    let local = bribery_sweep(Variant::IlLocal, 4, 1, 1).unwrap();
    assert_eq!(local.threshold, Some(1));
    for v in Variant::IL {
        let r = bribery_sweep(v, 4, 1, 2).unwrap();
        assert!(!r.censored[0], "{v}: the leader alone cannot censor");
    }
    assert_eq!(bribery_sweep(Variant::Plain, 4, 1, 1).unwrap().threshold, Some(0));
}

#[test]
fn censorship_probe_bounds() {
    let plain = max_censorship_probe(Variant::Plain, 4, 1, 1).unwrap();
    assert_eq!(plain.delay_epochs, 1);
    for v in Variant::ALL {
        let p = max_censorship_probe(v, 4, 0, 1).unwrap();
        assert_eq!((p.delay_epochs, p.delay_rounds), (0, 0), "{v} with f=0");
    }
}

#[test]
fn invalid_size_is_reported_by_key() {
    let err = scenario(Variant::Plain, 4, 2).validate().unwrap_err();
    assert_eq!(err.key, "net.n");
    assert!(err.to_string().contains("n ≥ 3f+1 violated"), "{err}");
    let err = ScenarioConfig::from_json(r#"{"net": {"n": 4, "f": 1, "nn": 3}}"#).unwrap_err();
    assert!(err.to_string().contains("nn"), "{err}");
}

#[test]
fn round_cap_returns_partial_log() {
    let mut cfg = scenario(Variant::IlRbc, 4, 1);
    cfg.max_rounds = 3;
    cfg.trace = true;
    match run_scenario(&cfg) {
        Err(ScenarioError::Sim(SimError::Timeout { round, partial, .. })) => {
            assert_eq!(round, 3);
            assert!(!partial.trace.unwrap().is_empty());
        }
        other => panic!("expected a timeout, got {:?}", other.map(|o| o.report)),
    }
}

#[test]
fn repeated_runs_write_identical_files() {
    let mut cfg = scenario(Variant::IlGossip, 7, 2);
    cfg.trace = true;
    cfg.adversary.network_strategy = il_lab::adversary::NetworkStrategy::Random;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        write_outputs(&run_scenario(&cfg).unwrap(), dir.path()).unwrap();
    }
    for file in ["report.csv", "report.json", "report.md", "trace.jsonl"] {
        let a = std::fs::read(dirs[0].path().join(file)).unwrap();
        let b = std::fs::read(dirs[1].path().join(file)).unwrap();
        assert!(!a.is_empty(), "{file}");
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn tables_have_one_row_per_report() {
    let one = run_scenario(&scenario(Variant::Plain, 4, 1)).unwrap().report;
    assert_eq!(render_csv(&[one]).lines().count(), 2);

    let reports = sweep(&grid(&Variant::ALL, &[(4, 1), (7, 2)])).unwrap();
    assert_eq!(reports.len(), 12);
    assert!(reports.iter().all(|r| r.error.is_none()));
    for r in &reports {
        let inc = r.bytes_incremental_vs_plain.unwrap();
        if r.variant == Some(Variant::Plain) {
            assert_eq!(inc, 0);
        } else {
            assert!(inc > 0, "{}: {inc}", r.scenario);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    emit_table(&reports, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    assert!(matches!(emit_table(&[], dir.path()), Err(MetricsError::Empty)));
}

#[test]
fn failing_cells_do_not_sink_the_sweep() {
    let mut g = grid(&[Variant::IlBase], &[(4, 1)]);
    g.adversaries = vec![
        NamedAdversary {
            name: "ok".into(),
            adversary: AdversaryConfig::default(),
        },
        NamedAdversary {
            name: "too-many".into(),
            adversary: AdversaryConfig {
                malicious: [NodeId(0), NodeId(1)].into(),
                ..AdversaryConfig::default()
            },
        },
    ];
    let reports = sweep(&g).unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports[0].error.is_none());
    assert!(reports[1].error.as_deref().unwrap().contains("adversary.malicious"));
}

#[test]
fn empty_grids_are_rejected() {
    assert_eq!(sweep(&grid(&[], &[(4, 1)])).unwrap_err().key, "variants");
    assert_eq!(sweep(&grid(&[Variant::Plain], &[])).unwrap_err().key, "sizes");
}

#[test]
fn bribery_grid_reports_thresholds() {
    let mut g = grid(&Variant::IL, &[(4, 1)]);
    g.experiment = Experiment::Bribery;
    let rows = bribery_grid(&g).unwrap();
    assert_eq!(rows.len(), 5);
    for row in &rows {
        assert_eq!(row.threshold, Some(row.expected), "{}", row.scenario);
    }
    let csv = render_bribery_csv(&rows);
    assert!(csv.contains("il-local,4,1,0,leader+1,leader+1"), "{csv}");
}
