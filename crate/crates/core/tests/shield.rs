mod common;

use adaptive_shield::abstraction::CutoffFunction;
use adaptive_shield::config::{scenario_1, ArrivalConfig, ExperimentConfig, NetworkConfig, ScenarioSource};
use adaptive_shield::harness::{run, TraceRow};
use adaptive_shield::shield::EventKind;
use adaptive_shield::traffic::{ArrivalKind, TemplateKind};

fn quick(steps: u64) -> ExperimentConfig {
    ExperimentConfig {
        steps: Some(steps),
        warmup: 200,
        period: 100,
        seed: Some(21),
        ..ExperimentConfig::default()
    }
}

fn cutoff_of(row: &TraceRow) -> Vec<u32> {
    row.k.split(';').map(|x| x.parse().unwrap()).collect()
}

/// Cut-offs never shrink, and right after a rebuild every state of the
/// preceding window is below the new cut-off.
fn check_refinement(rows: &[TraceRow], period: u64) {
    let nodes = rows.iter().map(|r| r.node).max().unwrap() + 1;
    for n in 0..nodes {
        let mine: Vec<&TraceRow> = rows.iter().filter(|r| r.node == n).collect();
        for w in mine.windows(2) {
            let (a, b) = (cutoff_of(w[0]), cutoff_of(w[1]));
            assert!(
                a.iter().zip(&b).all(|(x, y)| x <= y),
                "step {}: {a:?} -> {b:?}",
                w[1].step
            );
        }
        for (i, r) in mine.iter().enumerate() {
            if r.step == 0 || !r.has_event(EventKind::Rebuild) {
                continue;
            }
            let k = cutoff_of(r);
            for prev in &mine[i.saturating_sub(period as usize - 1)..=i] {
                let q = [prev.q0, prev.q1, prev.q2, prev.q3];
                assert!(
                    q.iter().zip(&k).all(|(v, c)| v <= c),
                    "step {}: {q:?} above {k:?}",
                    r.step
                );
            }
        }
    }
}

#[test]
fn refinement_contract_holds_over_a_run() {
    let report = run(&quick(900)).unwrap();
    check_refinement(&report.rows, 100);
    assert!(report.summary.stats.rebuilds >= 7);
    let first = &report.cutoffs[0];
    assert_eq!(first.step, 0);
    assert_eq!(first.cutoffs[0], CutoffFunction::uniform(4, 3).unwrap());
}

#[test]
fn zero_gamma_never_interferes() {
    let cfg = ExperimentConfig {
        gamma: Some(0.0),
        ..quick(900)
    };
    let report = run(&cfg).unwrap();
    assert_eq!(report.summary.stats.interference_events, 0);
    assert!(report.summary.stats.rebuilds > 1);
}

#[test]
fn failed_rebuild_keeps_previous_shield() {
    let cfg = ExperimentConfig {
        max_transitions: 300_000,
        ..quick(600)
    };
    let report = run(&cfg).unwrap();
    let failed: Vec<&TraceRow> = report
        .rows
        .iter()
        .filter(|r| r.has_event(EventKind::RebuildFailed))
        .collect();
    assert!(!failed.is_empty());
    assert!(!report.outcome.failures.is_empty());
    for r in failed {
        let prev = &report.rows[r.step as usize - 1];
        assert_eq!(r.k, prev.k);
        assert_eq!(r.shield_build, prev.shield_build);
    }
}

#[test]
fn change_gate_skips_quiet_updates() {
    let mut scn = scenario_1();
    let NetworkConfig::Single { arrivals } = &mut scn.network else {
        unreachable!()
    };
    arrivals.changes.clear();
    arrivals.total_rate = 0.8;
    let cfg = ExperimentConfig {
        scenario: ScenarioSource::Inline(Box::new(scn)),
        change_gate: true,
        ..quick(1500)
    };
    let report = run(&cfg).unwrap();
    assert!(report.summary.stats.skipped_rebuilds > 0);
    let skips = report.rows.iter().filter(|r| r.has_event(EventKind::Skip));
    for r in skips {
        assert_eq!(r.step % 100, 0);
    }
}

#[test]
fn widening_after_multiple_arrivals() {
    let mut scn = scenario_1();
    scn.network = NetworkConfig::Single {
        arrivals: ArrivalConfig {
            kind: ArrivalKind::Poisson { cap: 3 },
            total_rate: 1.6,
            weights: vec![1.0; 4],
            changes: vec![],
        },
    };
    let cfg = ExperimentConfig {
        scenario: ScenarioSource::Inline(Box::new(scn)),
        template: TemplateKind::Directed {
            discharge: 1,
            arrivals: 1,
            slack: 0,
        },
        ..quick(300)
    };
    let report = run(&cfg).unwrap();
    assert!(report.summary.stats.widenings >= 1);
    assert_eq!(report.rows.len(), 300);
}

#[test]
fn grid_runs_every_node() {
    let cfg = ExperimentConfig {
        scenario: ScenarioSource::Named("scenario_2".into()),
        ..quick(400)
    };
    let report = run(&cfg).unwrap();
    assert_eq!(report.summary.stats.nodes, 6);
    assert_eq!(report.rows.len(), 2400);
    assert_eq!(report.estimators.len(), 6);
    check_refinement(&report.rows, 100);
}

#[test]
fn unshielded_rows_are_unchanged_commands() {
    let cfg = ExperimentConfig {
        shield: false,
        ..quick(400)
    };
    let report = run(&cfg).unwrap();
    assert!(report
        .rows
        .iter()
        .all(|r| r.action == r.command && r.shield_build.is_none()));
    assert!(report.rows.iter().all(|r| r.command == ((r.step / 20) % 2) as u8));
}
