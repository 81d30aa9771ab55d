mod common;

use std::sync::Arc;

use adaptive_shield::config::ExperimentConfig;
use adaptive_shield::harness::{pareto_is_monotone, sweep_gamma};
use adaptive_shield::mdp::{ActionId, CostModel, StateVector};
use adaptive_shield::solver::{solve_mean_payoff, SolverConfig};
use common::TinyMdp;

const PENALTY: f64 = 4.0;
const GAMMAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn weighted(m: &TinyMdp, gamma: f64) -> CostModel {
    let base = m.cost_model();
    let c1 = move |s: &StateVector, a: ActionId| base.c1(s, a).unwrap();
    let c2 = |s: &StateVector, a: ActionId| if a == s.keep_action() { 0.0 } else { PENALTY };
    CostModel::new(Arc::new(c1), Arc::new(c2), gamma).unwrap()
}

/// `(c1, c2)` long-run averages of the optimal policy, from the oracle.
fn components(m: &TinyMdp, gamma: f64) -> (f64, f64) {
    let mdp = m.to_sparse(3);
    let sol = solve_mean_payoff(&mdp, &weighted(m, gamma), &SolverConfig::with_eps(1e-10)).unwrap();
    let mut actions = vec![ActionId(0); m.states];
    for (i, a) in sol.choices.iter().enumerate() {
        actions[mdp.state(i).vars[0] as usize] = *a;
    }
    let p = m.policy_of(&actions);
    let c1 = m.gain(&p);
    let c2 = m.gain_by(&p, |s, c| if m.rows[s][c].0 == 0 { 0.0 } else { PENALTY });
    (c1, c2)
}

#[test]
fn tiny_instances_trace_the_frontier() {
    for seed in 0..60 {
        let m = TinyMdp::random(seed, 4, 3, 0.1);
        let points: Vec<(f64, f64)> = GAMMAS.iter().map(|&g| components(&m, g)).collect();
        assert_eq!(points[0].1, 0.0, "seed {seed}");
        assert!((points[4].0 - m.optimum()).abs() < 1e-6, "seed {seed}");
        for w in points.windows(2) {
            assert!(w[1].0 <= w[0].0 + 1e-6, "seed {seed}: {points:?}");
            assert!(w[1].1 + 1e-6 >= w[0].1, "seed {seed}: {points:?}");
        }
    }
}

#[test]
fn traffic_abstraction_sweep_is_monotone() {
    let points = sweep_gamma(&ExperimentConfig::default(), &GAMMAS, None).unwrap();
    assert_eq!(points[0].interference, 0.0);
    assert!(pareto_is_monotone(&points, 1e-6), "{points:?}");
    for p in &points {
        let v = p.gamma * p.performance + (1.0 - p.gamma) * p.interference;
        assert!((v - p.value).abs() < 1e-5, "{p:?}");
    }
}
