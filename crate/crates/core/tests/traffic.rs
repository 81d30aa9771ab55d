mod common;

use adaptive_shield::config::{scenario_1, scenario_2, NetworkConfig};
use adaptive_shield::estimator::SuccessorTemplate;
use adaptive_shield::mdp::{ActionId, StateVector};
use adaptive_shield::shield::{Controller, Environment};
use adaptive_shield::traffic::{
    departures, sim_step, waiting_metric, ArrivalKind, ArrivalModel, FixedPhaseController, GridNetwork,
    IntersectionState, QueueTemplate, SingleIntersection, EW, LANES, NS,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn conservation_per_lane(
        q in prop::array::uniform4(0u32..30),
        arr in prop::array::uniform4(0u32..3),
        cmd in 0u8..2,
        d in 1u32..4,
    ) {
        let s = IntersectionState::new(q);
        let next = sim_step(&s, ActionId(cmd), &arr, d);
        let dep = departures(&q, ActionId(cmd), d);
        for lane in 0..LANES {
            prop_assert_eq!(next.queues[lane], q[lane] + arr[lane] - dep[lane]);
            prop_assert!(dep[lane] <= d.min(q[lane]));
        }
        prop_assert_eq!(next.clock, 1);
        prop_assert_eq!(next.waited, s.total());
    }

    #[test]
    fn queues_drain_without_arrivals(q in prop::array::uniform4(0u32..25), cmds in prop::collection::vec(0u8..2, 0..80), d in 1u32..3) {
        // alternate service so both directions drain
        let mut s = IntersectionState::new(q);
        let max = *q.iter().max().unwrap();
        let bound = (max + d - 1) / d;
        for t in 0..2 * bound as usize {
            s = sim_step(&s, ActionId((t % 2) as u8), &[0; LANES], d);
        }
        prop_assert_eq!(s.queues, [0; LANES]);
        for c in cmds {
            s = sim_step(&s, ActionId(c), &[0; LANES], d);
            prop_assert_eq!(s.queues, [0; LANES]);
        }
    }

    #[test]
    fn per_direction_drain_bound(q in prop::array::uniform4(0u32..25), d in 1u32..3) {
        let mut s = IntersectionState::new(q);
        for _ in 0..(q[0].max(q[1]) + d - 1) / d {
            s = sim_step(&s, ActionId(NS), &[0; LANES], d);
        }
        prop_assert_eq!((s.queues[0], s.queues[1]), (0, 0));
        prop_assert_eq!((s.queues[2], s.queues[3]), (q[2], q[3]));
    }

    #[test]
    fn template_covers_single_intersection(seed in any::<u64>()) {
        let scn = scenario_1();
        let NetworkConfig::Single { arrivals } = &scn.network else { unreachable!() };
        let mut env = SingleIntersection::new(arrivals.model().unwrap(), 1, seed).unwrap();
        let template = QueueTemplate::directed();
        let ctrl = FixedPhaseController::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for step in 0..600u64 {
            let s = StateVector { vars: env.observe(0), ctrl: ctrl.command(0, step) };
            let a = ActionId(if rand::Rng::gen_bool(&mut rng, 0.3) { 1 - s.ctrl } else { s.ctrl });
            env.step(&[a]);
            let next = StateVector { vars: env.observe(0), ctrl: ctrl.command(0, step + 1) };
            prop_assert!(template.candidate_index(&s, a, &next).is_some(), "{} {:?} {}", s, a, next);
        }
    }

    #[test]
    fn template_covers_grid(seed in any::<u64>()) {
        let scn = scenario_2();
        let NetworkConfig::Grid { rows, cols, phases } = &scn.network else { unreachable!() };
        let mut env = GridNetwork::new(*rows, *cols, phases.clone(), 1, seed).unwrap();
        let template = QueueTemplate::directed();
        let ctrl = FixedPhaseController::default();
        for step in 900..1300u64 {
            let before: Vec<StateVector> = (0..env.nodes())
                .map(|n| StateVector { vars: env.observe(n), ctrl: ctrl.command(n, step) })
                .collect();
            let actions: Vec<ActionId> = before.iter().map(|s| ActionId(((step / 7) % 2) as u8 ^ s.ctrl)).collect();
            env.step(&actions);
            for (n, s) in before.iter().enumerate() {
                let next = StateVector { vars: env.observe(n), ctrl: ctrl.command(n, step + 1) };
                prop_assert!(template.candidate_index(s, actions[n], &next).is_some());
            }
        }
    }
}

#[test]
fn directed_template_sizes() {
    let t = QueueTemplate::directed();
    let s = StateVector::new(&[4, 4, 4, 4], NS);
    assert_eq!(t.candidate_count(&s, ActionId(NS)), 32);
    let empty = StateVector::new(&[0, 0, 0, 0], NS);
    assert_eq!(t.candidate_count(&empty, ActionId(EW)), 32);
    assert_eq!(
        QueueTemplate::symmetric().candidate_count(&StateVector::new(&[1, 1, 2, 2], NS), ActionId(NS)),
        162
    );
}

#[test]
fn deterministic_for_fixed_seed() {
    let run = |seed| {
        let model = ArrivalModel::new(ArrivalKind::Bernoulli, vec![0.375; 4]).unwrap();
        let mut env = SingleIntersection::new(model, 1, seed).unwrap();
        (0..500u64)
            .map(|t| {
                env.step(&[ActionId(((t / 20) % 2) as u8)]);
                env.observe(0)
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn empirical_arrival_rate() {
    let model = ArrivalModel::new(ArrivalKind::Bernoulli, ArrivalModel::split(1.5, &[1.0; 4]).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut totals = [0u64; 4];
    let mut out = [0u32; 4];
    for t in 0..10_000 {
        model.sample(t, &mut rng, &mut out);
        for (x, &y) in totals.iter_mut().zip(&out) {
            *x += y as u64;
        }
    }
    for x in totals {
        assert!((x as f64 / 10_000.0 - 0.375).abs() < 0.02);
    }
}

#[test]
fn scenario_one_rates_after_change() {
    let scn = scenario_1();
    let NetworkConfig::Single { arrivals } = &scn.network else {
        unreachable!()
    };
    let m = arrivals.model().unwrap();
    assert_eq!(m.rates_at(0), &[0.375; 4]);
    let late = m.rates_at(500);
    assert!(((late[2] + late[3]) / 1.5 - 0.65).abs() < 1e-12);
    assert!((late[0] - 0.2625).abs() < 1e-12 && (late[2] - 0.4875).abs() < 1e-12);
}

#[test]
fn controller_phases() {
    let c = FixedPhaseController::default();
    assert_eq!(
        [c.command_at(0), c.command_at(19), c.command_at(20), c.command_at(40)],
        [NS, NS, EW, NS]
    );
}

#[test]
fn waiting_metric_window() {
    assert_eq!(waiting_metric(&[0; 50], 49, 100), 0);
    let totals = vec![5u64; 300];
    assert_eq!(waiting_metric(&totals, 250, 100), 500);
    assert_eq!(waiting_metric(&totals, 9, 100), 50);
}
