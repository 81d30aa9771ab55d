#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use adaptive_shield::mdp::{ActionId, CostModel, SparseMdp, StateVector};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn sv(vars: &[u32], ctrl: u8) -> StateVector {
    StateVector::new(vars, ctrl)
}

/// A small MDP with explicit per-choice costs.
#[derive(Clone, Debug)]
pub struct TinyMdp {
    pub states: usize,
    /// `rows[s]` lists `(action, successor distribution over states, cost)`.
    pub rows: Vec<Vec<(u8, Vec<f64>, f64)>>,
}

impl TinyMdp {
    /// Every choice moves to state 0 with probability at least `hub`, so
    /// every stationary policy is unichain.
    pub fn random(seed: u64, max_states: usize, max_actions: u8, hub: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states = rng.gen_range(1..=max_states);
        let rows = (0..states)
            .map(|_| {
                let mut acts: Vec<u8> = vec![0];
                acts.extend((1..max_actions).filter(|_| rng.gen_bool(0.7)));
                acts.into_iter()
                    .map(|a| {
                        let mut p: Vec<f64> = (0..states)
                            .map(|_| {
                                if rng.gen_bool(0.6) {
                                    rng.gen_range(0.0..1.0)
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        if p.iter().all(|&x| x == 0.0) {
                            p[rng.gen_range(0..states)] = 1.0;
                        }
                        let total: f64 = p.iter().sum();
                        p.iter_mut().for_each(|x| *x *= (1.0 - hub) / total);
                        p[0] = (p[0] + hub).min(1.0);
                        (a, p, rng.gen_range(0.0..=10.0))
                    })
                    .collect()
            })
            .collect();
        Self { states, rows }
    }

    pub fn state(i: usize) -> StateVector {
        sv(&[i as u32], 0)
    }

    pub fn to_sparse(&self, max_actions: u8) -> SparseMdp {
        let transitions = self.rows.iter().enumerate().flat_map(|(s, acts)| {
            acts.iter().map(move |(a, p, _)| {
                let dist = p
                    .iter()
                    .enumerate()
                    .filter(|(_, &x)| x > 0.0)
                    .map(|(t, &x)| (Self::state(t), x))
                    .collect();
                (Self::state(s), ActionId(*a), dist)
            })
        });
        SparseMdp::from_transitions(Self::state(0), 1, max_actions as usize, transitions)
    }

    /// Cost model whose weighted cost at gamma 1 is the per-choice cost.
    pub fn cost_model(&self) -> CostModel {
        let table: BTreeMap<(u32, u8), f64> = self
            .rows
            .iter()
            .enumerate()
            .flat_map(|(s, acts)| acts.iter().map(move |(a, _, c)| ((s as u32, *a), *c)))
            .collect();
        let c1 = move |s: &StateVector, a: ActionId| table[&(s.vars[0], a.0)];
        CostModel::new(Arc::new(c1), Arc::new(|_: &StateVector, _: ActionId| 0.0), 1.0).unwrap()
    }

    /// Every deterministic stationary policy as a choice index per state.
    pub fn policies(&self) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for acts in &self.rows {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..acts.len()).map(move |i| {
                        let mut q = p.clone();
                        q.push(i);
                        q
                    })
                })
                .collect();
        }
        out
    }

    /// Long-run average cost of `policy` from its stationary distribution.
    pub fn gain(&self, policy: &[usize]) -> f64 {
        self.gain_by(policy, |s, c| self.rows[s][c].2)
    }

    /// Long-run average of `cost(state, choice)` under `policy`.
    pub fn gain_by(&self, policy: &[usize], cost: impl Fn(usize, usize) -> f64) -> f64 {
        let n = self.states;
        let mut a = DMatrix::<f64>::zeros(n, n);
        for (s, &c) in policy.iter().enumerate() {
            for (t, &p) in self.rows[s][c].1.iter().enumerate() {
                a[(t, s)] += p;
            }
            a[(s, s)] -= 1.0;
        }
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut b = DVector::<f64>::zeros(n);
        b[n - 1] = 1.0;
        let pi = a.lu().solve(&b).expect("unichain policy");
        policy.iter().enumerate().map(|(s, &c)| pi[s] * cost(s, c)).sum()
    }

    /// Optimal gain by exhaustive enumeration.
    pub fn optimum(&self) -> f64 {
        self.policies()
            .iter()
            .map(|p| self.gain(p))
            .fold(f64::INFINITY, f64::min)
    }

    /// Choice index per state of a list of actions.
    pub fn policy_of(&self, actions: &[ActionId]) -> Vec<usize> {
        actions
            .iter()
            .enumerate()
            .map(|(s, a)| self.rows[s].iter().position(|r| r.0 == a.0).unwrap())
            .collect()
    }
}

/// Pseudo-random finite-support model: each variable moves by at most
/// `delta` (floored at 0) and the command may flip.
#[derive(Clone, Debug)]
pub struct RandomModel {
    pub seed: u64,
    pub vars: usize,
    pub delta: u32,
}

impl RandomModel {
    fn weight(&self, s: &StateVector, a: ActionId, offset: &[i64], ctrl: u8) -> f64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        (self.seed, s, a.0, offset, ctrl).hash(&mut h);
        let x = h.finish();
        // some zero-weight successors, the rest in (0, 1]
        if x % 5 == 0 {
            0.0
        } else {
            ((x >> 11) as f64 + 1.0) / (1u64 << 53) as f64
        }
    }
}

impl adaptive_shield::abstraction::TransitionModel for RandomModel {
    fn command_count(&self) -> usize {
        2
    }

    fn action_count(&self) -> usize {
        2
    }

    fn actions(&self, _s: &StateVector) -> Vec<ActionId> {
        vec![ActionId(0), ActionId(1)]
    }

    fn successors(&self, s: &StateVector, a: ActionId) -> adaptive_shield::Result<Vec<(StateVector, f64)>> {
        let d = self.delta as i64;
        let mut offsets: Vec<Vec<i64>> = vec![vec![]];
        for _ in 0..self.vars {
            offsets = offsets
                .into_iter()
                .flat_map(|o| {
                    (-d..=d).map(move |x| {
                        let mut o = o.clone();
                        o.push(x);
                        o
                    })
                })
                .collect();
        }
        let mut out = Vec::new();
        for o in &offsets {
            for ctrl in 0..2u8 {
                let w = self.weight(s, a, o, ctrl);
                if w > 0.0 {
                    let vars: Vec<u32> = s
                        .vars
                        .iter()
                        .zip(o)
                        .map(|(&v, &x)| (v as i64 + x).max(0) as u32)
                        .collect();
                    out.push((sv(&vars, ctrl), w));
                }
            }
        }
        if out.is_empty() {
            out.push((s.clone(), 1.0));
        }
        let total: f64 = out.iter().map(|x| x.1).sum();
        out.iter_mut().for_each(|x| x.1 /= total);
        Ok(out)
    }
}

/// Largest total-variation distance over a set of keys between the learned
/// estimate and the true queue dynamics after `n` observations per key.
pub fn convergence_tv(n: u64, schedule: adaptive_shield::estimator::LambdaSchedule, seed: u64) -> f64 {
    use adaptive_shield::abstraction::TransitionModel;
    use adaptive_shield::estimator::{DirichletTable, SuccessorTemplate};
    use adaptive_shield::traffic::{QueueModel, QueueTemplate};
    use rand::distributions::{Distribution, WeightedIndex};

    let truth = QueueModel {
        rates: [0.15, 0.4, 0.65, 0.3],
        discharge: 1,
        switch_probability: 0.05,
    };
    let template = Arc::new(QueueTemplate::directed());
    let mut table = DirichletTable::new(template.clone(), schedule, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<(StateVector, ActionId)> = [[0, 0, 0, 0], [1, 0, 2, 0], [3, 3, 3, 3], [0, 5, 1, 2]]
        .iter()
        .flat_map(|v| (0..2u8).flat_map(move |c| (0..2u8).map(move |a| (sv(v, c), ActionId(a)))))
        .collect();
    let mut worst: f64 = 0.0;
    for (s, a) in &keys {
        let dist = truth.successors(s, *a).unwrap();
        let pick = WeightedIndex::new(dist.iter().map(|d| d.1)).unwrap();
        for _ in 0..n {
            table.observe(s, *a, &dist[pick.sample(&mut rng)].0).unwrap();
        }
        let mut exact = vec![0.0; template.candidate_count(s, *a)];
        for (t, p) in &dist {
            exact[template.candidate_index(s, *a, t).unwrap()] += p;
        }
        let est = table.estimate(s, *a).unwrap();
        let tv = 0.5 * est.iter().zip(&exact).map(|(x, y)| (x - y).abs()).sum::<f64>();
        worst = worst.max(tv);
    }
    worst
}

pub fn clamp(s: &StateVector, k: &[u32]) -> StateVector {
    let vars: Vec<u32> = s.vars.iter().zip(k).map(|(&v, &c)| if v > c { c } else { v }).collect();
    sv(&vars, s.ctrl)
}

/// Every abstract state in the box `[0, k] x {0, 1}`.
pub fn abstract_box(k: &[u32]) -> Vec<StateVector> {
    let mut out: Vec<Vec<u32>> = vec![vec![]];
    for &c in k {
        out = out
            .into_iter()
            .flat_map(|v| {
                (0..=c).map(move |x| {
                    let mut v = v.clone();
                    v.push(x);
                    v
                })
            })
            .collect();
    }
    out.iter().flat_map(|v| [sv(v, 0), sv(v, 1)]).collect()
}

/// Reachable abstract states and, for each choice, the probability of every
/// abstract state in the box, summed by exhaustive membership tests.
pub fn brute_force(
    model: &RandomModel,
    k: &[u32],
    init: &StateVector,
) -> BTreeMap<(StateVector, u8), BTreeMap<StateVector, f64>> {
    let targets = abstract_box(k);
    let mut seen = BTreeSet::from([clamp(init, k)]);
    let mut queue = VecDeque::from([clamp(init, k)]);
    let mut out = BTreeMap::new();
    while let Some(s) = queue.pop_front() {
        for a in 0..2u8 {
            let succ = adaptive_shield::abstraction::TransitionModel::successors(model, &s, ActionId(a)).unwrap();
            let mut row = BTreeMap::new();
            for t in &targets {
                let p: f64 = succ.iter().filter(|(c, _)| &clamp(c, k) == t).map(|(_, p)| p).sum();
                if p > 0.0 {
                    row.insert(t.clone(), p);
                    if seen.insert(t.clone()) {
                        queue.push_back(t.clone());
                    }
                }
            }
            out.insert((s.clone(), a), row);
        }
    }
    out
}
