//! Domain-constrained abstraction of an infinite-state MDP and refinement of
//! its cut-off function.
//!
//! Every integer variable `i` is clamped at the cut-off `k(i)`. All concrete
//! successors that clamp to the same abstract state have their probabilities
//! summed. The controller command is never clamped.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::DirichletTable;
use crate::mdp::{ActionId, CostModel, SparseMdp, SparseMdpBuilder, StateVector, Vars, DISTRIBUTION_TOLERANCE};

/// Anything that can hand out a finite successor distribution per `(s, a)`.
pub trait TransitionModel {
    fn command_count(&self) -> usize;
    fn action_count(&self) -> usize;
    fn actions(&self, s: &StateVector) -> Vec<ActionId>;
    fn successors(&self, s: &StateVector, a: ActionId) -> Result<Vec<(StateVector, f64)>>;
}

impl TransitionModel for DirichletTable {
    fn command_count(&self) -> usize {
        self.template().command_count()
    }

    fn action_count(&self) -> usize {
        self.template().action_count()
    }

    fn actions(&self, s: &StateVector) -> Vec<ActionId> {
        self.template().actions(s)
    }

    fn successors(&self, s: &StateVector, a: ActionId) -> Result<Vec<(StateVector, f64)>> {
        self.distribution(s, a)
    }
}

/// Per-variable cut-off values, each at least 1.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct CutoffFunction(Vec<u32>);

impl CutoffFunction {
    pub fn new(values: Vec<u32>) -> Result<Self> {
        if values.is_empty() || values.contains(&0) {
            return Err(Error::InvalidCutoff(format!("{values:?}")));
        }
        Ok(Self(values))
    }

    pub fn uniform(n: usize, k: u32) -> Result<Self> {
        Self::new(vec![k; n])
    }

    pub fn values(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of abstract states in the full clamped product with
    /// `commands` controller commands.
    pub fn product_size(&self, commands: usize) -> u128 {
        self.0.iter().map(|&k| k as u128 + 1).product::<u128>() * commands as u128
    }

    /// Componentwise `self >= other`.
    pub fn dominates(&self, other: &Self) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a >= b)
    }
}

impl TryFrom<Vec<u32>> for CutoffFunction {
    type Error = Error;
    fn try_from(v: Vec<u32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CutoffFunction> for Vec<u32> {
    fn from(k: CutoffFunction) -> Self {
        k.0
    }
}

impl fmt::Display for CutoffFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, k) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{k}")?;
        }
        write!(f, ")")
    }
}

impl fmt::Debug for CutoffFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Clamps every variable at its cut-off; the command is unchanged.
///
/// Variables beyond the length of `k` are left as they are.
pub fn abstract_state(s: &StateVector, k: &CutoffFunction) -> StateVector {
    let vars: Vars = s
        .vars
        .iter()
        .enumerate()
        .map(|(i, &v)| match k.0.get(i) {
            Some(&c) => v.min(c),
            None => v,
        })
        .collect();
    StateVector { vars, ctrl: s.ctrl }
}

/// A finite abstraction together with the cut-off it was built for.
#[derive(Clone, Debug)]
pub struct AbstractMdp {
    mdp: SparseMdp,
    cutoff: CutoffFunction,
    build_step: u64,
}

impl AbstractMdp {
    pub fn mdp(&self) -> &SparseMdp {
        &self.mdp
    }

    pub fn cutoff(&self) -> &CutoffFunction {
        &self.cutoff
    }

    pub fn build_step(&self) -> u64 {
        self.build_step
    }

    pub fn num_states(&self) -> usize {
        self.mdp.num_states()
    }

    /// Writes one line per transition:
    /// `state action successor probability c1 c2`, preceded by a state table.
    pub fn write_explicit<W: Write>(&self, cm: &CostModel, mut w: W) -> Result<()> {
        writeln!(w, "# cutoff {}", self.cutoff)?;
        writeln!(w, "# initial {}", self.mdp.initial())?;
        for (i, s) in self.mdp.states().iter().enumerate() {
            writeln!(w, "# state {i} {s}")?;
        }
        for i in 0..self.mdp.num_states() {
            let s = self.mdp.state(i);
            for c in self.mdp.choices(i) {
                let a = self.mdp.choice_action(c);
                let c1 = cm.c1(s, a)?;
                let c2 = cm.c2(s, a)?;
                let (succ, prob) = self.mdp.row(c);
                for (t, p) in succ.iter().zip(prob) {
                    writeln!(w, "{i} {} {t} {p:e} {c1} {c2}", a.0)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BuildConfig {
    /// Upper bound on the number of stored transitions.
    pub max_transitions: usize,
    pub build_step: u64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            max_transitions: 5_000_000,
            build_step: 0,
        }
    }
}

/// Explores the clamped state space breadth-first from the clamped initial
/// state and sums concrete successor probabilities per abstract successor.
pub fn build_abstraction(
    model: &dyn TransitionModel,
    k: &CutoffFunction,
    initial: &StateVector,
    cfg: &BuildConfig,
) -> Result<AbstractMdp> {
    if initial.len() != k.len() {
        return Err(Error::InvalidCutoff(format!(
            "{} cut-offs for states with {} variables",
            k.len(),
            initial.len()
        )));
    }
    let mut builder = SparseMdpBuilder::new(model.command_count(), model.action_count());
    let s0 = builder.intern(&abstract_state(initial, k));
    let mut row: Vec<(u32, f64)> = Vec::new();
    let mut next = 0u32;
    while (next as usize) < builder.num_states() {
        let s = builder.state(next).clone();
        for a in model.actions(&s) {
            let dist = model.successors(&s, a)?;
            row.clear();
            let mut total = 0.0;
            for (t, p) in dist {
                if t.len() != k.len() || !(0.0..=1.0 + DISTRIBUTION_TOLERANCE).contains(&p) {
                    return Err(Error::StructureMismatch {
                        state: s.clone(),
                        action: a,
                        reason: format!("successor {t} with probability {p}"),
                    });
                }
                total += p;
                row.push((builder.intern(&abstract_state(&t, k)), p));
            }
            if row.is_empty() || (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
                return Err(Error::StructureMismatch {
                    state: s.clone(),
                    action: a,
                    reason: format!("estimate sums to {total}"),
                });
            }
            row.sort_by_key(|e| e.0);
            let mut merged = 0;
            for i in 0..row.len() {
                if merged > 0 && row[merged - 1].0 == row[i].0 {
                    row[merged - 1].1 += row[i].1;
                } else {
                    row[merged] = row[i];
                    merged += 1;
                }
            }
            row.truncate(merged);
            if builder.num_transitions() + row.len() > cfg.max_transitions {
                return Err(Error::BudgetExceeded {
                    budget: cfg.max_transitions,
                });
            }
            builder.add_choice(next, a, &row);
        }
        next += 1;
    }
    Ok(AbstractMdp {
        mdp: builder.finish(s0),
        cutoff: k.clone(),
        build_step: cfg.build_step,
    })
}

/// The states observed during the most recent `capacity` steps.
#[derive(Clone, Debug)]
pub struct ObservationWindow {
    states: VecDeque<StateVector>,
    capacity: usize,
}

impl ObservationWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            states: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, s: StateVector) {
        if self.states.len() == self.capacity {
            self.states.pop_front();
        }
        self.states.push_back(s);
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &StateVector> {
        self.states.iter()
    }

    pub fn clear(&mut self) {
        self.states.clear();
    }
}

impl FromIterator<StateVector> for ObservationWindow {
    fn from_iter<T: IntoIterator<Item = StateVector>>(iter: T) -> Self {
        let states: VecDeque<_> = iter.into_iter().collect();
        let capacity = states.len().max(1);
        Self { states, capacity }
    }
}

/// Raises each cut-off to the largest value observed in the window.
pub fn refine_cutoff(k: &CutoffFunction, window: &ObservationWindow) -> (CutoffFunction, bool) {
    refine_cutoff_padded(k, window, 0)
}

/// Like [`refine_cutoff`], but variables that grew get `padding` extra room.
pub fn refine_cutoff_padded(k: &CutoffFunction, window: &ObservationWindow, padding: u32) -> (CutoffFunction, bool) {
    let mut values = k.0.clone();
    let mut changed = false;
    for s in window.iter() {
        for (i, slot) in values.iter_mut().enumerate() {
            if let Some(&v) = s.vars.get(i) {
                if v > k.0[i] {
                    let target = v.saturating_add(padding);
                    if target > *slot {
                        *slot = target;
                        changed = true;
                    }
                }
            }
        }
    }
    (CutoffFunction(values), changed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[u32], c: u8) -> StateVector {
        StateVector::new(v, c)
    }

    #[test]
    fn clamping_examples() {
        let k = CutoffFunction::uniform(4, 3).unwrap();
        assert_eq!(abstract_state(&s(&[5, 1, 3, 0], 0), &k), s(&[3, 1, 3, 0], 0));
        assert_eq!(abstract_state(&s(&[1, 2, 0, 2], 1), &k), s(&[1, 2, 0, 2], 1));
        assert_eq!(abstract_state(&s(&[10, 10, 10, 10], 1), &k), s(&[3, 3, 3, 3], 1));
    }

    #[test]
    fn cutoff_must_be_positive() {
        assert!(CutoffFunction::new(vec![3, 0]).is_err());
        assert!(CutoffFunction::new(vec![]).is_err());
    }

    #[test]
    fn refinement_examples() {
        let k = CutoffFunction::uniform(4, 3).unwrap();
        let w: ObservationWindow = [s(&[5, 0, 2, 1], 0), s(&[1, 2, 7, 0], 1)].into_iter().collect();
        let (k2, changed) = refine_cutoff(&k, &w);
        assert!(changed);
        assert_eq!(k2.values(), &[5, 3, 7, 3]);

        let w: ObservationWindow = [s(&[1, 2, 3, 0], 0)].into_iter().collect();
        let (k3, changed) = refine_cutoff(&k, &w);
        assert!(!changed);
        assert_eq!(k3, k);

        let (k4, changed) = refine_cutoff(&k, &ObservationWindow::new(10));
        assert!(!changed);
        assert_eq!(k4, k);
    }

    #[test]
    fn successive_windows() {
        let k = CutoffFunction::uniform(4, 3).unwrap();
        let w1: ObservationWindow = [s(&[4, 4, 4, 4], 0)].into_iter().collect();
        let w2: ObservationWindow = [s(&[5, 4, 5, 4], 1)].into_iter().collect();
        let (k, _) = refine_cutoff(&k, &w1);
        assert_eq!(k.to_string(), "(4,4,4,4)");
        let (k, _) = refine_cutoff(&k, &w2);
        assert_eq!(k.to_string(), "(5,4,5,4)");
    }

    #[test]
    fn padding_only_applies_to_grown_variables() {
        let k = CutoffFunction::uniform(2, 3).unwrap();
        let w: ObservationWindow = [s(&[5, 3], 0)].into_iter().collect();
        let (k2, changed) = refine_cutoff_padded(&k, &w, 2);
        assert!(changed);
        assert_eq!(k2.values(), &[7, 3]);
    }

    #[test]
    fn window_is_bounded() {
        let mut w = ObservationWindow::new(3);
        for i in 0..10 {
            w.push(s(&[i], 0));
        }
        assert_eq!(w.len(), 3);
        assert_eq!(w.iter().next().unwrap(), &s(&[7], 0));
    }

    struct Table(Vec<(StateVector, f64)>);

    impl TransitionModel for Table {
        fn command_count(&self) -> usize {
            1
        }
        fn action_count(&self) -> usize {
            1
        }
        fn actions(&self, _: &StateVector) -> Vec<ActionId> {
            vec![ActionId(0)]
        }
        fn successors(&self, _: &StateVector, _: ActionId) -> Result<Vec<(StateVector, f64)>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn lumped_successors_are_summed() {
        let model = Table(vec![(s(&[4, 0], 0), 0.3), (s(&[5, 0], 0), 0.2), (s(&[1, 1], 0), 0.5)]);
        let k = CutoffFunction::uniform(2, 3).unwrap();
        let abs = build_abstraction(&model, &k, &s(&[1, 1], 0), &BuildConfig::default()).unwrap();
        let d = abs.mdp().distribution(&s(&[1, 1], 0), ActionId(0)).unwrap();
        assert_eq!(d.len(), 2);
        let lumped = d.iter().find(|(t, _)| t == &s(&[3, 0], 0)).unwrap().1;
        assert!((lumped - 0.5).abs() < 1e-15);
    }

    #[test]
    fn below_cutoff_is_pointwise() {
        let model = Table(vec![(s(&[0, 1], 0), 0.25), (s(&[1, 0], 0), 0.75)]);
        let k = CutoffFunction::uniform(2, 3).unwrap();
        let abs = build_abstraction(&model, &k, &s(&[0, 1], 0), &BuildConfig::default()).unwrap();
        for st in abs.mdp().states() {
            let d = abs.mdp().distribution(st, ActionId(0)).unwrap();
            assert_eq!(d, vec![(s(&[0, 1], 0), 0.25), (s(&[1, 0], 0), 0.75)]);
        }
    }

    #[test]
    fn budget_is_enforced() {
        let model = Table(vec![(s(&[0], 0), 0.5), (s(&[1], 0), 0.5)]);
        let k = CutoffFunction::uniform(1, 3).unwrap();
        let cfg = BuildConfig {
            max_transitions: 3,
            build_step: 0,
        };
        assert!(matches!(
            build_abstraction(&model, &k, &s(&[0], 0), &cfg),
            Err(Error::BudgetExceeded { budget: 3 })
        ));
    }

    #[test]
    fn bad_estimate_is_a_structure_mismatch() {
        let model = Table(vec![(s(&[0], 0), 0.5)]);
        let k = CutoffFunction::uniform(1, 3).unwrap();
        assert!(matches!(
            build_abstraction(&model, &k, &s(&[0], 0), &BuildConfig::default()),
            Err(Error::StructureMismatch { .. })
        ));
    }
}
