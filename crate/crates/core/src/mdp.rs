//! Sparse MDPs, cost models, induced Markov chains and an exact long-run
//! average cost oracle.
//!
//! States are tuples of non-negative integer variables plus one entry of a
//! finite command alphabet (the controller's current command). Actions are
//! drawn from a finite action alphabet. For shielding, the action alphabet is
//! the command alphabet itself: action `i` in a state whose command is `i`
//! keeps the controller's choice, any other action overrides it.

use std::collections::VecDeque;
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Inline storage for the integer variables of a state.
pub type Vars = SmallVec<[u32; 4]>;

/// Tolerance used when checking that a distribution sums to one.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

/// A state: `n` non-negative integer variables and the controller command.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateVector {
    pub vars: Vars,
    pub ctrl: u8,
}

impl StateVector {
    pub fn new(vars: &[u32], ctrl: u8) -> Self {
        Self {
            vars: Vars::from_slice(vars),
            ctrl,
        }
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// The action that passes the embedded controller command through.
    pub fn keep_action(&self) -> ActionId {
        ActionId(self.ctrl)
    }
}

impl fmt::Display for StateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.vars.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, "|c{})", self.ctrl)
    }
}

impl fmt::Debug for StateVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Index into the action alphabet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionId(pub u8);

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

/// A finite MDP in compressed sparse row layout.
///
/// Each state owns a contiguous range of *choices* (one per enabled action),
/// and each choice owns a contiguous range of `(successor, probability)`
/// entries.
#[derive(Clone, Debug)]
pub struct SparseMdp {
    command_count: usize,
    action_count: usize,
    states: Vec<StateVector>,
    index: FxHashMap<StateVector, u32>,
    initial: u32,
    state_offsets: Vec<usize>,
    choice_actions: Vec<ActionId>,
    row_offsets: Vec<usize>,
    succ: Vec<u32>,
    prob: Vec<f64>,
}

impl SparseMdp {
    /// Builds an MDP from explicit `(state, action, distribution)` triples.
    ///
    /// States are numbered in sorted order; states that only occur as
    /// successors end up with an empty action set.
    pub fn from_transitions<I>(initial: StateVector, command_count: usize, action_count: usize, transitions: I) -> Self
    where
        I: IntoIterator<Item = (StateVector, ActionId, Vec<(StateVector, f64)>)>,
    {
        let mut rows: Vec<(StateVector, ActionId, Vec<(StateVector, f64)>)> = transitions.into_iter().collect();
        rows.sort_by(|x, y| (&x.0, x.1).cmp(&(&y.0, y.1)));

        let mut all: Vec<StateVector> = vec![initial.clone()];
        for (s, _, dist) in &rows {
            all.push(s.clone());
            all.extend(dist.iter().map(|(t, _)| t.clone()));
        }
        all.sort();
        all.dedup();

        let mut builder = SparseMdpBuilder::new(command_count, action_count);
        for s in &all {
            builder.intern(s);
        }
        for (s, a, dist) in rows {
            let id = builder.intern(&s);
            let entries: Vec<(u32, f64)> = dist.iter().map(|(t, p)| (builder.intern(t), *p)).collect();
            builder.add_choice(id, a, &entries);
        }
        let init = builder.intern(&initial);
        builder.finish(init)
    }

    pub fn command_count(&self) -> usize {
        self.command_count
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_choices(&self) -> usize {
        self.choice_actions.len()
    }

    pub fn num_transitions(&self) -> usize {
        self.succ.len()
    }

    pub fn states(&self) -> &[StateVector] {
        &self.states
    }

    pub fn state(&self, idx: usize) -> &StateVector {
        &self.states[idx]
    }

    pub fn index_of(&self, s: &StateVector) -> Option<usize> {
        self.index.get(s).map(|&i| i as usize)
    }

    pub fn initial(&self) -> usize {
        self.initial as usize
    }

    pub fn initial_state(&self) -> &StateVector {
        &self.states[self.initial as usize]
    }

    /// Choice indices belonging to state `idx`.
    pub fn choices(&self, idx: usize) -> Range<usize> {
        self.state_offsets[idx]..self.state_offsets[idx + 1]
    }

    pub fn choice_action(&self, choice: usize) -> ActionId {
        self.choice_actions[choice]
    }

    /// Successor indices and probabilities of a choice.
    pub fn row(&self, choice: usize) -> (&[u32], &[f64]) {
        let r = self.row_offsets[choice]..self.row_offsets[choice + 1];
        (&self.succ[r.clone()], &self.prob[r])
    }

    pub fn enabled_actions(&self, idx: usize) -> impl Iterator<Item = ActionId> + '_ {
        self.choices(idx).map(move |c| self.choice_actions[c])
    }

    pub fn choice_for(&self, idx: usize, action: ActionId) -> Option<usize> {
        self.choices(idx).find(|&c| self.choice_actions[c] == action)
    }

    pub fn is_enabled(&self, s: &StateVector, action: ActionId) -> bool {
        self.index_of(s).and_then(|i| self.choice_for(i, action)).is_some()
    }

    /// The distribution `P(s, a)` as explicit states, if `a` is enabled in `s`.
    pub fn distribution(&self, s: &StateVector, action: ActionId) -> Option<Vec<(StateVector, f64)>> {
        let idx = self.index_of(s)?;
        let c = self.choice_for(idx, action)?;
        let (succ, prob) = self.row(c);
        Some(
            succ.iter()
                .zip(prob)
                .map(|(&t, &p)| (self.states[t as usize].clone(), p))
                .collect(),
        )
    }
}

/// Incremental constructor for [`SparseMdp`].
///
/// Choices must be added in non-decreasing state order, which matches the
/// breadth-first order in which abstractions are explored.
#[derive(Debug)]
pub struct SparseMdpBuilder {
    command_count: usize,
    action_count: usize,
    states: Vec<StateVector>,
    index: FxHashMap<StateVector, u32>,
    state_offsets: Vec<usize>,
    choice_actions: Vec<ActionId>,
    row_offsets: Vec<usize>,
    succ: Vec<u32>,
    prob: Vec<f64>,
}

impl SparseMdpBuilder {
    pub fn new(command_count: usize, action_count: usize) -> Self {
        Self {
            command_count,
            action_count,
            states: Vec::new(),
            index: FxHashMap::default(),
            state_offsets: Vec::new(),
            choice_actions: Vec::new(),
            row_offsets: vec![0],
            succ: Vec::new(),
            prob: Vec::new(),
        }
    }

    /// Returns the index of `s`, assigning the next free one if unseen.
    pub fn intern(&mut self, s: &StateVector) -> u32 {
        if let Some(&i) = self.index.get(s) {
            return i;
        }
        let i = self.states.len() as u32;
        self.states.push(s.clone());
        self.index.insert(s.clone(), i);
        i
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_transitions(&self) -> usize {
        self.succ.len()
    }

    pub fn state(&self, idx: u32) -> &StateVector {
        &self.states[idx as usize]
    }

    /// Appends a choice for `state`. Panics if `state` precedes a state that
    /// already received choices.
    pub fn add_choice(&mut self, state: u32, action: ActionId, entries: &[(u32, f64)]) {
        let state = state as usize;
        assert!(
            state + 1 >= self.state_offsets.len(),
            "choices must be added in state order"
        );
        while self.state_offsets.len() <= state {
            self.state_offsets.push(self.choice_actions.len());
        }
        self.choice_actions.push(action);
        for &(t, p) in entries {
            self.succ.push(t);
            self.prob.push(p);
        }
        self.row_offsets.push(self.succ.len());
    }

    pub fn finish(mut self, initial: u32) -> SparseMdp {
        while self.state_offsets.len() <= self.states.len() {
            self.state_offsets.push(self.choice_actions.len());
        }
        SparseMdp {
            command_count: self.command_count,
            action_count: self.action_count,
            states: self.states,
            index: self.index,
            initial,
            state_offsets: self.state_offsets,
            choice_actions: self.choice_actions,
            row_offsets: self.row_offsets,
            succ: self.succ,
            prob: self.prob,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ViolationKind {
    SumMismatch(f64),
    ProbabilityOutOfRange(f64),
    EmptySupport,
    NoActions,
    DuplicateAction,
    CommandOutOfAlphabet,
    ActionOutOfAlphabet,
}

/// One broken MDP invariant, naming the offending state and action.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub state: StateVector,
    pub action: Option<ActionId>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.action {
            Some(a) => write!(f, "{} / {}: ", self.state, a)?,
            None => write!(f, "{}: ", self.state)?,
        }
        match &self.kind {
            ViolationKind::SumMismatch(s) => write!(f, "sums to {s}"),
            ViolationKind::ProbabilityOutOfRange(p) => write!(f, "probability {p} outside [0,1]"),
            ViolationKind::EmptySupport => write!(f, "empty support"),
            ViolationKind::NoActions => write!(f, "|A(s)| >= 1 violated"),
            ViolationKind::DuplicateAction => write!(f, "action listed twice"),
            ViolationKind::CommandOutOfAlphabet => write!(f, "command outside alphabet"),
            ViolationKind::ActionOutOfAlphabet => write!(f, "action outside alphabet"),
        }
    }
}

/// Checks every structural invariant of `mdp`. An empty result means valid.
pub fn validate_mdp(mdp: &SparseMdp) -> Vec<Violation> {
    let mut out = Vec::new();
    for (idx, s) in mdp.states.iter().enumerate() {
        let push = |out: &mut Vec<Violation>, action, kind| {
            out.push(Violation {
                state: s.clone(),
                action,
                kind,
            })
        };
        if (s.ctrl as usize) >= mdp.command_count {
            push(&mut out, None, ViolationKind::CommandOutOfAlphabet);
        }
        let choices = mdp.choices(idx);
        if choices.is_empty() {
            push(&mut out, None, ViolationKind::NoActions);
        }
        let mut seen: SmallVec<[ActionId; 4]> = SmallVec::new();
        for c in choices {
            let a = mdp.choice_actions[c];
            if (a.0 as usize) >= mdp.action_count {
                push(&mut out, Some(a), ViolationKind::ActionOutOfAlphabet);
            }
            if seen.contains(&a) {
                push(&mut out, Some(a), ViolationKind::DuplicateAction);
            }
            seen.push(a);
            let (succ, prob) = mdp.row(c);
            if succ.is_empty() {
                push(&mut out, Some(a), ViolationKind::EmptySupport);
                continue;
            }
            for &p in prob {
                if !(0.0..=1.0 + DISTRIBUTION_TOLERANCE).contains(&p) {
                    push(&mut out, Some(a), ViolationKind::ProbabilityOutOfRange(p));
                }
            }
            let sum: f64 = prob.iter().sum();
            if !sum.is_finite() || (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
                push(&mut out, Some(a), ViolationKind::SumMismatch(sum));
            }
        }
    }
    out
}

/// A per-step cost `c(s, a)`.
pub trait CostFunction: Send + Sync {
    fn cost(&self, s: &StateVector, a: ActionId) -> f64;
}

impl<F> CostFunction for F
where
    F: Fn(&StateVector, ActionId) -> f64 + Send + Sync,
{
    fn cost(&self, s: &StateVector, a: ActionId) -> f64 {
        self(s, a)
    }
}

/// Performance cost `c1`, interference cost `c2` and the weight `gamma`.
#[derive(Clone)]
pub struct CostModel {
    c1: Arc<dyn CostFunction>,
    c2: Arc<dyn CostFunction>,
    gamma: f64,
}

impl fmt::Debug for CostModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostModel")
            .field("gamma", &self.gamma)
            .finish_non_exhaustive()
    }
}

impl CostModel {
    pub fn new(c1: Arc<dyn CostFunction>, c2: Arc<dyn CostFunction>, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidGamma(gamma));
        }
        Ok(Self { c1, c2, gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Same cost functions, different weight.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(self.c1.clone(), self.c2.clone(), gamma)
    }

    pub fn c1(&self, s: &StateVector, a: ActionId) -> Result<f64> {
        checked(s, a, self.c1.cost(s, a))
    }

    pub fn c2(&self, s: &StateVector, a: ActionId) -> Result<f64> {
        checked(s, a, self.c2.cost(s, a))
    }

    /// `gamma * c1 + (1 - gamma) * c2`, without checking that `a` is enabled.
    pub fn weighted(&self, s: &StateVector, a: ActionId) -> Result<f64> {
        let c1 = self.c1(s, a)?;
        let c2 = self.c2(s, a)?;
        Ok(self.gamma * c1 + (1.0 - self.gamma) * c2)
    }

    /// Weighted cost of an action that must be enabled in `s`.
    pub fn weighted_cost(&self, mdp: &SparseMdp, s: &StateVector, a: ActionId) -> Result<f64> {
        if !mdp.is_enabled(s, a) {
            return Err(Error::ActionNotEnabled {
                state: s.clone(),
                action: a,
            });
        }
        self.weighted(s, a)
    }
}

fn checked(s: &StateVector, a: ActionId, value: f64) -> Result<f64> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(Error::InvalidCost {
            state: s.clone(),
            action: a,
            value,
        })
    }
}

/// A memoryless deterministic policy.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Policy {
    choice: FxHashMap<StateVector, ActionId>,
}

impl Policy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, s: StateVector, a: ActionId) {
        self.choice.insert(s, a);
    }

    pub fn get(&self, s: &StateVector) -> Option<ActionId> {
        self.choice.get(s).copied()
    }

    pub fn len(&self) -> usize {
        self.choice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choice.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StateVector, &ActionId)> {
        self.choice.iter()
    }
}

impl FromIterator<(StateVector, ActionId)> for Policy {
    fn from_iter<T: IntoIterator<Item = (StateVector, ActionId)>>(iter: T) -> Self {
        Self {
            choice: iter.into_iter().collect(),
        }
    }
}

/// A finite Markov chain with a per-state cost.
#[derive(Clone, Debug)]
pub struct MarkovChain {
    states: Vec<StateVector>,
    initial: usize,
    row_offsets: Vec<usize>,
    succ: Vec<usize>,
    prob: Vec<f64>,
    step_cost: Vec<f64>,
}

impl MarkovChain {
    /// `rows[i]` lists the `(successor index, probability)` pairs of state `i`.
    pub fn new(
        states: Vec<StateVector>,
        initial: usize,
        rows: Vec<Vec<(usize, f64)>>,
        step_cost: Vec<f64>,
    ) -> Result<Self> {
        let n = states.len();
        if rows.len() != n || step_cost.len() != n || initial >= n {
            return Err(Error::InvalidParameter(
                "chain rows, costs and states must have equal length".into(),
            ));
        }
        let mut row_offsets = vec![0];
        let mut succ = Vec::new();
        let mut prob = Vec::new();
        for (i, row) in rows.into_iter().enumerate() {
            let sum: f64 = row.iter().map(|e| e.1).sum();
            if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE || row.iter().any(|e| e.0 >= n) {
                return Err(Error::InvalidParameter(format!(
                    "row of {} is not a distribution over the chain (sum {sum})",
                    states[i]
                )));
            }
            for (t, p) in row {
                succ.push(t);
                prob.push(p);
            }
            row_offsets.push(succ.len());
        }
        Ok(Self {
            states,
            initial,
            row_offsets,
            succ,
            prob,
            step_cost,
        })
    }

    /// Chain over anonymous states `0..n` from a dense row-stochastic matrix.
    pub fn from_dense(matrix: &[Vec<f64>], step_cost: Vec<f64>) -> Result<Self> {
        let states = (0..matrix.len() as u32).map(|i| StateVector::new(&[i], 0)).collect();
        let rows = matrix
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, &p)| p != 0.0)
                    .map(|(j, &p)| (j, p))
                    .collect()
            })
            .collect();
        Self::new(states, 0, rows, step_cost)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[StateVector] {
        &self.states
    }

    pub fn initial(&self) -> usize {
        self.initial
    }

    pub fn step_cost(&self) -> &[f64] {
        &self.step_cost
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_offsets[i]..self.row_offsets[i + 1];
        (&self.succ[r.clone()], &self.prob[r])
    }

    /// Same transitions, different per-state cost.
    pub fn with_step_cost(&self, step_cost: Vec<f64>) -> Result<Self> {
        if step_cost.len() != self.len() {
            return Err(Error::InvalidParameter("cost vector length".into()));
        }
        Ok(Self {
            step_cost,
            ..self.clone()
        })
    }
}

/// Restricts `mdp` to the states reachable from its initial state under `pi`.
pub fn induce_chain(mdp: &SparseMdp, pi: &Policy, cm: &CostModel) -> Result<MarkovChain> {
    induce_chain_with(mdp, |s| pi.get(s), |s, a| cm.weighted(s, a))
}

/// [`induce_chain`] with an arbitrary per-state cost.
pub(crate) fn induce_chain_with<P, C>(mdp: &SparseMdp, pi: P, cost: C) -> Result<MarkovChain>
where
    P: Fn(&StateVector) -> Option<ActionId>,
    C: Fn(&StateVector, ActionId) -> Result<f64>,
{
    let mut local: FxHashMap<usize, usize> = FxHashMap::default();
    let mut order = vec![mdp.initial()];
    local.insert(mdp.initial(), 0);
    let mut queue = VecDeque::from([mdp.initial()]);
    let mut rows = Vec::new();
    let mut costs = Vec::new();
    while let Some(idx) = queue.pop_front() {
        let s = mdp.state(idx);
        let a = pi(s).ok_or_else(|| Error::PolicyUndefined(s.clone()))?;
        let c = mdp.choice_for(idx, a).ok_or_else(|| Error::PolicyChoiceInvalid {
            state: s.clone(),
            action: a,
        })?;
        costs.push(cost(s, a)?);
        let (succ, prob) = mdp.row(c);
        let mut row = Vec::with_capacity(succ.len());
        for (&t, &p) in succ.iter().zip(prob) {
            let t = t as usize;
            let next = local.len();
            let j = *local.entry(t).or_insert_with(|| {
                order.push(t);
                queue.push_back(t);
                next
            });
            row.push((j, p));
        }
        rows.push(row);
    }
    let states = order.iter().map(|&i| mdp.state(i).clone()).collect();
    MarkovChain::new(states, 0, rows, costs)
}

/// Chains up to this size are solved with a dense linear solve.
pub const DIRECT_SOLVE_LIMIT: usize = 2000;

const POWER_RESIDUAL: f64 = 1e-12;
const POWER_MAX_ITERATIONS: u64 = 1_000_000;
const SINGULAR_PIVOT: f64 = 1e-10;

/// The unique stationary distribution of a unichain Markov chain.
pub fn stationary_distribution(chain: &MarkovChain) -> Result<Vec<f64>> {
    if chain.len() <= DIRECT_SOLVE_LIMIT {
        stationary_direct(chain)
    } else {
        stationary_power(chain)
    }
}

fn stationary_direct(chain: &MarkovChain) -> Result<Vec<f64>> {
    let n = chain.len();
    // rows of (P^T - I), last row replaced by sum(mu) = 1
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        a[(i, i)] -= 1.0;
        let (succ, prob) = chain.row(i);
        for (&j, &p) in succ.iter().zip(prob) {
            a[(j, i)] += p;
        }
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;

    let lu = a.clone().full_piv_lu();
    let u = lu.u();
    let diag_max = (0..n).map(|i| u[(i, i)].abs()).fold(0.0, f64::max);
    let diag_min = (0..n).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if diag_max == 0.0 || diag_min < SINGULAR_PIVOT * diag_max {
        return Err(Error::NotUnichain);
    }
    let mu = lu.solve(&b).ok_or(Error::NotUnichain)?;
    let residual = (&a * &mu - &b).amax();
    if !residual.is_finite() || residual > 1e-8 {
        return Err(Error::NotUnichain);
    }
    Ok(mu.iter().map(|&x| if x.abs() < 1e-15 { 0.0 } else { x }).collect())
}

fn stationary_power(chain: &MarkovChain) -> Result<Vec<f64>> {
    let n = chain.len();
    let mut mu = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for it in 0..POWER_MAX_ITERATIONS {
        next.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            let (succ, prob) = chain.row(i);
            for (&j, &p) in succ.iter().zip(prob) {
                next[j] += mu[i] * p;
            }
        }
        residual = next.iter().zip(&mu).map(|(x, y)| (x - y).abs()).sum();
        if residual < POWER_RESIDUAL {
            return Ok(next);
        }
        // lazy step keeps periodic chains convergent
        for (m, x) in mu.iter_mut().zip(&next) {
            *m = 0.5 * *m + 0.5 * x;
        }
        if it % 1024 == 0 {
            let total: f64 = mu.iter().sum();
            mu.iter_mut().for_each(|m| *m /= total);
        }
    }
    Err(Error::NoConvergence {
        iterations: POWER_MAX_ITERATIONS,
        residual,
    })
}

/// Long-run average cost `sum_s mu(s) * cost(s)` of a unichain chain.
pub fn long_run_average_cost(chain: &MarkovChain) -> Result<f64> {
    let mu = stationary_distribution(chain)?;
    Ok(mu.iter().zip(&chain.step_cost).map(|(m, c)| m * c).sum())
}
