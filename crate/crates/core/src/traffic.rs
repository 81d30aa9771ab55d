//! A discrete-time traffic intersection simulator with queue-level dynamics.
//!
//! Lanes are ordered north, south, east, west. Command `NS` serves the first
//! two lanes, `EW` the last two. Within a step, the served lanes discharge
//! first and arrivals are added afterwards.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use smallvec::smallvec;

use crate::abstraction::TransitionModel;
use crate::error::{Error, Result};
use crate::estimator::SuccessorTemplate;
use crate::mdp::{ActionId, CostFunction, CostModel, StateVector, Vars};
use crate::shield::{Controller, Environment};

pub const LANES: usize = 4;
pub const NORTH: usize = 0;
pub const SOUTH: usize = 1;
pub const EAST: usize = 2;
pub const WEST: usize = 3;

/// Serve north and south.
pub const NS: u8 = 0;
/// Serve east and west.
pub const EW: u8 = 1;

/// Whether `command` gives green to `lane`.
pub fn serves(command: u8, lane: usize) -> bool {
    (lane < 2) == (command == NS)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntersectionState {
    pub queues: [u32; LANES],
    /// Direction served in the last step.
    pub light: u8,
    pub clock: u64,
    /// Vehicle-steps spent waiting so far.
    pub waited: u64,
}

impl IntersectionState {
    pub fn new(queues: [u32; LANES]) -> Self {
        Self {
            queues,
            light: NS,
            clock: 0,
            waited: 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.queues.iter().map(|&q| q as u64).sum()
    }

    pub fn vars(&self) -> Vars {
        Vars::from_slice(&self.queues)
    }
}

impl Default for IntersectionState {
    fn default() -> Self {
        Self::new([0; LANES])
    }
}

/// Vehicles leaving each lane when `command` is applied.
pub fn departures(queues: &[u32; LANES], command: ActionId, discharge: u32) -> [u32; LANES] {
    let mut out = [0; LANES];
    for (lane, d) in out.iter_mut().enumerate() {
        if serves(command.0, lane) {
            *d = queues[lane].min(discharge);
        }
    }
    out
}

/// One step of the queue dynamics with given arrival counts.
pub fn sim_step(
    state: &IntersectionState,
    command: ActionId,
    arrivals: &[u32; LANES],
    discharge: u32,
) -> IntersectionState {
    let dep = departures(&state.queues, command, discharge);
    let mut queues = state.queues;
    for lane in 0..LANES {
        queues[lane] = queues[lane] - dep[lane] + arrivals[lane];
    }
    IntersectionState {
        queues,
        light: command.0,
        clock: state.clock + 1,
        waited: state.waited + state.total(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArrivalKind {
    /// At most one vehicle per lane and step.
    Bernoulli,
    /// Poisson counts truncated at `cap`.
    Poisson { cap: u32 },
}

/// Per-lane arrival rates with scripted change points.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrivalModel {
    kind: ArrivalKind,
    /// `(first step, rates)`, steps strictly increasing, starting at 0.
    phases: Vec<(u64, Vec<f64>)>,
}

impl ArrivalModel {
    pub fn new(kind: ArrivalKind, rates: Vec<f64>) -> Result<Self> {
        Self::check(kind, &rates)?;
        Ok(Self {
            kind,
            phases: vec![(0, rates)],
        })
    }

    /// Splits a total rate over lanes proportionally to `weights`.
    pub fn split(total: f64, weights: &[f64]) -> Result<Vec<f64>> {
        let sum: f64 = weights.iter().sum();
        if !(total >= 0.0) || !(sum > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidParameter(format!(
                "arrival split {total} over {weights:?}"
            )));
        }
        Ok(weights.iter().map(|w| total * w / sum).collect())
    }

    /// Switches to `rates` from `step` on.
    pub fn with_change(mut self, step: u64, rates: Vec<f64>) -> Result<Self> {
        Self::check(self.kind, &rates)?;
        let last = self.phases.last().map_or(0, |p| p.0);
        if step <= last || rates.len() != self.phases[0].1.len() {
            return Err(Error::InvalidParameter(format!("arrival change at step {step}")));
        }
        self.phases.push((step, rates));
        Ok(self)
    }

    fn check(kind: ArrivalKind, rates: &[f64]) -> Result<()> {
        let ok = rates.iter().all(|&r| match kind {
            ArrivalKind::Bernoulli => (0.0..=1.0).contains(&r),
            ArrivalKind::Poisson { .. } => r >= 0.0 && r.is_finite(),
        });
        if ok && !rates.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("arrival rates {rates:?} for {kind:?}")))
        }
    }

    pub fn kind(&self) -> ArrivalKind {
        self.kind
    }

    pub fn lanes(&self) -> usize {
        self.phases[0].1.len()
    }

    pub fn rates_at(&self, step: u64) -> &[f64] {
        let i = self.phases.partition_point(|p| p.0 <= step);
        &self.phases[i.saturating_sub(1)].1
    }

    /// Draws one arrival count per lane, in lane order.
    pub fn sample<R: Rng>(&self, step: u64, rng: &mut R, out: &mut [u32]) {
        for (slot, &r) in out.iter_mut().zip(self.rates_at(step)) {
            *slot = match self.kind {
                ArrivalKind::Bernoulli => rng.gen_bool(r) as u32,
                ArrivalKind::Poisson { cap } => match Poisson::new(r) {
                    Ok(d) => (d.sample(rng) as u32).min(cap),
                    Err(_) => 0,
                },
            };
        }
    }
}

/// Alternates NS and EW every `phase_length` steps, starting with NS.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixedPhaseController {
    phase_length: u64,
}

impl FixedPhaseController {
    pub fn new(phase_length: u64) -> Result<Self> {
        if phase_length == 0 {
            return Err(Error::InvalidParameter("phase length must be at least 1".into()));
        }
        Ok(Self { phase_length })
    }

    pub fn phase_length(&self) -> u64 {
        self.phase_length
    }

    pub fn command_at(&self, clock: u64) -> u8 {
        if (clock / self.phase_length) % 2 == 0 {
            NS
        } else {
            EW
        }
    }
}

impl Default for FixedPhaseController {
    fn default() -> Self {
        Self { phase_length: 20 }
    }
}

impl Controller for FixedPhaseController {
    fn command(&self, _node: usize, step: u64) -> u8 {
        self.command_at(step)
    }
}

/// Sum over the last `min(step + 1, window)` entries of `totals` up to and
/// including `step`.
pub fn waiting_metric(totals: &[u64], step: usize, window: usize) -> u64 {
    let lo = (step + 1).saturating_sub(window);
    totals[lo..=step].iter().sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TemplateKind {
    /// Every lane moves by at most `delta` in either direction.
    Symmetric { delta: u32 },
    /// Served lanes lose `min(discharge, q)`, every lane gains up to
    /// `arrivals`; `slack` loosens both ends.
    Directed { discharge: u32, arrivals: u32, slack: u32 },
}

/// Successor structure of queue lengths plus the next controller command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueueTemplate {
    lanes: usize,
    commands: u8,
    kind: TemplateKind,
}

impl QueueTemplate {
    pub fn new(lanes: usize, commands: u8, kind: TemplateKind) -> Self {
        Self { lanes, commands, kind }
    }

    /// Deltas in `{-1, 0, +1}` per lane, two commands.
    pub fn symmetric() -> Self {
        Self::new(LANES, 2, TemplateKind::Symmetric { delta: 1 })
    }

    /// Exact support of the Bernoulli simulator with unit discharge.
    pub fn directed() -> Self {
        Self::new(
            LANES,
            2,
            TemplateKind::Directed {
                discharge: 1,
                arrivals: 1,
                slack: 0,
            },
        )
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    fn range(&self, s: &StateVector, a: ActionId, lane: usize) -> (i64, i64) {
        let q = s.vars[lane] as i64;
        let (lo, hi) = match self.kind {
            TemplateKind::Symmetric { delta } => (-(delta as i64), delta as i64),
            TemplateKind::Directed {
                discharge,
                arrivals,
                slack,
            } => {
                let base = if lane < LANES && serves(a.0, lane) {
                    -(q.min(discharge as i64))
                } else {
                    0
                };
                (base - slack as i64, base + (arrivals + slack) as i64)
            }
        };
        (lo.max(-q), hi)
    }
}

impl SuccessorTemplate for QueueTemplate {
    fn command_count(&self) -> usize {
        self.commands as usize
    }

    fn action_count(&self) -> usize {
        self.commands as usize
    }

    fn actions(&self, _s: &StateVector) -> Vec<ActionId> {
        (0..self.commands).map(ActionId).collect()
    }

    fn candidates(&self, s: &StateVector, a: ActionId) -> Vec<StateVector> {
        let ranges: Vec<(i64, i64)> = (0..self.lanes).map(|i| self.range(s, a, i)).collect();
        let mut out = Vec::with_capacity(self.candidate_count(s, a));
        let mut cur: Vars = s
            .vars
            .iter()
            .zip(&ranges)
            .map(|(&q, r)| (q as i64 + r.0) as u32)
            .collect();
        loop {
            for c in 0..self.commands {
                out.push(StateVector {
                    vars: cur.clone(),
                    ctrl: c,
                });
            }
            // odometer increment, last lane fastest
            let mut i = self.lanes;
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                let hi = (s.vars[i] as i64 + ranges[i].1) as u32;
                if cur[i] < hi {
                    cur[i] += 1;
                    break;
                }
                cur[i] = (s.vars[i] as i64 + ranges[i].0) as u32;
            }
        }
    }

    fn candidate_index(&self, s: &StateVector, a: ActionId, succ: &StateVector) -> Option<usize> {
        if succ.vars.len() != self.lanes || s.vars.len() != self.lanes || succ.ctrl >= self.commands {
            return None;
        }
        let mut idx = 0usize;
        for i in 0..self.lanes {
            let (lo, hi) = self.range(s, a, i);
            let d = succ.vars[i] as i64 - s.vars[i] as i64;
            if d < lo || d > hi {
                return None;
            }
            idx = idx * (hi - lo + 1) as usize + (d - lo) as usize;
        }
        Some(idx * self.commands as usize + succ.ctrl as usize)
    }

    fn candidate_count(&self, s: &StateVector, a: ActionId) -> usize {
        (0..self.lanes)
            .map(|i| {
                let (lo, hi) = self.range(s, a, i);
                (hi - lo + 1) as usize
            })
            .product::<usize>()
            * self.commands as usize
    }

    fn widened(&self) -> Option<Arc<dyn SuccessorTemplate>> {
        let kind = match self.kind {
            TemplateKind::Symmetric { delta } => TemplateKind::Symmetric { delta: delta + 1 },
            TemplateKind::Directed {
                discharge,
                arrivals,
                slack,
            } => TemplateKind::Directed {
                discharge,
                arrivals,
                slack: slack + 1,
            },
        };
        Some(Arc::new(Self { kind, ..*self }))
    }
}

/// `|max(north, south) - max(east, west)|`
pub fn queue_imbalance(s: &StateVector, _a: ActionId) -> f64 {
    let ns = s.vars[NORTH].max(s.vars[SOUTH]);
    let ew = s.vars[EAST].max(s.vars[WEST]);
    ns.abs_diff(ew) as f64
}

/// Constant `c2` whenever the action differs from the embedded command.
#[derive(Clone, Copy, Debug)]
pub struct InterferencePenalty(pub f64);

impl CostFunction for InterferencePenalty {
    fn cost(&self, s: &StateVector, a: ActionId) -> f64 {
        if a == s.keep_action() {
            0.0
        } else {
            self.0
        }
    }
}

pub fn traffic_costs(c2: f64, gamma: f64) -> Result<CostModel> {
    CostModel::new(Arc::new(queue_imbalance), Arc::new(InterferencePenalty(c2)), gamma)
}

/// Closed-form transition model of one intersection with Bernoulli arrivals
/// and a controller that switches with fixed probability per step.
#[derive(Clone, Debug)]
pub struct QueueModel {
    pub rates: [f64; LANES],
    pub discharge: u32,
    pub switch_probability: f64,
}

impl QueueModel {
    pub fn uniform(rate: f64, phase_length: u64) -> Self {
        Self {
            rates: [rate; LANES],
            discharge: 1,
            switch_probability: 1.0 / phase_length as f64,
        }
    }
}

impl TransitionModel for QueueModel {
    fn command_count(&self) -> usize {
        2
    }

    fn action_count(&self) -> usize {
        2
    }

    fn actions(&self, _s: &StateVector) -> Vec<ActionId> {
        vec![ActionId(NS), ActionId(EW)]
    }

    fn successors(&self, s: &StateVector, a: ActionId) -> Result<Vec<(StateVector, f64)>> {
        let mut queues = [0u32; LANES];
        queues.copy_from_slice(&s.vars[..LANES]);
        let dep = departures(&queues, a, self.discharge);
        let mut out = Vec::with_capacity(32);
        for mask in 0..(1u32 << LANES) {
            let mut p = 1.0;
            let mut vars: Vars = smallvec![0; LANES];
            for lane in 0..LANES {
                let arrive = mask >> (LANES - 1 - lane) & 1;
                p *= if arrive == 1 {
                    self.rates[lane]
                } else {
                    1.0 - self.rates[lane]
                };
                vars[lane] = queues[lane] - dep[lane] + arrive;
            }
            if p == 0.0 {
                continue;
            }
            for (ctrl, q) in [
                (s.ctrl, 1.0 - self.switch_probability),
                (1 - s.ctrl, self.switch_probability),
            ] {
                if q > 0.0 {
                    out.push((
                        StateVector {
                            vars: vars.clone(),
                            ctrl,
                        },
                        p * q,
                    ));
                }
            }
        }
        Ok(out)
    }
}

/// A single intersection driven by an arrival model.
#[derive(Clone, Debug)]
pub struct SingleIntersection {
    pub state: IntersectionState,
    arrivals: ArrivalModel,
    discharge: u32,
    rng: ChaCha8Rng,
    scratch: [u32; LANES],
}

impl SingleIntersection {
    pub fn new(arrivals: ArrivalModel, discharge: u32, seed: u64) -> Result<Self> {
        if arrivals.lanes() != LANES || discharge == 0 {
            return Err(Error::InvalidParameter(
                "intersection needs 4 lanes and discharge >= 1".into(),
            ));
        }
        Ok(Self {
            state: IntersectionState::default(),
            arrivals,
            discharge,
            rng: ChaCha8Rng::seed_from_u64(seed),
            scratch: [0; LANES],
        })
    }

    pub fn last_arrivals(&self) -> &[u32; LANES] {
        &self.scratch
    }
}

impl Environment for SingleIntersection {
    fn nodes(&self) -> usize {
        1
    }

    fn observe(&self, _node: usize) -> Vars {
        self.state.vars()
    }

    fn step(&mut self, actions: &[ActionId]) {
        self.arrivals.sample(self.state.clock, &mut self.rng, &mut self.scratch);
        self.state = sim_step(&self.state, actions[0], &self.scratch, self.discharge);
    }
}

/// Entry rates per direction and through-probabilities from a given step on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutingPhase {
    pub from_step: u64,
    /// Arrival probability at boundary entry lanes, per lane direction.
    pub entry: [f64; LANES],
    /// Probability that a departing vehicle continues into the next
    /// intersection instead of leaving the network, per lane direction.
    pub through: [f64; LANES],
}

/// A `rows x cols` grid of intersections.
///
/// A vehicle leaving the north lane (heading south) at `(r, c)` may join the
/// north lane at `(r + 1, c)`; the other directions are analogous. Entry
/// lanes on the boundary receive external Bernoulli arrivals.
#[derive(Clone, Debug)]
pub struct GridNetwork {
    rows: usize,
    cols: usize,
    pub queues: Vec<[u32; LANES]>,
    phases: Vec<RoutingPhase>,
    discharge: u32,
    clock: u64,
    rng: ChaCha8Rng,
}

impl GridNetwork {
    pub fn new(rows: usize, cols: usize, phases: Vec<RoutingPhase>, discharge: u32, seed: u64) -> Result<Self> {
        let valid = rows >= 1
            && cols >= 1
            && discharge >= 1
            && !phases.is_empty()
            && phases[0].from_step == 0
            && phases.windows(2).all(|w| w[0].from_step < w[1].from_step)
            && phases
                .iter()
                .all(|p| p.entry.iter().chain(&p.through).all(|x| (0.0..=1.0).contains(x)));
        if !valid {
            return Err(Error::InvalidParameter("grid routing phases".into()));
        }
        Ok(Self {
            rows,
            cols,
            queues: vec![[0; LANES]; rows * cols],
            phases,
            discharge,
            clock: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    fn phase(&self) -> &RoutingPhase {
        let i = self.phases.partition_point(|p| p.from_step <= self.clock);
        &self.phases[i - 1]
    }

    /// Node downstream of `lane` at `node`, if inside the grid.
    pub fn downstream(&self, node: usize, lane: usize) -> Option<usize> {
        let (r, c) = (node / self.cols, node % self.cols);
        match lane {
            NORTH if r + 1 < self.rows => Some(node + self.cols),
            SOUTH if r > 0 => Some(node - self.cols),
            EAST if c > 0 => Some(node - 1),
            WEST if c + 1 < self.cols => Some(node + 1),
            _ => None,
        }
    }

    /// Per-lane arrival rates at `node` under the first routing phase,
    /// assuming every upstream lane discharges all its arrivals.
    pub fn nominal_rates(&self, node: usize) -> [f64; LANES] {
        let phase = &self.phases[0];
        let mut rates = [0.0; LANES];
        for (lane, rate) in rates.iter_mut().enumerate() {
            let mut at = node;
            let mut factor = 1.0;
            while !self.is_entry(at, lane) {
                at = self.upstream(at, lane);
                factor *= phase.through[lane];
            }
            *rate = (phase.entry[lane] * factor).min(1.0);
        }
        rates
    }

    fn upstream(&self, node: usize, lane: usize) -> usize {
        match lane {
            NORTH => node - self.cols,
            SOUTH => node + self.cols,
            EAST => node + 1,
            _ => node - 1,
        }
    }

    /// Whether `lane` at `node` has no upstream neighbour.
    pub fn is_entry(&self, node: usize, lane: usize) -> bool {
        let (r, c) = (node / self.cols, node % self.cols);
        match lane {
            NORTH => r == 0,
            SOUTH => r + 1 == self.rows,
            EAST => c + 1 == self.cols,
            _ => c == 0,
        }
    }
}

impl Environment for GridNetwork {
    fn nodes(&self) -> usize {
        self.rows * self.cols
    }

    fn observe(&self, node: usize) -> Vars {
        Vars::from_slice(&self.queues[node])
    }

    fn step(&mut self, actions: &[ActionId]) {
        let phase = self.phase().clone();
        let n = self.nodes();
        let mut inflow = vec![[0u32; LANES]; n];
        let mut next = self.queues.clone();
        for node in 0..n {
            let dep = departures(&self.queues[node], actions[node], self.discharge);
            for lane in 0..LANES {
                next[node][lane] -= dep[lane];
                if let Some(down) = self.downstream(node, lane) {
                    for _ in 0..dep[lane] {
                        if self.rng.gen_bool(phase.through[lane]) {
                            inflow[down][lane] += 1;
                        }
                    }
                }
            }
        }
        for node in 0..n {
            for lane in 0..LANES {
                let external = self.is_entry(node, lane) && self.rng.gen_bool(phase.entry[lane]);
                next[node][lane] += inflow[node][lane] + external as u32;
            }
        }
        self.queues = next;
        self.clock += 1;
    }
}
