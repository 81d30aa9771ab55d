//! The run-time proxy between a controller and its environment.
//!
//! Each step the shield reads the controller's command together with the
//! environment state, possibly overrides the command, and feeds the observed
//! transition to the estimator. Every `period` steps after a warm-up the
//! cut-off is refined, the abstraction rebuilt and a new shield deployed.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use rustc_hash::FxHashMap;

use crate::abstraction::{
    abstract_state, build_abstraction, refine_cutoff_padded, BuildConfig, CutoffFunction, ObservationWindow,
};
use crate::error::{Error, Result};
use crate::estimator::DirichletTable;
use crate::mdp::{ActionId, CostModel, StateVector, Vars};
use crate::solver::{extract_shield, solve_mean_payoff_from, SolverConfig};

/// An optimal memoryless policy of an abstraction, keyed by abstract state.
#[derive(Clone, Debug)]
pub struct Shield {
    table: FxHashMap<StateVector, ActionId>,
    cutoff: CutoffFunction,
    build_step: u64,
}

impl Shield {
    pub fn new(table: FxHashMap<StateVector, ActionId>, cutoff: CutoffFunction, build_step: u64) -> Self {
        Self {
            table,
            cutoff,
            build_step,
        }
    }

    pub fn cutoff(&self) -> &CutoffFunction {
        &self.cutoff
    }

    pub fn build_step(&self) -> u64 {
        self.build_step
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Table entry for an already abstract state.
    pub fn lookup(&self, abstract_state: &StateVector) -> Option<ActionId> {
        self.table.get(abstract_state).copied()
    }

    /// The action for a concrete state; unknown states keep the command.
    pub fn decide(&self, concrete: &StateVector) -> ActionId {
        self.lookup(&abstract_state(concrete, &self.cutoff))
            .unwrap_or_else(|| concrete.keep_action())
    }

    /// Number of abstract states in which the shield overrides the command.
    pub fn override_count(&self) -> usize {
        self.table.iter().filter(|(s, a)| s.keep_action() != **a).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShieldDecision {
    pub action: ActionId,
    pub interfered: bool,
}

/// Passes `concrete` through `shield`, or through the identity when absent.
pub fn shield_step(shield: Option<&Shield>, concrete: &StateVector) -> ShieldDecision {
    let keep = concrete.keep_action();
    let action = shield.map_or(keep, |sh| sh.decide(concrete));
    ShieldDecision {
        action,
        interfered: action != keep,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InterferenceRecord {
    pub step: u64,
    pub command: u8,
    pub action: ActionId,
    pub interfered: bool,
}

/// Interference flags with a rolling ratio over the last `window` steps.
#[derive(Clone, Debug)]
pub struct InterferenceLog {
    recent: VecDeque<bool>,
    window: usize,
    in_window: usize,
    total: u64,
    interfered: u64,
}

impl InterferenceLog {
    pub fn new(window: usize) -> Self {
        let window = window.max(1);
        Self {
            recent: VecDeque::with_capacity(window),
            window,
            in_window: 0,
            total: 0,
            interfered: 0,
        }
    }

    pub fn record(&mut self, rec: &InterferenceRecord) {
        debug_assert_eq!(rec.interfered, rec.action.0 != rec.command);
        if self.recent.len() == self.window && self.recent.pop_front() == Some(true) {
            self.in_window -= 1;
        }
        self.recent.push_back(rec.interfered);
        self.in_window += rec.interfered as usize;
        self.total += 1;
        self.interfered += rec.interfered as u64;
    }

    /// Share of interfering steps among the most recent `window` steps.
    pub fn ratio(&self) -> f64 {
        if self.recent.is_empty() {
            0.0
        } else {
            self.in_window as f64 / self.recent.len() as f64
        }
    }

    pub fn total_ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.interfered as f64 / self.total as f64
        }
    }

    pub fn interference_count(&self) -> u64 {
        self.interfered
    }

    pub fn steps(&self) -> u64 {
        self.total
    }
}

/// Rebuild boundaries: `warmup`, `warmup + period`, ...
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpdateScheduler {
    period: u64,
    warmup: u64,
    next_update: u64,
}

impl UpdateScheduler {
    pub fn new(period: u64, warmup: u64) -> Result<Self> {
        if period == 0 {
            return Err(Error::InvalidParameter("update period must be at least 1".into()));
        }
        Ok(Self {
            period,
            warmup,
            next_update: warmup,
        })
    }

    pub fn period(&self) -> u64 {
        self.period
    }

    pub fn warmup(&self) -> u64 {
        self.warmup
    }

    pub fn next_update(&self) -> u64 {
        self.next_update
    }

    pub fn is_due(&self, step: u64) -> bool {
        step >= self.warmup && (step - self.warmup) % self.period == 0
    }

    /// Returns whether `step` is a boundary and advances past it.
    pub fn poll(&mut self, step: u64) -> bool {
        if step < self.next_update {
            return false;
        }
        let due = self.is_due(step);
        let passed = (step - self.warmup) / self.period + 1;
        self.next_update = self.warmup + passed * self.period;
        due
    }
}

impl Default for UpdateScheduler {
    fn default() -> Self {
        Self {
            period: 500,
            warmup: 1000,
            next_update: 1000,
        }
    }
}

/// Two-sided CUSUM per variable around means learned from an initial window.
#[derive(Clone, Debug)]
pub struct CusumDetector {
    drift: f64,
    threshold: f64,
    init_window: usize,
    seen: usize,
    sums: Vec<f64>,
    means: Vec<f64>,
    upper: Vec<f64>,
    lower: Vec<f64>,
}

impl CusumDetector {
    pub fn new(vars: usize, drift: f64, threshold: f64, init_window: usize) -> Result<Self> {
        if !(drift >= 0.0 && threshold > 0.0 && init_window >= 1) {
            return Err(Error::InvalidParameter(format!(
                "cusum drift {drift}, threshold {threshold}, window {init_window}"
            )));
        }
        Ok(Self {
            drift,
            threshold,
            init_window,
            seen: 0,
            sums: vec![0.0; vars],
            means: vec![0.0; vars],
            upper: vec![0.0; vars],
            lower: vec![0.0; vars],
        })
    }

    pub fn is_active(&self) -> bool {
        self.seen >= self.init_window
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    fn reset(&mut self) {
        self.seen = 0;
        self.sums.iter_mut().for_each(|x| *x = 0.0);
        self.upper.iter_mut().for_each(|x| *x = 0.0);
        self.lower.iter_mut().for_each(|x| *x = 0.0);
    }

    /// Consumes one sample per variable; true when a change is detected.
    pub fn update(&mut self, x: &[u32]) -> bool {
        if !self.is_active() {
            for (s, &v) in self.sums.iter_mut().zip(x) {
                *s += v as f64;
            }
            self.seen += 1;
            if self.is_active() {
                let n = self.seen as f64;
                for (m, s) in self.means.iter_mut().zip(&self.sums) {
                    *m = s / n;
                }
            }
            return false;
        }
        let mut changed = false;
        for i in 0..self.means.len() {
            let v = x.get(i).copied().unwrap_or(0) as f64;
            self.upper[i] = (self.upper[i] + v - self.means[i] - self.drift).max(0.0);
            self.lower[i] = (self.lower[i] + self.means[i] - v - self.drift).max(0.0);
            changed |= self.upper[i] > self.threshold || self.lower[i] > self.threshold;
        }
        if changed {
            self.reset();
        }
        changed
    }
}

/// A multi-node environment; each node exposes its own integer variables.
pub trait Environment {
    fn nodes(&self) -> usize;
    fn observe(&self, node: usize) -> Vars;
    fn step(&mut self, actions: &[ActionId]);
}

pub trait Controller {
    fn command(&self, node: usize, step: u64) -> u8;
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub steps: u64,
    pub shield: bool,
    pub period: u64,
    pub warmup: u64,
    /// Skip rebuilds when neither CUSUM nor refinement saw a change.
    pub change_gate: bool,
    pub cusum_drift: f64,
    pub cusum_threshold: f64,
    /// Extra head-room for variables whose cut-off grew.
    pub padding: u32,
    /// Window of the waiting metric and the interference ratio.
    pub metric_window: usize,
    pub build: BuildConfig,
    pub solver: SolverConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            steps: 6000,
            shield: true,
            period: 500,
            warmup: 1000,
            change_gate: false,
            cusum_drift: 0.5,
            cusum_threshold: 10.0,
            padding: 0,
            metric_window: 100,
            build: BuildConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventKind {
    /// A new shield was deployed.
    Rebuild,
    /// Build or solve failed; the previous shield stays deployed.
    RebuildFailed,
    /// The change gate skipped a scheduled rebuild.
    Skip,
    /// CUSUM detected a change.
    Change,
    /// The successor template was widened after an unexpected successor.
    Widen,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Rebuild => "rebuild",
            EventKind::RebuildFailed => "rebuild_failed",
            EventKind::Skip => "skip",
            EventKind::Change => "change",
            EventKind::Widen => "widen",
        }
    }
}

/// One row of the run trace.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: u64,
    pub node: usize,
    pub vars: Vars,
    pub command: u8,
    pub action: ActionId,
    pub interfered: bool,
    /// Sum of the node's variables over the metric window.
    pub waiting: u64,
    pub interference_ratio: f64,
    pub cutoff: CutoffFunction,
    /// Build step of the deployed shield, if any.
    pub shield_build: Option<u64>,
    pub events: Vec<EventKind>,
}

pub trait TraceSink {
    fn record(&mut self, rec: &StepRecord) -> Result<()>;
}

impl TraceSink for Vec<StepRecord> {
    fn record(&mut self, rec: &StepRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Discards every record.
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _: &StepRecord) -> Result<()> {
        Ok(())
    }
}

/// Per-node shield state: estimator, cut-off, window and deployed shield.
#[derive(Debug)]
pub struct ShieldAgent {
    pub estimator: DirichletTable,
    cutoff: CutoffFunction,
    shield: Option<Arc<Shield>>,
    /// Relative values of the last solve, keyed by abstract state.
    bias: FxHashMap<StateVector, f64>,
    bias_cutoff: Option<CutoffFunction>,
    window: ObservationWindow,
    cusum: CusumDetector,
    change_pending: bool,
    log: InterferenceLog,
    waiting: VecDeque<u64>,
    waiting_sum: u64,
    metric_window: usize,
    observations: u64,
}

impl ShieldAgent {
    pub fn new(estimator: DirichletTable, cutoff: CutoffFunction, cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            cusum: CusumDetector::new(cutoff.len(), cfg.cusum_drift, cfg.cusum_threshold, cfg.period as usize)?,
            estimator,
            cutoff,
            shield: None,
            bias: FxHashMap::default(),
            bias_cutoff: None,
            window: ObservationWindow::new(cfg.period as usize),
            change_pending: false,
            log: InterferenceLog::new(cfg.metric_window),
            waiting: VecDeque::with_capacity(cfg.metric_window),
            waiting_sum: 0,
            metric_window: cfg.metric_window.max(1),
            observations: 0,
        })
    }

    pub fn cutoff(&self) -> &CutoffFunction {
        &self.cutoff
    }

    pub fn shield(&self) -> Option<&Shield> {
        self.shield.as_deref()
    }

    /// Deploys an externally computed shield.
    pub fn deploy(&mut self, shield: Shield) {
        self.shield = Some(Arc::new(shield));
    }

    pub fn window(&self) -> &ObservationWindow {
        &self.window
    }

    pub fn interference(&self) -> &InterferenceLog {
        &self.log
    }

    pub fn observations(&self) -> u64 {
        self.observations
    }

    /// Builds and solves the abstraction for the current cut-off and deploys
    /// the resulting shield.
    pub fn synthesize(&mut self, at: &StateVector, cm: &CostModel, cfg: &RunConfig, step: u64) -> Result<()> {
        let build = BuildConfig {
            build_step: step,
            ..cfg.build.clone()
        };
        let abs = build_abstraction(&self.estimator, &self.cutoff, at, &build)?;
        let warm = self.bias_cutoff.as_ref().map(|old| {
            abs.mdp()
                .states()
                .iter()
                .map(|s| self.bias.get(&abstract_state(s, old)).copied().unwrap_or(0.0))
                .collect()
        });
        let sol = solve_mean_payoff_from(abs.mdp(), cm, &cfg.solver, warm)?;
        self.shield = Some(Arc::new(extract_shield(&sol, &abs)));
        self.bias = abs
            .mdp()
            .states()
            .iter()
            .cloned()
            .zip(sol.bias.iter().copied())
            .collect();
        self.bias_cutoff = Some(self.cutoff.clone());
        Ok(())
    }

    /// Scheduled update: refine, then rebuild unless the change gate holds it
    /// back.
    fn scheduled_update(
        &mut self,
        at: &StateVector,
        cm: &CostModel,
        cfg: &RunConfig,
        step: u64,
    ) -> (EventKind, Option<Error>) {
        let (refined, grew) = refine_cutoff_padded(&self.cutoff, &self.window, cfg.padding);
        if cfg.change_gate && self.shield.is_some() && !grew && !self.change_pending {
            return (EventKind::Skip, None);
        }
        let previous = std::mem::replace(&mut self.cutoff, refined);
        match self.synthesize(at, cm, cfg, step) {
            Ok(()) => {
                self.change_pending = false;
                (EventKind::Rebuild, None)
            }
            Err(e) => {
                self.cutoff = previous;
                (EventKind::RebuildFailed, Some(e))
            }
        }
    }

    fn observe(&mut self, s: &StateVector, a: ActionId, next: &StateVector, events: &mut Vec<EventKind>) -> Result<()> {
        match self.estimator.observe(s, a, next) {
            Ok(_) => {}
            Err(Error::SuccessorNotInTemplate { .. }) => {
                let wider = self
                    .estimator
                    .template()
                    .widened()
                    .ok_or_else(|| Error::SuccessorNotInTemplate {
                        state: s.clone(),
                        action: a,
                        successor: next.clone(),
                    })?;
                self.estimator.reset_with_template(wider);
                events.push(EventKind::Widen);
                return self.observe(s, a, next, events);
            }
            Err(e) => return Err(e),
        }
        self.observations += 1;
        self.window.push(next.clone());
        if self.cusum.update(&next.vars) {
            self.change_pending = true;
            events.push(EventKind::Change);
        }
        Ok(())
    }

    fn push_waiting(&mut self, total: u64) -> u64 {
        if self.waiting.len() == self.metric_window {
            self.waiting_sum -= self.waiting.pop_front().unwrap_or(0);
        }
        self.waiting.push_back(total);
        self.waiting_sum += total;
        self.waiting_sum
    }
}

/// Aggregate facts about a finished run.
#[derive(Clone, Debug, Default)]
pub struct RunOutcome {
    pub steps: u64,
    pub rebuilds: u64,
    pub failed_rebuilds: u64,
    pub synthesis_seconds: f64,
    /// `(step, node, cut-off)` after every deployed rebuild, starting with
    /// the initial cut-off at step 0.
    pub cutoff_history: Vec<(u64, usize, CutoffFunction)>,
    /// `(step, node, error)` for every failed rebuild.
    pub failures: Vec<(u64, usize, String)>,
}

/// Runs the shielded control loop for `cfg.steps` steps.
///
/// With `cfg.shield` set, agents without a deployed shield synthesize one
/// from their initial abstraction before the first step.
pub fn run_loop(
    env: &mut dyn Environment,
    controller: &dyn Controller,
    agents: &mut [ShieldAgent],
    cm: &CostModel,
    cfg: &RunConfig,
    sink: &mut dyn TraceSink,
) -> Result<RunOutcome> {
    let nodes = env.nodes();
    if agents.len() != nodes {
        return Err(Error::InvalidParameter(format!(
            "{} shield agents for {nodes} nodes",
            agents.len()
        )));
    }
    let mut scheduler = UpdateScheduler::new(cfg.period, cfg.warmup)?;
    let mut outcome = RunOutcome::default();
    let mut states: Vec<StateVector> = (0..nodes)
        .map(|n| StateVector {
            vars: env.observe(n),
            ctrl: controller.command(n, 0),
        })
        .collect();
    let mut events: Vec<Vec<EventKind>> = vec![Vec::new(); nodes];
    for (n, agent) in agents.iter_mut().enumerate() {
        if cfg.shield && agent.shield.is_none() {
            let started = Instant::now();
            agent.synthesize(&states[n], cm, cfg, 0)?;
            outcome.synthesis_seconds += started.elapsed().as_secs_f64();
            outcome.rebuilds += 1;
            events[n].push(EventKind::Rebuild);
        }
        outcome.cutoff_history.push((0, n, agent.cutoff.clone()));
    }

    let mut decisions = Vec::with_capacity(nodes);
    let mut actions = Vec::with_capacity(nodes);
    for step in 0..cfg.steps {
        if cfg.shield && scheduler.poll(step) {
            for (n, agent) in agents.iter_mut().enumerate() {
                let started = Instant::now();
                let (ev, err) = agent.scheduled_update(&states[n], cm, cfg, step);
                outcome.synthesis_seconds += started.elapsed().as_secs_f64();
                match ev {
                    EventKind::Rebuild => {
                        outcome.rebuilds += 1;
                        outcome.cutoff_history.push((step, n, agent.cutoff.clone()));
                    }
                    EventKind::RebuildFailed => outcome.failed_rebuilds += 1,
                    _ => {}
                }
                if let Some(e) = err {
                    outcome.failures.push((step, n, e.to_string()));
                }
                events[n].push(ev);
            }
        }

        decisions.clear();
        actions.clear();
        for (n, agent) in agents.iter().enumerate() {
            let shield = if cfg.shield { agent.shield() } else { None };
            let d = shield_step(shield, &states[n]);
            decisions.push(d);
            actions.push(d.action);
        }
        env.step(&actions);

        for n in 0..nodes {
            let agent = &mut agents[n];
            let s = &states[n];
            let d = decisions[n];
            agent.log.record(&InterferenceRecord {
                step,
                command: s.ctrl,
                action: d.action,
                interfered: d.interfered,
            });
            let total: u64 = s.vars.iter().map(|&v| v as u64).sum();
            let waiting = agent.push_waiting(total);
            let next = StateVector {
                vars: env.observe(n),
                ctrl: controller.command(n, step + 1),
            };
            agent.observe(s, d.action, &next, &mut events[n])?;
            sink.record(&StepRecord {
                step,
                node: n,
                vars: s.vars.clone(),
                command: s.ctrl,
                action: d.action,
                interfered: d.interfered,
                waiting,
                interference_ratio: agent.log.ratio(),
                cutoff: agent.cutoff.clone(),
                shield_build: if cfg.shield {
                    agent.shield().map(Shield::build_step)
                } else {
                    None
                },
                events: std::mem::take(&mut events[n]),
            })?;
            states[n] = next;
        }
        outcome.steps += 1;
    }
    Ok(outcome)
}
