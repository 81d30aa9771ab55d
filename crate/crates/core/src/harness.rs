//! Experiment runner: composes simulator, controller and shields, then writes
//! the per-step trace, a summary and the cut-off evolution table.
//!
//! Trace columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `step`, `node` | time step and intersection index |
//! | `q0`..`q3` | queues N, S, E, W before the step |
//! | `command` | controller command (0 = NS, 1 = EW) |
//! | `action` | command forwarded by the shield |
//! | `interfered` | 1 iff `action != command` |
//! | `waiting` | queue sum over the last 100 steps at this node |
//! | `interference_ratio` | share of interfering steps over the same window |
//! | `k` | cut-off in use, `;`-separated |
//! | `shield_build` | step at which the deployed shield was built |
//! | `event` | `;`-separated events of this step |

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::abstraction::{build_abstraction, BuildConfig, CutoffFunction};
use crate::config::{ExperimentConfig, NetworkConfig, PriorKind, ScenarioConfig};
use crate::error::{Error, Result};
use crate::estimator::{DirichletTable, LambdaSchedule, ModelPrior};
use crate::mdp::{induce_chain, long_run_average_cost, StateVector};
use crate::shield::{run_loop, Environment, EventKind, RunConfig, RunOutcome, ShieldAgent, StepRecord, TraceSink};
use crate::solver::{solve_mean_payoff, SolverConfig};
use crate::traffic::{
    traffic_costs, FixedPhaseController, GridNetwork, QueueModel, QueueTemplate, SingleIntersection, TemplateKind,
    LANES, NS,
};

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CUTOFF_FILE: &str = "cutoffs.csv";
pub const BUCKET_SIZE: u64 = 500;

/// Cut-off values of the synthesis benchmark.
pub const BENCH_K_VALUES: [u32; 11] = [4, 5, 6, 7, 8, 9, 10, 15, 20, 25, 30];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub node: usize,
    pub q0: u32,
    pub q1: u32,
    pub q2: u32,
    pub q3: u32,
    pub command: u8,
    pub action: u8,
    pub interfered: u8,
    pub waiting: u64,
    pub interference_ratio: f64,
    pub k: String,
    pub shield_build: Option<u64>,
    pub event: String,
}

impl TraceRow {
    pub fn from_record(r: &StepRecord) -> Self {
        let q = |i: usize| r.vars.get(i).copied().unwrap_or(0);
        Self {
            step: r.step,
            node: r.node,
            q0: q(0),
            q1: q(1),
            q2: q(2),
            q3: q(3),
            command: r.command,
            action: r.action.0,
            interfered: r.interfered as u8,
            waiting: r.waiting,
            interference_ratio: r.interference_ratio,
            k: join(r.cutoff.values()),
            shield_build: r.shield_build,
            event: r.events.iter().map(|e| e.as_str()).collect::<Vec<_>>().join(";"),
        }
    }

    pub fn has_event(&self, kind: EventKind) -> bool {
        self.event.split(';').any(|e| e == kind.as_str())
    }
}

fn join(values: &[u32]) -> String {
    values.iter().map(u32::to_string).collect::<Vec<_>>().join(";")
}

/// Statistics that are recomputable from the trace alone.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub steps: u64,
    pub nodes: usize,
    pub bucket_size: u64,
    /// Mean over each bucket of the network-wide waiting metric.
    pub waiting_buckets: Vec<f64>,
    pub interference_ratio: f64,
    pub interference_events: u64,
    pub rebuilds: u64,
    pub failed_rebuilds: u64,
    pub skipped_rebuilds: u64,
    pub changes_detected: u64,
    pub widenings: u64,
}

impl TraceStats {
    /// Mean waiting metric over the buckets covering `[from, to)`; both ends
    /// must be bucket boundaries.
    pub fn mean_waiting(&self, from: u64, to: u64) -> Option<f64> {
        if from % self.bucket_size != 0 || to % self.bucket_size != 0 || to <= from {
            return None;
        }
        let b = self
            .waiting_buckets
            .get((from / self.bucket_size) as usize..(to / self.bucket_size) as usize)?;
        Some(b.iter().sum::<f64>() / b.len() as f64)
    }
}

/// Accumulates [`TraceStats`] from rows ordered by step.
#[derive(Debug)]
pub struct StatsBuilder {
    stats: TraceStats,
    bucket_sum: u64,
    bucket_steps: u64,
    last_step: Option<u64>,
    rows: u64,
    max_node: usize,
}

impl StatsBuilder {
    pub fn new(bucket_size: u64) -> Self {
        Self {
            stats: TraceStats {
                bucket_size,
                ..TraceStats::default()
            },
            bucket_sum: 0,
            bucket_steps: 0,
            last_step: None,
            rows: 0,
            max_node: 0,
        }
    }

    pub fn push(&mut self, row: &TraceRow) {
        if self.last_step != Some(row.step) {
            if self.bucket_steps == self.stats.bucket_size {
                self.close_bucket();
            }
            self.bucket_steps += 1;
            self.stats.steps += 1;
            self.last_step = Some(row.step);
        }
        self.bucket_sum += row.waiting;
        self.rows += 1;
        self.max_node = self.max_node.max(row.node);
        self.stats.interference_events += row.interfered as u64;
        for e in row.event.split(';') {
            match e {
                "rebuild" => self.stats.rebuilds += 1,
                "rebuild_failed" => self.stats.failed_rebuilds += 1,
                "skip" => self.stats.skipped_rebuilds += 1,
                "change" => self.stats.changes_detected += 1,
                "widen" => self.stats.widenings += 1,
                _ => {}
            }
        }
    }

    fn close_bucket(&mut self) {
        self.stats
            .waiting_buckets
            .push(self.bucket_sum as f64 / self.bucket_steps as f64);
        self.bucket_sum = 0;
        self.bucket_steps = 0;
    }

    pub fn finish(mut self) -> TraceStats {
        if self.bucket_steps > 0 {
            self.close_bucket();
        }
        if self.rows > 0 {
            self.stats.nodes = self.max_node + 1;
            self.stats.interference_ratio = self.stats.interference_events as f64 / self.rows as f64;
        }
        self.stats
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub shield: bool,
    pub c2: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Wall time spent building and solving abstractions.
    pub synthesis_seconds: f64,
    #[serde(flatten)]
    pub stats: TraceStats,
}

/// Cut-off values of every node at step 0 and at each update boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct CutoffRow {
    pub step: u64,
    pub cutoffs: Vec<CutoffFunction>,
}

#[derive(Debug)]
pub struct RunReport {
    pub summary: RunSummary,
    pub cutoffs: Vec<CutoffRow>,
    pub outcome: RunOutcome,
    pub output_dir: Option<PathBuf>,
    /// Final estimator of every node.
    pub estimators: Vec<DirichletTable>,
    /// The full trace when no output directory is configured.
    pub rows: Vec<TraceRow>,
}

struct HarnessSink {
    csv: Option<csv::Writer<BufWriter<File>>>,
    keep: bool,
    rows: Vec<TraceRow>,
    stats: StatsBuilder,
    cutoffs: Vec<CutoffRow>,
    nodes: usize,
}

impl TraceSink for HarnessSink {
    fn record(&mut self, rec: &StepRecord) -> Result<()> {
        let row = TraceRow::from_record(rec);
        if let Some(w) = &mut self.csv {
            w.serialize(&row)?;
        }
        self.stats.push(&row);
        let boundary = rec.step == 0
            || rec
                .events
                .iter()
                .any(|e| matches!(e, EventKind::Rebuild | EventKind::RebuildFailed | EventKind::Skip));
        if boundary {
            match self.cutoffs.last_mut() {
                Some(last) if last.step == rec.step => last.cutoffs[rec.node] = rec.cutoff.clone(),
                _ => self.cutoffs.push(CutoffRow {
                    step: rec.step,
                    cutoffs: vec![rec.cutoff.clone(); self.nodes],
                }),
            }
        }
        if self.keep {
            self.rows.push(row);
        }
        Ok(())
    }
}

/// The pieces a run is composed of.
pub struct Setup {
    pub scenario: ScenarioConfig,
    pub env: Box<dyn Environment>,
    pub controller: FixedPhaseController,
    pub agents: Vec<ShieldAgent>,
    pub run: RunConfig,
}

/// Successor template of the configured kind, using the scenario discharge.
pub fn template_for(cfg: &ExperimentConfig, scn: &ScenarioConfig) -> QueueTemplate {
    let kind = match cfg.template {
        TemplateKind::Directed { arrivals, slack, .. } => TemplateKind::Directed {
            discharge: scn.discharge,
            arrivals,
            slack,
        },
        k => k,
    };
    QueueTemplate::new(LANES, 2, kind)
}

/// Fresh estimator of `node` as configured.
pub fn make_estimator(cfg: &ExperimentConfig, scn: &ScenarioConfig, node: usize) -> Result<DirichletTable> {
    let schedule = match cfg.lambda_horizon {
        Some(horizon) => LambdaSchedule::Harmonic {
            base: scn.lambda,
            horizon,
        },
        None => LambdaSchedule::Constant(scn.lambda),
    };
    let table = DirichletTable::new(Arc::new(template_for(cfg, scn)), schedule, cfg.prior_strength)?;
    Ok(match cfg.prior {
        PriorKind::Symmetric => table,
        PriorKind::InitialModel => table.with_prior_model(Arc::new(ModelPrior(initial_model(scn, node)?))),
    })
}

/// Transition model of `node` from the initial arrival rates and the
/// controller's phase length.
pub fn initial_model(scn: &ScenarioConfig, node: usize) -> Result<QueueModel> {
    let rates: [f64; LANES] = match &scn.network {
        NetworkConfig::Single { arrivals } => {
            let m = arrivals.model()?;
            let mut r = [0.0; LANES];
            for (x, y) in r.iter_mut().zip(m.rates_at(0)) {
                *x = y.min(1.0);
            }
            r
        }
        NetworkConfig::Grid { rows, cols, phases } => {
            GridNetwork::new(*rows, *cols, phases.clone(), scn.discharge, 0)?.nominal_rates(node)
        }
    };
    Ok(QueueModel {
        rates,
        discharge: scn.discharge,
        switch_probability: 1.0 / scn.phase_length as f64,
    })
}

pub fn run_config(cfg: &ExperimentConfig, scn: &ScenarioConfig) -> RunConfig {
    RunConfig {
        steps: scn.steps,
        shield: cfg.shield,
        period: cfg.period,
        warmup: cfg.warmup,
        change_gate: cfg.change_gate,
        cusum_drift: cfg.cusum_drift,
        cusum_threshold: cfg.cusum_threshold,
        padding: cfg.padding,
        metric_window: cfg.metric_window,
        build: BuildConfig {
            max_transitions: cfg.max_transitions,
            build_step: 0,
        },
        solver: SolverConfig {
            eps: cfg.eps,
            max_sweeps: cfg.max_sweeps,
            ..SolverConfig::default()
        },
    }
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let scenario = cfg.resolve_scenario()?;
        let seed = cfg.seed.unwrap_or(0);
        let env: Box<dyn Environment> = match &scenario.network {
            NetworkConfig::Single { arrivals } => {
                Box::new(SingleIntersection::new(arrivals.model()?, scenario.discharge, seed)?)
            }
            NetworkConfig::Grid { rows, cols, phases } => Box::new(GridNetwork::new(
                *rows,
                *cols,
                phases.clone(),
                scenario.discharge,
                seed,
            )?),
        };
        let run = run_config(cfg, &scenario);
        let cutoff = CutoffFunction::new(scenario.initial_cutoff.clone())?;
        let agents = (0..env.nodes())
            .map(|n| ShieldAgent::new(make_estimator(cfg, &scenario, n)?, cutoff.clone(), &run))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            controller: FixedPhaseController::new(scenario.phase_length)?,
            scenario,
            env,
            agents,
            run,
        })
    }
}

/// Runs one experiment. With an output directory, writes the trace, the
/// summary and the cut-off table there; a trace cut short by an error is
/// flushed before the error is returned.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    let mut setup = Setup::new(cfg)?;
    let scn = setup.scenario.clone();
    let out = cfg.output_dir.clone();
    let csv = match &out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(csv::Writer::from_writer(BufWriter::new(File::create(
                dir.join(TRACE_FILE),
            )?)))
        }
        None => None,
    };
    let mut sink = HarnessSink {
        csv,
        keep: out.is_none(),
        rows: Vec::new(),
        stats: StatsBuilder::new(BUCKET_SIZE),
        cutoffs: Vec::new(),
        nodes: setup.env.nodes(),
    };
    let cm = traffic_costs(scn.c2, scn.gamma)?;
    let result = run_loop(
        setup.env.as_mut(),
        &setup.controller,
        &mut setup.agents,
        &cm,
        &setup.run,
        &mut sink,
    );
    if let Some(w) = &mut sink.csv {
        w.flush()?;
    }
    let outcome = result?;
    let summary = RunSummary {
        scenario: scn.name.clone(),
        seed: cfg.seed.unwrap_or(0),
        shield: cfg.shield,
        c2: scn.c2,
        gamma: scn.gamma,
        lambda: scn.lambda,
        synthesis_seconds: outcome.synthesis_seconds,
        stats: sink.stats.finish(),
    };
    if let Some(dir) = &out {
        let mut f = BufWriter::new(File::create(dir.join(SUMMARY_FILE))?);
        serde_json::to_writer_pretty(&mut f, &summary)?;
        writeln!(f)?;
        write_cutoff_table(&sink.cutoffs, BufWriter::new(File::create(dir.join(CUTOFF_FILE))?))?;
    }
    Ok(RunReport {
        summary,
        cutoffs: sink.cutoffs,
        outcome,
        output_dir: out,
        estimators: setup.agents.into_iter().map(|a| a.estimator).collect(),
        rows: sink.rows,
    })
}

/// One line per update boundary, one column per node.
pub fn write_cutoff_table<W: Write>(rows: &[CutoffRow], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    if let Some(first) = rows.first() {
        let mut header = vec!["step".to_string()];
        header.extend((0..first.cutoffs.len()).map(|n| format!("k_node{n}")));
        w.write_record(&header)?;
    }
    for r in rows {
        let mut rec = vec![r.step.to_string()];
        rec.extend(r.cutoffs.iter().map(|k| k.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Recomputes the trace statistics from a trace file.
pub fn stats_from_csv(path: &Path) -> Result<TraceStats> {
    let mut r = csv::Reader::from_path(path)?;
    let mut b = StatsBuilder::new(BUCKET_SIZE);
    for row in r.deserialize() {
        b.push(&row?);
    }
    Ok(b.finish())
}

/// Label of a sweep variant, also used as its output subdirectory.
pub fn variant_label(scn: &ScenarioConfig) -> String {
    format!("c2={}_gamma={}_lambda={}", scn.c2, scn.gamma, scn.lambda)
}

/// Runs every combination of the sweep lists with the same seed.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<(String, RunReport)>> {
    let opts = |v: &Vec<f64>| -> Vec<Option<f64>> {
        if v.is_empty() {
            vec![None]
        } else {
            v.iter().copied().map(Some).collect()
        }
    };
    let mut out = Vec::new();
    for c2 in opts(&cfg.sweep.c2) {
        for gamma in opts(&cfg.sweep.gamma) {
            for lambda in opts(&cfg.sweep.lambda) {
                let mut v = cfg.clone();
                v.c2 = c2.or(cfg.c2);
                v.gamma = gamma.or(cfg.gamma);
                v.lambda = lambda.or(cfg.lambda);
                let label = variant_label(&v.resolve_scenario()?);
                v.output_dir = cfg.output_dir.as_ref().map(|d| d.join(&label));
                out.push((label, run(&v)?));
            }
        }
    }
    Ok(out)
}

/// Long-run averages of both cost components under the policy optimal for
/// one weighting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub gamma: f64,
    pub value: f64,
    pub performance: f64,
    pub interference: f64,
}

/// Solves the initial abstraction of node 0 once per weighting. Uses
/// `estimator` if given, otherwise a fresh one as configured.
pub fn sweep_gamma(
    cfg: &ExperimentConfig,
    gammas: &[f64],
    estimator: Option<&DirichletTable>,
) -> Result<Vec<ParetoPoint>> {
    let scn = cfg.resolve_scenario()?;
    let fresh;
    let est = match estimator {
        Some(e) => e,
        None => {
            fresh = make_estimator(cfg, &scn, 0)?;
            &fresh
        }
    };
    let k = CutoffFunction::new(scn.initial_cutoff.clone())?;
    let start = StateVector::new(&[0; LANES], NS);
    let build = BuildConfig {
        max_transitions: cfg.max_transitions,
        build_step: 0,
    };
    let abs = build_abstraction(est, &k, &start, &build)?;
    let solver = SolverConfig {
        eps: cfg.eps,
        max_sweeps: cfg.max_sweeps,
        ..SolverConfig::default()
    };
    let mut points = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let cm = traffic_costs(scn.c2, gamma)?;
        let sol = solve_mean_payoff(abs.mdp(), &cm, &solver)?;
        let policy = sol.policy(abs.mdp());
        let performance = long_run_average_cost(&induce_chain(abs.mdp(), &policy, &cm.with_gamma(1.0)?)?)?;
        let interference = long_run_average_cost(&induce_chain(abs.mdp(), &policy, &cm.with_gamma(0.0)?)?)?;
        points.push(ParetoPoint {
            gamma,
            value: sol.value,
            performance,
            interference,
        });
    }
    Ok(points)
}

/// True when, ordered by weighting, performance cost never increases and
/// interference cost never decreases (up to `tol`).
pub fn pareto_is_monotone(points: &[ParetoPoint], tol: f64) -> bool {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a.gamma.total_cmp(&b.gamma));
    p.windows(2)
        .all(|w| w[1].performance <= w[0].performance + tol && w[1].interference + tol >= w[0].interference)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub k: u32,
    pub states: usize,
    /// `(k + 1)^4 * 2`
    pub expected_states: u128,
    pub transitions: usize,
    pub build_seconds: f64,
    pub solve_seconds: f64,
    pub iterations: u64,
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    /// Arrival probability per lane and step.
    pub rate: f64,
    pub phase_length: u64,
    pub gamma: f64,
    pub c2: f64,
    pub solver: SolverConfig,
    pub max_transitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            rate: 0.375,
            phase_length: 20,
            gamma: 0.5,
            c2: 5.0,
            solver: SolverConfig::default(),
            max_transitions: usize::MAX,
        }
    }
}

/// Builds and solves the single-intersection abstraction with uniform
/// arrivals for every uniform cut-off in `ks`.
pub fn bench_synthesis(ks: &[u32], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let model = QueueModel::uniform(cfg.rate, cfg.phase_length);
    let cm = traffic_costs(cfg.c2, cfg.gamma)?;
    let start = StateVector::new(&[0; LANES], NS);
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let cutoff = CutoffFunction::uniform(LANES, k)?;
        let build = BuildConfig {
            max_transitions: cfg.max_transitions,
            build_step: 0,
        };
        let t = Instant::now();
        let abs = build_abstraction(&model, &cutoff, &start, &build)?;
        let build_seconds = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let sol = solve_mean_payoff(abs.mdp(), &cm, &cfg.solver)?;
        let solve_seconds = t.elapsed().as_secs_f64();
        rows.push(BenchRow {
            k,
            states: abs.num_states(),
            expected_states: cutoff.product_size(2),
            transitions: abs.mdp().num_transitions(),
            build_seconds,
            solve_seconds,
            iterations: sol.iterations,
        });
        // the abstraction is dropped here before the next, larger one
    }
    Ok(rows)
}

pub fn write_bench_table<W: Write>(rows: &[BenchRow], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
