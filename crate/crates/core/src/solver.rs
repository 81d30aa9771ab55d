//! Weighted mean-payoff optimization on finite MDPs by relative value
//! iteration.
//!
//! The iteration runs on the aperiodicity-transformed MDP
//! `P' = tau * I + (1 - tau) * P` with unchanged costs. The transform keeps
//! stationary distributions, and therefore every policy's average cost, while
//! making span convergence independent of periodicity. Optimality is only
//! guaranteed for unichain MDPs.

use crate::abstraction::AbstractMdp;
use crate::error::{Error, Result};
use crate::mdp::{validate_mdp, ActionId, CostModel, Policy, SparseMdp};
use crate::shield::Shield;

#[derive(Clone, Debug)]
pub struct SolverConfig {
    /// Target accuracy of the optimal average cost.
    pub eps: f64,
    pub max_sweeps: u64,
    /// Self-loop weight of the aperiodicity transform.
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_sweeps: 1_000_000,
            damping: 0.5,
        }
    }
}

impl SolverConfig {
    pub fn with_eps(eps: f64) -> Self {
        Self { eps, ..Self::default() }
    }

    fn span_threshold(&self) -> f64 {
        if self.damping > 0.0 {
            self.eps * (1.0 - self.damping) / self.damping
        } else {
            self.eps
        }
    }
}

/// An optimal memoryless deterministic policy and its value.
#[derive(Clone, Debug)]
pub struct MeanPayoffSolution {
    /// Chosen action per state index of the solved MDP.
    pub choices: Vec<ActionId>,
    /// Optimal long-run average weighted cost.
    pub value: f64,
    pub iterations: u64,
    /// Span of the last value difference vector.
    pub residual: f64,
    /// Relative values of the transformed MDP, normalized at the initial state.
    pub bias: Vec<f64>,
}

impl MeanPayoffSolution {
    pub fn policy(&self, mdp: &SparseMdp) -> Policy {
        self.choices
            .iter()
            .enumerate()
            .map(|(i, &a)| (mdp.state(i).clone(), a))
            .collect()
    }
}

/// Minimizes the long-run average of `gamma * c1 + (1 - gamma) * c2`.
///
/// Among actions whose Q-value is within `eps` of the best, the action that
/// keeps the controller command wins; otherwise the lowest action index.
pub fn solve_mean_payoff(mdp: &SparseMdp, cm: &CostModel, cfg: &SolverConfig) -> Result<MeanPayoffSolution> {
    solve_mean_payoff_from(mdp, cm, cfg, None)
}

/// Like [`solve_mean_payoff`], starting the iteration from `initial_bias`
/// (indexed like the states of `mdp`) instead of zero.
pub fn solve_mean_payoff_from(
    mdp: &SparseMdp,
    cm: &CostModel,
    cfg: &SolverConfig,
    initial_bias: Option<Vec<f64>>,
) -> Result<MeanPayoffSolution> {
    if !(cfg.eps > 0.0) || !(0.0..1.0).contains(&cfg.damping) {
        return Err(Error::InvalidParameter(format!(
            "solver eps {} / damping {}",
            cfg.eps, cfg.damping
        )));
    }
    let violations = validate_mdp(mdp);
    if let Some(v) = violations.first() {
        return Err(Error::InvalidMdp(format!("{v} ({} violations)", violations.len())));
    }

    let n = mdp.num_states();
    let mut cost = Vec::with_capacity(mdp.num_choices());
    for s in 0..n {
        let st = mdp.state(s);
        for c in mdp.choices(s) {
            cost.push(cm.weighted(st, mdp.choice_action(c))?);
        }
    }

    let tau = cfg.damping;
    let mix = 1.0 - tau;
    let threshold = cfg.span_threshold();
    let reference = mdp.initial();
    let mut h = match initial_bias {
        Some(h) if h.len() == n && h.iter().all(|x| x.is_finite()) => h,
        Some(h) => {
            return Err(Error::InvalidParameter(format!(
                "initial bias of length {} for {n} states",
                h.len()
            )))
        }
        None => vec![0.0; n],
    };
    let mut next = vec![0.0; n];

    let q = |h: &[f64], c: usize| -> f64 {
        let (succ, prob) = mdp.row(c);
        let mut acc = 0.0;
        for (&t, &p) in succ.iter().zip(prob) {
            acc += p * h[t as usize];
        }
        cost[c] + mix * acc
    };

    let mut iterations = 0;
    let mut span = f64::INFINITY;
    let mut value = f64::NAN;
    while iterations < cfg.max_sweeps {
        iterations += 1;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in 0..n {
            let mut best = f64::INFINITY;
            for c in mdp.choices(s) {
                best = best.min(q(&h, c));
            }
            let v = best + tau * h[s];
            next[s] = v;
            let d = v - h[s];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        span = hi - lo;
        let r = next[reference];
        for (x, y) in h.iter_mut().zip(&next) {
            *x = y - r;
        }
        if !span.is_finite() {
            break;
        }
        if span < threshold {
            value = 0.5 * (hi + lo);
            break;
        }
    }
    if !(span < threshold) {
        return Err(Error::NoConvergence {
            iterations,
            residual: span,
        });
    }

    let mut choices = Vec::with_capacity(n);
    let mut qs: Vec<(ActionId, f64)> = Vec::new();
    for s in 0..n {
        qs.clear();
        qs.extend(mdp.choices(s).map(|c| (mdp.choice_action(c), q(&h, c))));
        let best = qs.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
        let keep = mdp.state(s).keep_action();
        let near = |e: &&(ActionId, f64)| e.1 <= best + cfg.eps;
        let chosen = if qs.iter().filter(near).any(|e| e.0 == keep) {
            keep
        } else {
            qs.iter().filter(near).map(|e| e.0).min().expect("state has an action")
        };
        choices.push(chosen);
    }

    Ok(MeanPayoffSolution {
        choices,
        value,
        iterations,
        residual: span,
        bias: h,
    })
}

/// The shield implementing `sol` on the abstraction it was computed for.
pub fn extract_shield(sol: &MeanPayoffSolution, abs: &AbstractMdp) -> Shield {
    let table = abs
        .mdp()
        .states()
        .iter()
        .cloned()
        .zip(sol.choices.iter().copied())
        .collect();
    Shield::new(table, abs.cutoff().clone(), abs.build_step())
}
