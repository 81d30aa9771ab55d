//! Scenario and experiment configuration, read from TOML.
//!
//! Unknown keys are rejected everywhere.
//!
//! ```toml
//! scenario = "scenario_1"
//! seed = 7
//! c2 = 7.0
//!
//! [sweep]
//! c2 = [5.0, 7.0, 9.0]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traffic::{ArrivalKind, ArrivalModel, RoutingPhase, TemplateKind, LANES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalChange {
    pub step: u64,
    pub weights: Vec<f64>,
    /// Keeps the previous total when absent.
    #[serde(default)]
    pub total_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalConfig {
    #[serde(default = "bernoulli")]
    pub kind: ArrivalKind,
    /// Expected vehicles per step over all lanes.
    pub total_rate: f64,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub changes: Vec<ArrivalChange>,
}

fn bernoulli() -> ArrivalKind {
    ArrivalKind::Bernoulli
}

impl ArrivalConfig {
    pub fn model(&self) -> Result<ArrivalModel> {
        let mut m = ArrivalModel::new(self.kind, ArrivalModel::split(self.total_rate, &self.weights)?)?;
        let mut total = self.total_rate;
        for c in &self.changes {
            total = c.total_rate.unwrap_or(total);
            m = m.with_change(c.step, ArrivalModel::split(total, &c.weights)?)?;
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum NetworkConfig {
    Single {
        arrivals: ArrivalConfig,
    },
    Grid {
        rows: usize,
        cols: usize,
        phases: Vec<RoutingPhase>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub steps: u64,
    pub network: NetworkConfig,
    #[serde(default = "one")]
    pub discharge: u32,
    #[serde(default = "twenty")]
    pub phase_length: u64,
    pub initial_cutoff: Vec<u32>,
    pub gamma: f64,
    pub lambda: f64,
    pub c2: f64,
}

fn one() -> u32 {
    1
}

fn twenty() -> u64 {
    20
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scenario {}: {m}", self.name)));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad(format!("lambda {} outside (0, 1]", self.lambda));
        }
        if !(self.c2 >= 0.0 && self.c2.is_finite()) {
            return bad(format!("c2 {}", self.c2));
        }
        if self.initial_cutoff.len() != LANES || self.initial_cutoff.contains(&0) {
            return bad(format!("initial cut-off {:?}", self.initial_cutoff));
        }
        if self.discharge == 0 || self.phase_length == 0 {
            return bad("discharge and phase length must be positive".into());
        }
        if let NetworkConfig::Single { arrivals } = &self.network {
            if arrivals.weights.len() != LANES || arrivals.changes.iter().any(|c| c.weights.len() != LANES) {
                return bad("arrival weights need one entry per lane".into());
            }
            arrivals.model().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn nodes(&self) -> usize {
        match &self.network {
            NetworkConfig::Single { .. } => 1,
            NetworkConfig::Grid { rows, cols, .. } => rows * cols,
        }
    }
}

/// Single intersection; 1.5 vehicles per step, uniform at first, then 65% on
/// the east-west road from step 500.
pub fn scenario_1() -> ScenarioConfig {
    ScenarioConfig {
        name: "scenario_1".into(),
        steps: 6000,
        network: NetworkConfig::Single {
            arrivals: ArrivalConfig {
                kind: ArrivalKind::Bernoulli,
                total_rate: 1.5,
                weights: vec![0.25; LANES],
                changes: vec![ArrivalChange {
                    step: 500,
                    weights: vec![0.175, 0.175, 0.325, 0.325],
                    total_rate: None,
                }],
            },
        },
        discharge: 1,
        phase_length: 20,
        initial_cutoff: vec![3; LANES],
        gamma: 0.5,
        lambda: 0.3,
        c2: 5.0,
    }
}

/// [`scenario_1`] read as one vehicle every 1.5 steps.
pub fn scenario_1_sparse() -> ScenarioConfig {
    let mut s = scenario_1();
    s.name = "scenario_1_sparse".into();
    if let NetworkConfig::Single { arrivals } = &mut s.network {
        arrivals.total_rate = 1.0 / 1.5;
    }
    s
}

/// A 2x3 grid; from step 1000 on the east-west road is partly blocked and
/// traffic shifts to the side roads.
pub fn scenario_2() -> ScenarioConfig {
    ScenarioConfig {
        name: "scenario_2".into(),
        steps: 6000,
        network: NetworkConfig::Grid {
            rows: 2,
            cols: 3,
            phases: vec![
                RoutingPhase {
                    from_step: 0,
                    entry: [0.2, 0.2, 0.4, 0.4],
                    through: [0.8, 0.8, 0.9, 0.9],
                },
                RoutingPhase {
                    from_step: 1000,
                    entry: [0.45, 0.45, 0.1, 0.1],
                    through: [0.9, 0.9, 0.3, 0.3],
                },
            ],
        },
        discharge: 1,
        phase_length: 20,
        initial_cutoff: vec![3; LANES],
        gamma: 0.5,
        lambda: 0.3,
        c2: 5.0,
    }
}

pub fn builtin_scenario(name: &str) -> Option<ScenarioConfig> {
    match name {
        "scenario_1" => Some(scenario_1()),
        "scenario_1_sparse" => Some(scenario_1_sparse()),
        "scenario_2" => Some(scenario_2()),
        _ => None,
    }
}

/// A built-in scenario name, a path to a scenario file, or an inline table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioSource {
    Named(String),
    Inline(Box<ScenarioConfig>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// Symmetric Dirichlet prior over the template candidates.
    Symmetric,
    /// Prior taken from the initial arrival rates and the controller's phase
    /// length.
    InitialModel,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepLists {
    pub c2: Vec<f64>,
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSource,
    pub shield: bool,
    pub c2: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    /// Makes the learning rate approach 1 with this horizon (in
    /// observations per key), starting from `lambda`.
    pub lambda_horizon: Option<f64>,
    pub steps: Option<u64>,
    pub period: u64,
    pub warmup: u64,
    pub eps: f64,
    pub max_sweeps: u64,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub change_gate: bool,
    pub cusum_drift: f64,
    pub cusum_threshold: f64,
    pub padding: u32,
    pub max_transitions: usize,
    pub metric_window: usize,
    pub template: TemplateKind,
    pub prior: PriorKind,
    pub prior_strength: f64,
    pub sweep: SweepLists,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSource::Named("scenario_1".into()),
            shield: true,
            c2: None,
            gamma: None,
            lambda: None,
            lambda_horizon: None,
            steps: None,
            period: 500,
            warmup: 1000,
            eps: 1e-6,
            max_sweeps: 1_000_000,
            seed: None,
            output_dir: None,
            change_gate: false,
            cusum_drift: 0.5,
            cusum_threshold: 10.0,
            padding: 0,
            max_transitions: 5_000_000,
            metric_window: 100,
            template: TemplateKind::Directed {
                discharge: 1,
                arrivals: 1,
                slack: 0,
            },
            prior: PriorKind::InitialModel,
            prior_strength: 1.0,
            sweep: SweepLists::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let Some(g) = self.gamma {
            if !(0.0..=1.0).contains(&g) {
                return bad(format!("gamma {g} outside [0, 1]"));
            }
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l <= 1.0) {
                return bad(format!("lambda {l} outside (0, 1]"));
            }
        }
        if self.sweep.gamma.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return bad("sweep gamma outside [0, 1]".into());
        }
        if self.sweep.lambda.iter().any(|l| !(*l > 0.0 && *l <= 1.0)) {
            return bad("sweep lambda outside (0, 1]".into());
        }
        if self
            .sweep
            .c2
            .iter()
            .chain(&self.c2)
            .any(|c| !(*c >= 0.0 && c.is_finite()))
        {
            return bad("c2 must be finite and non-negative".into());
        }
        if self.period == 0 {
            return bad("period must be at least 1".into());
        }
        if !(self.eps > 0.0) || self.max_sweeps == 0 {
            return bad(format!("solver eps {} / max sweeps {}", self.eps, self.max_sweeps));
        }
        if !(self.prior_strength > 0.0 && self.prior_strength.is_finite()) {
            return bad(format!("prior strength {}", self.prior_strength));
        }
        if self.lambda_horizon.is_some_and(|h| !(h > 0.0)) {
            return bad("lambda horizon must be positive".into());
        }
        if !(self.cusum_threshold > 0.0 && self.cusum_drift >= 0.0) {
            return bad("cusum threshold must be positive and drift non-negative".into());
        }
        if self.metric_window == 0 {
            return bad("metric window must be at least 1".into());
        }
        Ok(())
    }

    /// The scenario with all overrides of this experiment applied.
    pub fn resolve_scenario(&self) -> Result<ScenarioConfig> {
        let mut s = match &self.scenario {
            ScenarioSource::Inline(s) => (**s).clone(),
            ScenarioSource::Named(name) => match builtin_scenario(name) {
                Some(s) => s,
                None => {
                    let path = Path::new(name);
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| Error::Config(format!("unknown scenario {name}: {e}")))?;
                    toml::from_str(&text).map_err(|e| Error::Config(format!("{name}: {e}")))?
                }
            },
        };
        if let Some(c2) = self.c2 {
            s.c2 = c2;
        }
        if let Some(g) = self.gamma {
            s.gamma = g;
        }
        if let Some(l) = self.lambda {
            s.lambda = l;
        }
        if let Some(n) = self.steps {
            s.steps = n;
        }
        s.validate()?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_1_constants() {
        let s = scenario_1();
        assert_eq!(s.steps, 6000);
        assert_eq!(s.initial_cutoff, vec![3, 3, 3, 3]);
        assert_eq!((s.gamma, s.lambda, s.c2), (0.5, 0.3, 5.0));
        let NetworkConfig::Single { arrivals } = &s.network else {
            panic!("single intersection expected")
        };
        let m = arrivals.model().unwrap();
        assert_eq!(m.rates_at(0), &[0.375; 4]);
        let late = m.rates_at(500);
        assert!((late[0] - 0.2625).abs() < 1e-12 && (late[3] - 0.4875).abs() < 1e-12);
        assert!(((late[2] + late[3]) / 1.5 - 0.65).abs() < 1e-12);
    }

    #[test]
    fn c2_override_changes_only_c2() {
        let cfg = ExperimentConfig {
            c2: Some(7.0),
            ..ExperimentConfig::default()
        };
        let s = cfg.resolve_scenario().unwrap();
        assert_eq!(
            s,
            ScenarioConfig {
                c2: 7.0,
                ..scenario_1()
            }
        );
    }

    #[test]
    fn toml_roundtrip_and_unknown_keys() {
        let cfg =
            ExperimentConfig::from_toml_str("scenario = \"scenario_2\"\nseed = 3\n[sweep]\nc2 = [5.0, 7.0]\n").unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.sweep.c2, vec![5.0, 7.0]);
        assert_eq!(cfg.resolve_scenario().unwrap().nodes(), 6);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(matches!(
            ExperimentConfig::from_toml_str("sed = 3\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml_str("gamma = 1.5\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn inline_scenario_rejects_unknown_keys() {
        let mut text = toml::to_string(&ExperimentConfig {
            scenario: ScenarioSource::Inline(Box::new(scenario_1())),
            ..ExperimentConfig::default()
        })
        .unwrap();
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.resolve_scenario().unwrap(), scenario_1());
        text = text.replace("[scenario]", "[scenario]\ncolour = 1");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }
}
