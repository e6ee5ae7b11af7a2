//! Run configuration: one TOML file, every field optional, CLI flags on top.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use cascade_core::dispatch::{LineSearchMethod, SolverConfig};
use cascade_core::hydro::{CascadeConfig, HeadTable, PlantSpec};
use cascade_core::scenario::{ScenarioDistributions, ScenarioLayout};
use cascade_core::simulate::{Routing, SimConfig};
use cascade_core::uncertainty::GarchFitOptions;

use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub paths: Paths,
    pub cascade: CascadeSection,
    pub forecast: ForecastSection,
    pub uncertainty: UncertaintySection,
    pub solver: SolverSection,
    pub simulation: SimulationSection,
    pub scenario: ScenarioSection,
    pub experiment: ExperimentSection,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Streamflow CSV (`timestamp,unit_id,inflow_m3s,release_m3s`); defaults
    /// to where `gen-data` writes.
    pub data: Option<PathBuf>,
    /// Every output lands here.
    pub output: PathBuf,
    /// Fitted model file; relative paths resolve against `output`.
    pub models: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: None,
            output: PathBuf::from("out"),
            models: PathBuf::from("models.json"),
        }
    }
}

impl Paths {
    pub fn data_path(&self) -> PathBuf {
        self.data
            .clone()
            .unwrap_or_else(|| self.output.join("data").join("history.csv"))
    }

    pub fn models_path(&self) -> PathBuf {
        if self.models.is_absolute() {
            self.models.clone()
        } else {
            self.output.join(&self.models)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeSection {
    pub units: usize,
    pub step_seconds: f64,
    pub travel_time_steps: usize,
    pub head_segments: usize,
    pub plant: PlantSpec,
}

impl Default for CascadeSection {
    fn default() -> Self {
        Self {
            units: 3,
            step_seconds: 3600.0,
            travel_time_steps: 1,
            head_segments: 40,
            plant: PlantSpec {
                capacity_steps: 1.0,
                ..PlantSpec::default()
            },
        }
    }
}

impl CascadeSection {
    pub fn build(&self) -> anyhow::Result<(CascadeConfig, Vec<HeadTable>)> {
        let mut cfg = self.plant.cascade(self.units, self.step_seconds)?;
        cfg.travel_time_steps = self.travel_time_steps;
        cfg.validate()?;
        let tables = cfg
            .units
            .iter()
            .map(|r| HeadTable::reference(r, self.head_segments))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((cfg, tables))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    /// Autoregressive lags L.
    pub lags: usize,
    /// Upstream-release lags M.
    pub exo_lags: usize,
}

impl Default for ForecastSection {
    fn default() -> Self {
        Self {
            lags: 1,
            exo_lags: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintySection {
    pub garch: GarchFitOptions,
    /// Replaces the fitted release weight of the variance recursion.
    pub gamma_override: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub epsilon: f64,
    /// Look-ahead steps T_h of each dispatch.
    pub horizon: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub cdf_accuracy: f64,
    pub grad_accuracy: f64,
    pub seed: u64,
    pub line_search: LineSearchMethod,
}

impl Default for SolverSection {
    fn default() -> Self {
        let c = SolverConfig::default();
        Self {
            epsilon: 0.05,
            horizon: 1,
            tol: c.tol,
            max_iter: c.max_iter,
            cdf_accuracy: c.cdf_accuracy,
            grad_accuracy: c.grad_accuracy,
            seed: c.seed,
            line_search: c.line_search,
        }
    }
}

impl SolverSection {
    pub fn config(&self) -> SolverConfig {
        SolverConfig {
            tol: self.tol,
            max_iter: self.max_iter,
            cdf_accuracy: self.cdf_accuracy,
            grad_accuracy: self.grad_accuracy,
            seed: self.seed,
            line_search: self.line_search,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    /// Initial storage as a fraction of the usable span above the minimum.
    pub v0_fraction: f64,
    /// Release before the first step (m³/s); defaults to the baseline flow.
    pub u0_flow: Option<f64>,
    pub routing: Routing,
    /// Re-solve against each test scenario instead of replaying the
    /// learned schedule. Much slower.
    pub closed_loop_testing: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            v0_fraction: 0.1,
            u0_flow: None,
            routing: Routing::TotalInflow,
            closed_loop_testing: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub distributions: ScenarioDistributions,
    pub layout: ScenarioLayout,
    /// Monte Carlo scenarios per policy test.
    pub scenarios: usize,
    pub seed: u64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            distributions: ScenarioDistributions::default(),
            layout: ScenarioLayout::default(),
            scenarios: 500,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub epsilons: Vec<f64>,
    /// Disruption amplitudes of the (α, D) grid.
    pub alphas: Vec<f64>,
    /// Disruption durations (steps) of the (α, D) grid.
    pub durations: Vec<f64>,
    /// Amplitudes of the (α, q0) feasibility grid.
    pub feasibility_alphas: Vec<f64>,
    /// Baseline flows (m³/s) of the (α, q0) feasibility grid.
    pub feasibility_q0: Vec<f64>,
    /// Multipliers applied to the fitted γ.
    pub gamma_multipliers: Vec<f64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            epsilons: vec![0.2, 0.1, 0.05, 0.01],
            alphas: vec![0.05, 0.1, 0.15, 0.2],
            durations: vec![6.0, 12.0, 18.0, 24.0],
            feasibility_alphas: vec![0.05, 0.1, 0.15, 0.2],
            feasibility_q0: vec![2400.0, 2800.0, 3200.0, 3600.0],
            gamma_multipliers: vec![0.5, 1.0, 2.0, 4.0],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(self.cascade.units >= 1, "cascade.units must be at least 1");
        anyhow::ensure!(
            self.cascade.step_seconds > 0.0,
            "cascade.step_seconds must be positive"
        );
        anyhow::ensure!(
            self.cascade.head_segments >= 1,
            "cascade.head_segments must be at least 1"
        );
        anyhow::ensure!(self.forecast.lags >= 1, "forecast.lags must be at least 1");
        anyhow::ensure!(
            self.solver.epsilon > 0.0 && self.solver.epsilon < 1.0,
            "solver.epsilon must lie in (0, 1)"
        );
        anyhow::ensure!(
            self.solver.horizon >= 1,
            "solver.horizon must be at least 1"
        );
        anyhow::ensure!(self.solver.tol > 0.0, "solver.tol must be positive");
        anyhow::ensure!(
            (0.0..=1.0).contains(&self.simulation.v0_fraction),
            "simulation.v0_fraction must lie in [0, 1]"
        );
        anyhow::ensure!(
            self.scenario.scenarios >= 1,
            "scenario.scenarios must be at least 1"
        );
        anyhow::ensure!(
            self.scenario.layout.units == self.cascade.units,
            "scenario.layout.units must equal cascade.units"
        );
        anyhow::ensure!(
            self.scenario.layout.travel_time_steps == self.cascade.travel_time_steps,
            "scenario.layout.travel_time_steps must equal cascade.travel_time_steps"
        );
        self.scenario.distributions.validate()?;
        let e = &self.experiment;
        anyhow::ensure!(
            e.epsilons.iter().all(|x| *x > 0.0 && *x < 1.0),
            "experiment.epsilons must lie in (0, 1)"
        );
        anyhow::ensure!(
            !e.epsilons.is_empty()
                && !e.alphas.is_empty()
                && !e.durations.is_empty()
                && !e.feasibility_alphas.is_empty()
                && !e.feasibility_q0.is_empty()
                && !e.gamma_multipliers.is_empty(),
            "experiment axes must be nonempty"
        );
        anyhow::ensure!(
            e.gamma_multipliers.iter().all(|g| *g >= 0.0),
            "experiment.gamma_multipliers must be nonnegative"
        );
        Ok(())
    }

    /// Simulation setup at baseline flow `q0` (m³/s).
    pub fn sim_config(&self, q0: f64) -> anyhow::Result<SimConfig> {
        let (cascade, head_tables) = self.cascade.build()?;
        let v0 = cascade
            .units
            .iter()
            .map(|r| r.v_min + self.simulation.v0_fraction * r.storage_span())
            .collect();
        let u0_flow = self.simulation.u0_flow.unwrap_or(q0);
        let u0 = cascade
            .units
            .iter()
            .map(|r| (u0_flow * self.cascade.step_seconds).clamp(r.u_min, r.u_max))
            .collect();
        Ok(SimConfig {
            cascade,
            head_tables,
            v0,
            u0,
            lookahead: self.solver.horizon,
            solver: self.solver.config(),
            routing: self.simulation.routing,
        })
    }
}
