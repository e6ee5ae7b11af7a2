//! Rolling-horizon rollouts and open-loop policy testing.
//!
//! A rollout re-solves the dispatch every step with the state, mean forecast
//! and covariance of that step. Under the decision-dependent model the
//! variance of step `t` depends on the releases implemented at `t - 1`.
//!
//! Testing replays a fixed release schedule against sampled inflows and
//! reports generation (heads looked up from the realized storage) and the
//! integrated violation index: the summed shortfall below minimum storage.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::dispatch::{
    annotate, dispatch_bon, dispatch_det, dispatch_ssh, CutLog, DispatchProblem, DispatchSolution,
    DispatchStatus, SolverConfig,
};
use crate::forecast::MeanModel;
use crate::hydro::{lookup_head, mass_balance_step, power, CascadeConfig, HeadTable};
use crate::linalg::Matrix;
use crate::uncertainty::{assemble_covariance, DduState, DiuModel, GarchXParams};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ModelKind {
    /// Mean forecast only.
    Det,
    /// Static covariance.
    Diu,
    /// GARCH-X conditional covariance.
    Ddu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SolverKind {
    Det,
    Bon,
    Ssh,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Det => "DET",
            ModelKind::Diu => "DIU",
            ModelKind::Ddu => "DDU",
        }
    }
}

impl SolverKind {
    pub fn name(&self) -> &'static str {
        match self {
            SolverKind::Det => "DET",
            SolverKind::Bon => "BON",
            SolverKind::Ssh => "SSH",
        }
    }
}

/// How downstream inflow is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Routing {
    /// The scenario series is the full inflow of each unit.
    TotalInflow,
    /// Scenario series is the natural component; the upstream release,
    /// delayed by the travel time, is added on top.
    Additive,
}

/// Everything fitted offline.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct FittedModels {
    /// Per-unit mean models (physical flows through their normalizations).
    pub mean: Vec<MeanModel>,
    /// Static residual covariance (normalized units).
    pub diu: DiuModel,
    pub garch: GarchXParams,
    pub corr: Matrix,
}

impl FittedModels {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.mean.len() != n || self.diu.cov.rows() != n || self.corr.rows() != n {
            return Err(Error::invalid(
                "fitted models do not match the cascade size",
            ));
        }
        self.mean.iter().try_for_each(MeanModel::validate)?;
        self.garch.validate()
    }

    /// Copy with a different release weight in the variance recursion.
    pub fn with_gamma(&self, gamma: f64) -> Self {
        let mut m = self.clone();
        m.garch.gamma = gamma;
        m
    }

    fn scales(&self) -> Vec<f64> {
        self.mean.iter().map(|m| m.inflow_norm.scale).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SimConfig {
    pub cascade: CascadeConfig,
    pub head_tables: Vec<HeadTable>,
    /// Initial storage (m³).
    pub v0: Vec<f64>,
    /// Release before the first step (m³/step).
    pub u0: Vec<f64>,
    /// Look-ahead steps of each dispatch.
    pub lookahead: usize,
    pub solver: SolverConfig,
    pub routing: Routing,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.cascade.validate()?;
        let n = self.cascade.len();
        if self.head_tables.len() != n || self.v0.len() != n || self.u0.len() != n {
            return Err(Error::invalid(
                "simulation config vectors must have one entry per unit",
            ));
        }
        if self.lookahead < 1 {
            return Err(Error::invalid("look-ahead must be at least one step"));
        }
        Ok(())
    }

    fn head(&self, i: usize, v: f64) -> f64 {
        lookup_head(&self.head_tables[i], v)
    }

    fn energy(&self, i: usize, u: f64, head: f64) -> f64 {
        let r = &self.cascade.units[i];
        power(u, head, r, &self.cascade.constants).min(r.p_max)
    }

    /// Normalized release driver of the variance recursion for unit `i`:
    /// the upstream unit's release, or the boundary inflow for unit 0.
    fn driver(&self, i: usize, u: &[f64], q_flow: &[f64]) -> f64 {
        if i == 0 {
            self.cascade.flow_to_volume(q_flow[0]) / self.cascade.units[0].u_max
        } else {
            u[i - 1] / self.cascade.units[i - 1].u_max
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Policy {
    pub model: ModelKind,
    pub solver: SolverKind,
    pub epsilon: f64,
}

impl Policy {
    pub fn det() -> Self {
        Self {
            model: ModelKind::Det,
            solver: SolverKind::Det,
            epsilon: 0.05,
        }
    }

    pub fn label(&self) -> String {
        if self.model == ModelKind::Det {
            String::from("DET")
        } else {
            alloc::format!("{}-{}", self.model.name(), self.solver.name())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct StepTrace {
    pub status: DispatchStatus,
    pub cuts: usize,
    pub probability: Option<f64>,
    /// The release came from the ramp-down fallback.
    pub fallback: bool,
    pub message: Option<String>,
    pub cut_log: CutLog,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RolloutResult {
    /// Storage after each step, `steps x n` (m³).
    pub v: Vec<Vec<f64>>,
    /// Releases, `steps x n` (m³/step).
    pub u: Vec<Vec<f64>>,
    /// Generation, `steps x n` (MWh).
    pub p: Vec<Vec<f64>>,
    /// Realized inflow, `steps x n` (m³/s).
    pub q: Vec<Vec<f64>>,
    /// Mean forecast, `steps x n` (m³/s).
    pub mu: Vec<Vec<f64>>,
    /// Forecast variance per unit, `steps x n` (normalized units).
    pub sigma2: Vec<Vec<f64>>,
    pub total_generation: f64,
    pub ivi: f64,
    pub violations_count: usize,
    pub risk_alloc: Vec<Option<Vec<f64>>>,
    pub traces: Vec<StepTrace>,
}

impl RolloutResult {
    pub fn infeasible_steps(&self) -> usize {
        self.traces
            .iter()
            .filter(|t| t.status == DispatchStatus::Infeasible)
            .count()
    }
}

fn volume_shortfall(cascade: &CascadeConfig, v: &[f64]) -> (f64, usize) {
    let mut ivi = 0.0;
    let mut count = 0;
    for (i, &vi) in v.iter().enumerate() {
        let d = cascade.units[i].v_min - vi;
        if d > 0.0 {
            ivi += d;
            count += 1;
        }
    }
    (ivi, count)
}

/// Rolling rollout against a known inflow trajectory (`n x steps`, m³/s).
/// With the mean scenario this is the policy-learning pass; with a sampled
/// scenario it is closed-loop operation.
pub fn rollout(
    cfg: &SimConfig,
    models: &FittedModels,
    policy: &Policy,
    trajectory: &[Vec<f64>],
) -> Result<RolloutResult> {
    cfg.validate()?;
    let n = cfg.cascade.len();
    models.validate(n)?;
    if trajectory.len() != n {
        return Err(Error::invalid("trajectory needs one series per unit"));
    }
    let steps = trajectory[0].len();
    if trajectory.iter().any(|s| s.len() != steps) {
        return Err(Error::invalid("trajectory series lengths differ"));
    }
    let dt = cfg.cascade.step_seconds;
    let tt = cfg.cascade.travel_time_steps;
    let scales = models.scales();
    let lags = models
        .mean
        .iter()
        .map(|m| m.ar_order().max(m.exo_order()))
        .max()
        .unwrap_or(1);

    // histories, most recent first; warm start at the initial steady state
    let mut q_hist: Vec<Vec<f64>> = (0..n).map(|i| vec![trajectory[i][0]; lags]).collect();
    let u0_flow: Vec<f64> = cfg.u0.iter().map(|u| u / dt).collect();
    let mut up_hist: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let x = if i == 0 {
                trajectory[0][0]
            } else {
                u0_flow[i - 1]
            };
            vec![x; lags.max(tt)]
        })
        .collect();
    let mut release_hist: Vec<Vec<f64>> = (0..n).map(|i| vec![cfg.u0[i]; tt.max(1)]).collect();

    let mut ddu = {
        let q0: Vec<f64> = (0..n).map(|i| trajectory[i][0]).collect();
        let sigma2: Vec<f64> = (0..n)
            .map(|i| {
                let g = &models.garch;
                let drv = cfg.driver(i, &cfg.u0, &q0);
                // fixed point of the recursion with zero residuals
                ((g.omega + g.gamma * drv) / (1.0 - g.beta_v)).max(1e-300)
            })
            .collect();
        let mut s = DduState::new(sigma2, models.corr.clone())?;
        let drivers: Vec<f64> = (0..n).map(|i| cfg.driver(i, &cfg.u0, &q0)).collect();
        s.observe(&vec![0.0; n], &drivers);
        s
    };

    let mut v = cfg.v0.clone();
    let mut u_prev = cfg.u0.clone();
    let mut out = RolloutResult {
        v: Vec::with_capacity(steps),
        u: Vec::with_capacity(steps),
        p: Vec::with_capacity(steps),
        q: Vec::with_capacity(steps),
        mu: Vec::with_capacity(steps),
        sigma2: Vec::with_capacity(steps),
        total_generation: 0.0,
        ivi: 0.0,
        violations_count: 0,
        risk_alloc: Vec::with_capacity(steps),
        traces: Vec::with_capacity(steps),
    };

    for t in 0..steps {
        let heads: Vec<f64> = (0..n).map(|i| cfg.head(i, v[i])).collect();
        // routed inflow already in the channel
        let routed: Vec<f64> = (0..n)
            .map(|i| match cfg.routing {
                Routing::Additive if i > 0 => release_hist[i - 1][tt - 1] / dt,
                _ => 0.0,
            })
            .collect();
        let mu_flow = forecast_path(models, &q_hist, &up_hist, cfg.lookahead)?;
        let mu: Vec<Vec<f64>> = mu_flow
            .iter()
            .map(|row| row.iter().zip(&routed).map(|(m, r)| (m + r) * dt).collect())
            .collect();

        let step_cov_norm = match policy.model {
            ModelKind::Det => Matrix::zeros(n, n),
            ModelKind::Diu => models.diu.cov.clone(),
            ModelKind::Ddu => {
                ddu.step(&models.garch);
                assemble_covariance(&ddu)
            }
        };
        let sigma2_now: Vec<f64> = step_cov_norm.diag();
        let mut step_cov = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                step_cov[(i, j)] = step_cov_norm[(i, j)] * scales[i] * scales[j] * dt * dt;
            }
        }
        let d = n * cfg.lookahead;
        let mut sigma = Matrix::zeros(d, d);
        for tau in 0..cfg.lookahead {
            for i in 0..n {
                for j in 0..n {
                    sigma[(tau * n + i, tau * n + j)] = step_cov[(i, j)];
                }
            }
        }
        let problem = DispatchProblem {
            cascade: cfg.cascade.clone(),
            v_prev: v.clone(),
            u_prev: u_prev.clone(),
            horizon: cfg.lookahead,
            mu,
            sigma,
            heads: heads.clone(),
            epsilon: policy.epsilon,
        };
        let solved = solve(&problem, policy, &cfg.solver);
        let (u_t, p_t, trace, alloc) = match solved {
            Ok(sol) if sol.status != DispatchStatus::Infeasible => {
                let u_t = sol.u_star[0].clone();
                let p_t = sol.p_star[0].clone();
                let alloc = sol.risk_alloc.as_ref().map(|r| r.shares.clone());
                let trace = StepTrace {
                    status: sol.status,
                    cuts: sol.iterations,
                    probability: sol.probability,
                    fallback: false,
                    message: sol.message.clone(),
                    cut_log: sol.cut_log.clone(),
                };
                (u_t, p_t, trace, alloc)
            }
            other => {
                let message = match other {
                    Ok(sol) => sol.message,
                    Err(e) => Some(alloc::format!("{e}")),
                };
                let u_t: Vec<f64> = (0..n)
                    .map(|i| {
                        let r = &cfg.cascade.units[i];
                        r.u_min.max(u_prev[i] - r.r_down)
                    })
                    .collect();
                let p_t = (0..n).map(|i| cfg.energy(i, u_t[i], heads[i])).collect();
                let trace = StepTrace {
                    status: DispatchStatus::Infeasible,
                    cuts: 0,
                    probability: None,
                    fallback: true,
                    message,
                    cut_log: CutLog::default(),
                };
                (u_t, p_t, trace, None)
            }
        };

        let q_t: Vec<f64> = (0..n).map(|i| trajectory[i][t] + routed[i]).collect();
        for i in 0..n {
            v[i] = mass_balance_step(v[i], q_t[i] * dt, u_t[i]);
        }
        let (short, count) = volume_shortfall(&cfg.cascade, &v);
        out.ivi += short;
        out.violations_count += count;

        // residuals of the natural component in normalized units
        let resid: Vec<f64> = (0..n)
            .map(|i| (trajectory[i][t] - mu_flow[0][i]) / scales[i])
            .collect();
        let nat: Vec<f64> = (0..n).map(|i| trajectory[i][t]).collect();
        let drivers: Vec<f64> = (0..n).map(|i| cfg.driver(i, &u_t, &nat)).collect();
        ddu.observe(&resid, &drivers);

        for i in 0..n {
            q_hist[i].rotate_right(1);
            q_hist[i][0] = trajectory[i][t];
            up_hist[i].rotate_right(1);
            up_hist[i][0] = if i == 0 {
                trajectory[0][t]
            } else {
                u_t[i - 1] / dt
            };
            release_hist[i].rotate_right(1);
            release_hist[i][0] = u_t[i];
        }
        out.total_generation += p_t.iter().sum::<f64>();
        out.v.push(v.clone());
        out.u.push(u_t.clone());
        out.p.push(p_t);
        out.q.push(q_t);
        out.mu.push(mu_flow[0].clone());
        out.sigma2.push(sigma2_now);
        out.risk_alloc.push(alloc);
        out.traces.push(trace);
        u_prev = u_t;
    }
    Ok(out)
}

/// Mean inflow path over the look-ahead (m³/s), iterating the one-step
/// model on its own predictions and holding upstream releases.
fn forecast_path(
    models: &FittedModels,
    q_hist: &[Vec<f64>],
    up_hist: &[Vec<f64>],
    lookahead: usize,
) -> Result<Vec<Vec<f64>>> {
    let n = q_hist.len();
    let mut q: Vec<Vec<f64>> = q_hist.to_vec();
    let mut out = Vec::with_capacity(lookahead);
    for _ in 0..lookahead {
        let mut row = Vec::with_capacity(n);
        for i in 0..n {
            row.push(models.mean[i].predict_physical(&q[i], &up_hist[i])?);
        }
        for i in 0..n {
            q[i].rotate_right(1);
            q[i][0] = row[i];
        }
        out.push(row);
    }
    Ok(out)
}

/// One dispatch with the solver the policy names.
pub fn solve(
    problem: &DispatchProblem,
    policy: &Policy,
    cfg: &SolverConfig,
) -> Result<DispatchSolution> {
    if policy.model == ModelKind::Det || policy.solver == SolverKind::Det {
        return dispatch_det(problem);
    }
    match policy.solver {
        SolverKind::Ssh => dispatch_ssh(problem, cfg),
        SolverKind::Bon => {
            let mut s = dispatch_bon(problem)?;
            annotate(problem, &mut s, cfg)?;
            Ok(s)
        }
        SolverKind::Det => unreachable!(),
    }
}

/// Outcome of replaying a fixed schedule on one scenario.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TestOutcome {
    pub generation: f64,
    pub ivi: f64,
    pub violations: usize,
}

/// Open-loop replay of releases `u_fixed` (`steps x n`, m³/step) against an
/// inflow trajectory (`n x steps`, m³/s).
pub fn test_schedule(
    cfg: &SimConfig,
    u_fixed: &[Vec<f64>],
    trajectory: &[Vec<f64>],
) -> Result<TestOutcome> {
    cfg.validate()?;
    let n = cfg.cascade.len();
    if trajectory.len() != n {
        return Err(Error::invalid("trajectory needs one series per unit"));
    }
    let steps = u_fixed.len();
    if trajectory.iter().any(|s| s.len() < steps) {
        return Err(Error::invalid("trajectory shorter than the schedule"));
    }
    let dt = cfg.cascade.step_seconds;
    let tt = cfg.cascade.travel_time_steps;
    let mut v = cfg.v0.clone();
    let mut gen = 0.0;
    let mut ivi = 0.0;
    let mut violations = 0;
    for t in 0..steps {
        for i in 0..n {
            let u = u_fixed[t][i];
            gen += cfg.energy(i, u, cfg.head(i, v[i]));
            let mut q = trajectory[i][t] * dt;
            if cfg.routing == Routing::Additive && i > 0 {
                q += if t >= tt {
                    u_fixed[t - tt][i - 1]
                } else {
                    cfg.u0[i - 1]
                };
            }
            v[i] = mass_balance_step(v[i], q, u);
        }
        let (s, c) = volume_shortfall(&cfg.cascade, &v);
        ivi += s;
        violations += c;
    }
    Ok(TestOutcome {
        generation: gen,
        ivi,
        violations,
    })
}

/// Scenario averages in a fixed summation order.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TestSummary {
    pub scenarios: usize,
    pub avg_generation: f64,
    pub ivi: f64,
    pub avg_violations: f64,
}

pub fn summarize(outcomes: &[TestOutcome]) -> TestSummary {
    let s = outcomes.len().max(1) as f64;
    TestSummary {
        scenarios: outcomes.len(),
        avg_generation: outcomes.iter().map(|o| o.generation).sum::<f64>() / s,
        ivi: outcomes.iter().map(|o| o.ivi).sum::<f64>() / s,
        avg_violations: outcomes.iter().map(|o| o.violations as f64).sum::<f64>() / s,
    }
}

/// Closed-loop test: the policy re-solves every step against each
/// trajectory instead of replaying a fixed schedule.
pub fn run_closed_loop_testing<'a, I>(
    cfg: &SimConfig,
    models: &FittedModels,
    policy: &Policy,
    trajectories: I,
) -> Result<TestSummary>
where
    I: IntoIterator<Item = &'a Vec<Vec<f64>>>,
{
    let outcomes = trajectories
        .into_iter()
        .map(|tr| {
            let r = rollout(cfg, models, policy, tr)?;
            Ok(TestOutcome {
                generation: r.total_generation,
                ivi: r.ivi,
                violations: r.violations_count,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&outcomes))
}

/// Sequential open-loop test over many trajectories.
pub fn run_policy_testing<'a, I>(
    cfg: &SimConfig,
    u_fixed: &[Vec<f64>],
    trajectories: I,
) -> Result<TestSummary>
where
    I: IntoIterator<Item = &'a Vec<Vec<f64>>>,
{
    let outcomes = trajectories
        .into_iter()
        .map(|tr| test_schedule(cfg, u_fixed, tr))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&outcomes))
}
