//! Experiment matrices: risk-tolerance table, (α, D) improvement grid,
//! SSH/BON feasibility map over (α, q0) and the γ sweep.
//!
//! Learning rollouts are the expensive part and run in parallel; every
//! reduction happens afterwards in a fixed order so outputs do not depend on
//! the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use cascade_core::dispatch::DispatchProblem;
use cascade_core::hydro::lookup_head;
use cascade_core::linalg::Matrix;
use cascade_core::scenario::{
    build_trajectory, mean_scenario, sample_scenario, Dist, ScenarioDistributions, ScenarioLayout,
};
use cascade_core::simulate::{
    rollout, run_closed_loop_testing, run_policy_testing, FittedModels, ModelKind, Policy,
    RolloutResult, SimConfig, SolverKind, TestSummary,
};

use crate::config::RunConfig;

/// Fitted models plus the run configuration.
#[derive(Clone, Debug)]
pub struct Setup {
    pub cfg: RunConfig,
    pub models: FittedModels,
}

/// Seed of scenario `s` in a batch seeded with `base`.
pub fn scenario_seed(base: u64, s: usize) -> u64 {
    // splitmix64 finalizer keeps neighbouring seeds unrelated
    let mut z = base.wrapping_add((s as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Setup {
    pub fn new(cfg: RunConfig, models: FittedModels) -> anyhow::Result<Self> {
        cfg.validate()?;
        models.validate(cfg.cascade.units)?;
        let models = match cfg.uncertainty.gamma_override {
            Some(g) => models.with_gamma(g),
            None => models,
        };
        Ok(Self { cfg, models })
    }

    pub fn layout(&self) -> ScenarioLayout {
        self.cfg.scenario.layout
    }

    pub fn dists(&self) -> ScenarioDistributions {
        self.cfg.scenario.distributions
    }

    /// Learning rollout on the mean trajectory of `dists`.
    pub fn learn(
        &self,
        models: &FittedModels,
        policy: &Policy,
        dists: &ScenarioDistributions,
    ) -> anyhow::Result<Learned> {
        let spec = mean_scenario(dists, &self.layout())?;
        let sim = self.cfg.sim_config(spec.q0)?;
        let trajectory = build_trajectory(&spec);
        let result = rollout(&sim, models, policy, &trajectory)?;
        Ok(Learned {
            sim,
            result,
            models: models.clone(),
            policy: *policy,
        })
    }

    /// Scenario batch drawn from `dists`, `n x horizon` each.
    pub fn scenarios(
        &self,
        dists: &ScenarioDistributions,
        seed: u64,
    ) -> anyhow::Result<Vec<Vec<Vec<f64>>>> {
        (0..self.cfg.scenario.scenarios)
            .map(|s| {
                let spec = sample_scenario(dists, &self.layout(), scenario_seed(seed, s))?;
                Ok(build_trajectory(&spec))
            })
            .collect()
    }

    pub fn test(
        &self,
        learned: &Learned,
        scenarios: &[Vec<Vec<f64>>],
    ) -> anyhow::Result<TestSummary> {
        if self.cfg.simulation.closed_loop_testing {
            Ok(run_closed_loop_testing(
                &learned.sim,
                &learned.models,
                &learned.policy,
                scenarios,
            )?)
        } else {
            Ok(run_policy_testing(
                &learned.sim,
                &learned.result.u,
                scenarios,
            )?)
        }
    }
}

/// Status text of a completed cell.
pub const OK: &str = "ok";

type Outcome = Result<Learned, String>;

fn learn_many<J, F>(jobs: &[J], f: F) -> Vec<Outcome>
where
    J: Sync,
    F: Fn(&J) -> anyhow::Result<Learned> + Sync,
{
    jobs.par_iter()
        .map(|j| f(j).map_err(|e| format!("{e:#}")))
        .collect()
}

fn failed(e: impl std::fmt::Display) -> String {
    format!("failed: {e}")
}

/// A learning rollout with the setup it ran under.
#[derive(Clone, Debug)]
pub struct Learned {
    pub sim: SimConfig,
    pub result: RolloutResult,
    pub models: FittedModels,
    pub policy: Policy,
}

impl Learned {
    pub fn feasible(&self) -> bool {
        self.result.infeasible_steps() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub solver: String,
    pub epsilon: f64,
    pub expected_generation: f64,
    pub learning_ivi: f64,
    pub infeasible_steps: usize,
    pub avg_generation: f64,
    pub ivi: f64,
    pub avg_violations: f64,
    pub status: String,
}

fn row(policy: &Policy, outcome: &Outcome, scenarios: &[Vec<Vec<f64>>], setup: &Setup) -> TableRow {
    let mut r = TableRow {
        model: policy.model.name().into(),
        solver: policy.solver.name().into(),
        epsilon: policy.epsilon,
        expected_generation: f64::NAN,
        learning_ivi: f64::NAN,
        infeasible_steps: 0,
        avg_generation: f64::NAN,
        ivi: f64::NAN,
        avg_violations: f64::NAN,
        status: OK.into(),
    };
    let learned = match outcome {
        Ok(l) => l,
        Err(e) => {
            r.status = failed(e);
            return r;
        }
    };
    r.expected_generation = learned.result.total_generation;
    r.learning_ivi = learned.result.ivi;
    r.infeasible_steps = learned.result.infeasible_steps();
    match setup.test(learned, scenarios) {
        Ok(t) => {
            r.avg_generation = t.avg_generation;
            r.ivi = t.ivi;
            r.avg_violations = t.avg_violations;
        }
        Err(e) => r.status = failed(e),
    }
    r
}

/// DET plus DIU and DDU (SSH) at every ε: learned on the mean scenario,
/// tested open loop on sampled scenarios.
pub fn risk_table(setup: &Setup) -> anyhow::Result<Vec<TableRow>> {
    let mut policies = vec![Policy::det()];
    for model in [ModelKind::Diu, ModelKind::Ddu] {
        for &epsilon in &setup.cfg.experiment.epsilons {
            policies.push(Policy {
                model,
                solver: SolverKind::Ssh,
                epsilon,
            });
        }
    }
    let dists = setup.dists();
    let learned = learn_many(&policies, |p| setup.learn(&setup.models, p, &dists));
    let scenarios = setup.scenarios(&dists, setup.cfg.scenario.seed)?;
    Ok(policies
        .iter()
        .zip(&learned)
        .map(|(p, l)| row(p, l, &scenarios, setup))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatCell {
    pub alpha: f64,
    pub duration: f64,
    pub ivi_diu: f64,
    pub ivi_ddu: f64,
    pub generation_diu: f64,
    pub generation_ddu: f64,
    /// `100 (IVI_DIU - IVI_DDU) / IVI_DIU`; zero when both are zero.
    pub ivi_reduction_pct: f64,
    /// `100 (G_DDU - G_DIU) / G_DIU`.
    pub generation_increase_pct: f64,
    pub status: String,
}

pub fn percent_reduction(base: f64, new: f64) -> f64 {
    if base == 0.0 {
        if new == 0.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        100.0 * (base - new) / base
    }
}

/// DDU against DIU over the (α, D) grid at the configured ε; baseline flow
/// is sampled in testing.
pub fn improvement_grid(setup: &Setup) -> anyhow::Result<Vec<HeatCell>> {
    let e = &setup.cfg.experiment;
    let q0 = setup.dists().q0;
    let cells: Vec<(f64, f64)> = e
        .alphas
        .iter()
        .flat_map(|&a| e.durations.iter().map(move |&d| (a, d)))
        .collect();
    let jobs: Vec<(usize, ModelKind)> = (0..cells.len())
        .flat_map(|c| [(c, ModelKind::Diu), (c, ModelKind::Ddu)])
        .collect();
    let eps = setup.cfg.solver.epsilon;
    let learned = learn_many(&jobs, |&(c, model)| {
        let (a, d) = cells[c];
        let policy = Policy {
            model,
            solver: SolverKind::Ssh,
            epsilon: eps,
        };
        setup.learn(&setup.models, &policy, &pinned(setup, q0, a, d))
    });
    cells
        .iter()
        .enumerate()
        .map(|(c, &(a, d))| {
            let scenarios = setup.scenarios(
                &pinned(setup, q0, a, d),
                scenario_seed(setup.cfg.scenario.seed, 1000 + c),
            )?;
            let mut cell = HeatCell {
                alpha: a,
                duration: d,
                ivi_diu: f64::NAN,
                ivi_ddu: f64::NAN,
                generation_diu: f64::NAN,
                generation_ddu: f64::NAN,
                ivi_reduction_pct: f64::NAN,
                generation_increase_pct: f64::NAN,
                status: OK.into(),
            };
            let tested = |o: &Outcome| -> Result<TestSummary, String> {
                let l = o.as_ref().map_err(Clone::clone)?;
                setup.test(l, &scenarios).map_err(|e| format!("{e:#}"))
            };
            match (tested(&learned[2 * c]), tested(&learned[2 * c + 1])) {
                (Ok(diu), Ok(ddu)) => {
                    cell.ivi_diu = diu.ivi;
                    cell.ivi_ddu = ddu.ivi;
                    cell.generation_diu = diu.avg_generation;
                    cell.generation_ddu = ddu.avg_generation;
                    cell.ivi_reduction_pct = percent_reduction(diu.ivi, ddu.ivi);
                    cell.generation_increase_pct =
                        -percent_reduction(diu.avg_generation, ddu.avg_generation);
                }
                (Err(e), _) | (_, Err(e)) => cell.status = failed(e),
            }
            Ok(cell)
        })
        .collect()
}

fn pinned(setup: &Setup, q0: Dist, alpha: f64, duration: f64) -> ScenarioDistributions {
    ScenarioDistributions {
        q0,
        amplitude: Dist::Fixed { value: alpha },
        duration: Dist::Fixed { value: duration },
        ..setup.dists()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityCell {
    pub alpha: f64,
    pub q0: f64,
    pub ssh_feasible: bool,
    pub bon_feasible: bool,
    /// Cell whose BON schedule stands in when BON is infeasible here.
    pub bon_source_alpha: f64,
    pub bon_source_q0: f64,
    pub substituted: bool,
    pub ssh_generation: f64,
    pub bon_generation: f64,
    pub ssh_ivi: f64,
    pub bon_ivi: f64,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub regime: String,
    pub cells: usize,
    pub ssh_generation: f64,
    pub bon_generation: f64,
}

/// Index of the nearest cell with `ok[j]` after per-axis standardization;
/// ties go to the earlier cell.
pub fn nearest_feasible(points: &[(f64, f64)], ok: &[bool], i: usize) -> Option<usize> {
    let sd = |k: usize| {
        let xs: Vec<f64> = points
            .iter()
            .map(|p| if k == 0 { p.0 } else { p.1 })
            .collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
        if v > 0.0 {
            v.sqrt()
        } else {
            1.0
        }
    };
    let (sa, sq) = (sd(0), sd(1));
    let mut best: Option<(usize, f64)> = None;
    for (j, p) in points.iter().enumerate() {
        if !ok[j] || j == i {
            continue;
        }
        let da = (p.0 - points[i].0) / sa;
        let dq = (p.1 - points[i].1) / sq;
        let d = da * da + dq * dq;
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((j, d));
        }
    }
    best.map(|b| b.0)
}

/// SSH and BON (DDU, configured ε) over the (α, q0) grid. BON-infeasible
/// cells borrow the schedule of the nearest BON-feasible cell. Each cell is
/// tested on scenarios with its own α and q0 and sampled durations.
pub fn feasibility_map(
    setup: &Setup,
) -> anyhow::Result<(Vec<FeasibilityCell>, Vec<RegimeSummary>)> {
    let e = &setup.cfg.experiment;
    let points: Vec<(f64, f64)> = e
        .feasibility_alphas
        .iter()
        .flat_map(|&a| e.feasibility_q0.iter().map(move |&q| (a, q)))
        .collect();
    let eps = setup.cfg.solver.epsilon;
    let cell_dists = |&(a, q): &(f64, f64)| ScenarioDistributions {
        q0: Dist::Fixed { value: q },
        q0_floor: setup.dists().q0_floor.min(q),
        amplitude: Dist::Fixed { value: a },
        ..setup.dists()
    };
    let jobs: Vec<(usize, SolverKind)> = (0..points.len())
        .flat_map(|c| [(c, SolverKind::Ssh), (c, SolverKind::Bon)])
        .collect();
    let learned = learn_many(&jobs, |&(c, solver)| {
        let policy = Policy {
            model: ModelKind::Ddu,
            solver,
            epsilon: eps,
        };
        setup.learn(&setup.models, &policy, &cell_dists(&points[c]))
    });
    let bon_ok: Vec<bool> = (0..points.len())
        .map(|c| learned[2 * c + 1].as_ref().is_ok_and(Learned::feasible))
        .collect();
    let mut cells = Vec::with_capacity(points.len());
    for (c, p) in points.iter().enumerate() {
        let scenarios = setup.scenarios(
            &cell_dists(p),
            scenario_seed(setup.cfg.scenario.seed, 2000 + c),
        )?;
        let source = if bon_ok[c] {
            Some(c)
        } else {
            nearest_feasible(&points, &bon_ok, c)
        };
        let mut cell = FeasibilityCell {
            alpha: p.0,
            q0: p.1,
            ssh_feasible: false,
            bon_feasible: bon_ok[c],
            bon_source_alpha: f64::NAN,
            bon_source_q0: f64::NAN,
            substituted: !bon_ok[c],
            ssh_generation: f64::NAN,
            bon_generation: f64::NAN,
            ssh_ivi: f64::NAN,
            bon_ivi: f64::NAN,
            status: OK.into(),
        };
        let ssh = match &learned[2 * c] {
            Ok(l) => l,
            Err(e) => {
                cell.status = failed(e);
                cells.push(cell);
                continue;
            }
        };
        cell.ssh_feasible = ssh.feasible();
        match setup.test(ssh, &scenarios) {
            Ok(t) => {
                cell.ssh_generation = t.avg_generation;
                cell.ssh_ivi = t.ivi;
            }
            Err(e) => cell.status = failed(e),
        }
        match source.map(|s| (s, &learned[2 * s + 1])) {
            Some((s, Ok(bon))) => {
                // the borrowed schedule runs from this cell's initial state
                let mut l = bon.clone();
                l.sim = ssh.sim.clone();
                match setup.test(&l, &scenarios) {
                    Ok(t) => {
                        cell.bon_generation = t.avg_generation;
                        cell.bon_ivi = t.ivi;
                        cell.bon_source_alpha = points[s].0;
                        cell.bon_source_q0 = points[s].1;
                    }
                    Err(e) => cell.status = failed(e),
                }
            }
            Some((_, Err(e))) => cell.status = failed(e),
            None => cell.status = failed("no BON-feasible cell to borrow from"),
        }
        cells.push(cell);
    }
    let mut qs: Vec<f64> = points.iter().map(|p| p.1).collect();
    qs.sort_by(f64::total_cmp);
    let median = if qs.len() % 2 == 1 {
        qs[qs.len() / 2]
    } else {
        0.5 * (qs[qs.len() / 2 - 1] + qs[qs.len() / 2])
    };
    let summary = [("low", true), ("high", false)]
        .iter()
        .map(|&(name, low)| {
            let sel: Vec<&FeasibilityCell> = cells
                .iter()
                .filter(|c| if low { c.q0 < median } else { c.q0 >= median })
                .collect();
            let k = sel.len().max(1) as f64;
            RegimeSummary {
                regime: name.into(),
                cells: sel.len(),
                ssh_generation: sel.iter().map(|c| c.ssh_generation).sum::<f64>() / k,
                bon_generation: sel.iter().map(|c| c.bon_generation).sum::<f64>() / k,
            }
        })
        .collect();
    Ok((cells, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaPoint {
    pub multiplier: f64,
    pub gamma: f64,
    pub expected_generation: f64,
    pub avg_generation: f64,
    pub ivi: f64,
    pub avg_violations: f64,
    pub status: String,
}

/// DDU-SSH at the configured ε with the release weight scaled.
pub fn gamma_sweep(setup: &Setup) -> anyhow::Result<Vec<GammaPoint>> {
    let mults = &setup.cfg.experiment.gamma_multipliers;
    let base = setup.models.garch.gamma;
    let policy = Policy {
        model: ModelKind::Ddu,
        solver: SolverKind::Ssh,
        epsilon: setup.cfg.solver.epsilon,
    };
    let dists = setup.dists();
    let learned = learn_many(mults, |&m| {
        setup.learn(&setup.models.with_gamma(m * base), &policy, &dists)
    });
    let scenarios = setup.scenarios(&dists, scenario_seed(setup.cfg.scenario.seed, 3000))?;
    Ok(mults
        .iter()
        .zip(&learned)
        .map(|(&m, l)| {
            let mut p = GammaPoint {
                multiplier: m,
                gamma: m * base,
                expected_generation: f64::NAN,
                avg_generation: f64::NAN,
                ivi: f64::NAN,
                avg_violations: f64::NAN,
                status: OK.into(),
            };
            match l.as_ref().map_err(Clone::clone).and_then(|l| {
                let t = setup.test(l, &scenarios).map_err(|e| format!("{e:#}"))?;
                Ok((l.result.total_generation, t))
            }) {
                Ok((g, t)) => {
                    p.expected_generation = g;
                    p.avg_generation = t.avg_generation;
                    p.ivi = t.ivi;
                    p.avg_violations = t.avg_violations;
                }
                Err(e) => p.status = failed(e),
            }
            p
        })
        .collect())
}

/// One dispatch at the steady state of the mean scenario: storage at the
/// configured initial fraction, previous release and inflow at the
/// baseline, DDU covariance at its noise-free fixed point for that release.
pub fn benchmark_problem(setup: &Setup, epsilon: f64) -> anyhow::Result<DispatchProblem> {
    let q0 = setup.dists().q0.mean();
    let sim = setup.cfg.sim_config(q0)?;
    let n = sim.cascade.len();
    let dt = sim.cascade.step_seconds;
    let m = &setup.models;
    let v_prev: Vec<f64> = sim
        .cascade
        .units
        .iter()
        .map(|r| r.v_min + setup.cfg.simulation.v0_fraction * r.storage_span())
        .collect();
    let heads: Vec<f64> = (0..n)
        .map(|i| lookup_head(&sim.head_tables[i], v_prev[i]))
        .collect();
    let lags = m
        .mean
        .iter()
        .map(|x| x.ar_order().max(x.exo_order()))
        .max()
        .unwrap_or(1);
    let mu: Vec<f64> = m
        .mean
        .iter()
        .map(|x| {
            x.predict_physical(&vec![q0; lags], &vec![q0; lags])
                .map(|f| f * dt)
        })
        .collect::<Result<_, _>>()?;
    let g = &m.garch;
    let drive = q0 / (sim.cascade.units[0].u_max / dt);
    let s2 = (g.omega + g.gamma * drive) / (1.0 - g.beta_v);
    let mut sigma = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let si = m.mean[i].inflow_norm.scale * dt;
            let sj = m.mean[j].inflow_norm.scale * dt;
            sigma[(i, j)] = m.corr[(i, j)] * s2 * si * sj;
        }
    }
    Ok(DispatchProblem::one_step(
        sim.cascade,
        v_prev,
        vec![q0 * dt; n],
        mu,
        sigma,
        heads,
        epsilon,
    ))
}
