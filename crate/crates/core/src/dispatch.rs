//! Single-step (or short look-ahead) dispatch of the cascade under inflow
//! uncertainty.
//!
//! * [`dispatch_det`]: hard volume bounds on the mean inflow.
//! * [`dispatch_bon`]: volume bounds tightened by Bonferroni quantile margins.
//! * [`dispatch_ssh`]: the joint chance constraint handled by sequential
//!   supporting hyperplanes. Each iteration solves an LP, moves from the LP
//!   candidate toward a strictly feasible anchor until the probability hits
//!   `1 - epsilon`, and adds the tangent cut of the probability at that
//!   boundary point.
//!
//! The LP works in scaled variables `u / u_max` and `p / p_max`; the
//! solution tolerance applies to those.
//!
//! Random vector: cumulative inflow `Q[i, tau] = sum_{s <= tau} q[i, s]`,
//! indexed `tau * n + i`. Storage after step `tau` is
//! `v_prev + Q - U`, so the chance constraint is the rectangle
//! `V_min - v_prev + U <= Q <= V_max - v_prev + U`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::hydro::CascadeConfig;
use crate::linalg::{norm_inf, Matrix};
use crate::lp::{solve_lp, LpModel, LpStatus, LP_TOL};
use crate::mvn::{
    rect_prob_grad_with, rect_prob_with, MvnGradResult, MvnOptions, MvnProbResult, Rectangle,
};
use crate::special::norm_inv;
use crate::{Error, Result};

/// Data of one dispatch decision.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct DispatchProblem {
    pub cascade: CascadeConfig,
    /// Storage at the end of the previous step (m³).
    pub v_prev: Vec<f64>,
    /// Release of the previous step (m³/step).
    pub u_prev: Vec<f64>,
    pub horizon: usize,
    /// Mean inflow per step, `horizon x n` (m³/step).
    pub mu: Vec<Vec<f64>>,
    /// Block-diagonal per-step inflow covariance, `n*horizon` square,
    /// indexed `tau * n + i` (m³²).
    pub sigma: Matrix,
    /// Head used for power conversion per unit (m).
    pub heads: Vec<f64>,
    pub epsilon: f64,
}

impl DispatchProblem {
    /// Single-step problem.
    pub fn one_step(
        cascade: CascadeConfig,
        v_prev: Vec<f64>,
        u_prev: Vec<f64>,
        mu: Vec<f64>,
        sigma: Matrix,
        heads: Vec<f64>,
        epsilon: f64,
    ) -> Self {
        Self {
            cascade,
            v_prev,
            u_prev,
            horizon: 1,
            mu: vec![mu],
            sigma,
            heads,
            epsilon,
        }
    }

    pub fn n(&self) -> usize {
        self.cascade.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.cascade.validate()?;
        let n = self.n();
        let d = n * self.horizon;
        if self.horizon < 1 {
            return Err(Error::invalid("horizon must be at least one step"));
        }
        if self.v_prev.len() != n || self.u_prev.len() != n || self.heads.len() != n {
            return Err(Error::invalid("state vectors must have one entry per unit"));
        }
        if self.mu.len() != self.horizon || self.mu.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("mean forecast must be horizon x units"));
        }
        if self.sigma.rows() != d || self.sigma.cols() != d {
            return Err(Error::invalid("covariance must be (units*horizon) square"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::invalid("epsilon must lie in (0, 1)"));
        }
        if self.heads.iter().any(|h| !(*h >= 0.0)) {
            return Err(Error::invalid("heads must be nonnegative"));
        }
        let vals = self
            .v_prev
            .iter()
            .chain(&self.u_prev)
            .chain(self.mu.iter().flatten())
            .chain(self.sigma.as_slice());
        if vals.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("problem data must be finite"));
        }
        Ok(())
    }

    fn u_index(&self, i: usize, tau: usize) -> usize {
        tau * self.n() + i
    }

    fn p_index(&self, i: usize, tau: usize) -> usize {
        self.n() * self.horizon + tau * self.n() + i
    }

    /// Energy per m³ released at unit `i` (MWh/m³).
    fn energy_rate(&self, i: usize) -> f64 {
        self.cascade.energy_per_m3_m(i) * self.heads[i]
    }

    /// Covariance of the cumulative inflow vector.
    pub fn cumulative_covariance(&self) -> Matrix {
        let n = self.n();
        let d = n * self.horizon;
        let mut c = Matrix::zeros(d, d);
        for t1 in 0..self.horizon {
            for t2 in 0..self.horizon {
                for s in 0..=t1.min(t2) {
                    for i in 0..n {
                        for j in 0..n {
                            c[(t1 * n + i, t2 * n + j)] += self.sigma[(s * n + i, s * n + j)];
                        }
                    }
                }
            }
        }
        c
    }

    /// Mean of the cumulative inflow vector.
    pub fn cumulative_mean(&self) -> Vec<f64> {
        let n = self.n();
        let mut m = vec![0.0; n * self.horizon];
        for tau in 0..self.horizon {
            for i in 0..n {
                let prev = if tau > 0 { m[(tau - 1) * n + i] } else { 0.0 };
                m[tau * n + i] = prev + self.mu[tau][i];
            }
        }
        m
    }

    /// Volume rectangle for the random cumulative inflow at releases `u`
    /// (m³/step, indexed `tau * n + i`).
    pub fn rectangle(&self, u: &[f64]) -> Rectangle {
        let n = self.n();
        let d = n * self.horizon;
        let mut lower = vec![0.0; d];
        let mut upper = vec![0.0; d];
        for i in 0..n {
            let r = &self.cascade.units[i];
            let mut cum = 0.0;
            for tau in 0..self.horizon {
                cum += u[tau * n + i];
                lower[tau * n + i] = r.v_min - self.v_prev[i] + cum;
                upper[tau * n + i] = r.v_max - self.v_prev[i] + cum;
            }
        }
        Rectangle { lower, upper }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum LineSearchMethod {
    /// Plain interval halving.
    Bisection,
    /// Regula falsi with the Illinois modification, falling back to halving
    /// whenever the interpolant stalls.
    Illinois,
}

/// Solver knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SolverConfig {
    /// Stop when successive candidates differ by less than this (scaled).
    pub tol: f64,
    pub max_iter: usize,
    pub cdf_accuracy: f64,
    pub grad_accuracy: f64,
    pub seed: u64,
    pub line_search: LineSearchMethod,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 5e-4,
            max_iter: 200,
            cdf_accuracy: 1e-5,
            grad_accuracy: 1e-4,
            seed: 0x5eed,
            line_search: LineSearchMethod::Illinois,
        }
    }
}

impl SolverConfig {
    fn prob_opts(&self) -> MvnOptions {
        MvnOptions::with_accuracy(self.cdf_accuracy, self.seed)
    }

    fn grad_opts(&self) -> MvnOptions {
        MvnOptions::with_accuracy(self.grad_accuracy, self.seed ^ 0x9e37_79b9)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum DispatchStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// One supporting hyperplane `normal' (x - boundary) >= 0`, stored as the LP
/// row `-normal' x <= -offset` with `offset = normal' boundary`. Scaled
/// variables.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Cut {
    pub normal: Vec<f64>,
    pub offset: f64,
    pub boundary: Vec<f64>,
    pub lambda_star: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CutLogEntry {
    pub iteration: usize,
    pub lambda_star: f64,
    /// Probability at the LP candidate.
    pub probability: f64,
    /// LP objective at the candidate (MWh).
    pub objective: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CutLog {
    pub entries: Vec<CutLogEntry>,
}

impl CutLog {
    /// True when the objective never increases (up to `tol`, relative).
    pub fn is_nonincreasing(&self, tol: f64) -> bool {
        self.entries
            .windows(2)
            .all(|w| w[1].objective <= w[0].objective + tol * (1.0 + w[0].objective.abs()))
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RiskAllocation {
    /// Normalised per-unit shares (sum to one).
    pub shares: Vec<f64>,
    /// Set when every gradient was zero and the uniform split was reported.
    pub uniform_fallback: bool,
}

impl RiskAllocation {
    pub fn epsilon_shares(&self, epsilon: f64) -> Vec<f64> {
        self.shares.iter().map(|s| s * epsilon).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct DispatchSolution {
    /// Releases, `horizon x n` (m³/step).
    pub u_star: Vec<Vec<f64>>,
    /// Generation, `horizon x n` (MWh/step).
    pub p_star: Vec<Vec<f64>>,
    /// Total generation over the horizon (MWh).
    pub objective: f64,
    /// Number of cuts added.
    pub iterations: usize,
    pub cuts: Vec<Cut>,
    pub cut_log: CutLog,
    pub risk_alloc: Option<RiskAllocation>,
    /// Joint probability of the volume bounds at the returned releases.
    pub probability: Option<f64>,
    pub status: DispatchStatus,
    pub message: Option<String>,
}

impl DispatchSolution {
    fn infeasible(msg: impl Into<String>) -> Self {
        Self {
            u_star: Vec::new(),
            p_star: Vec::new(),
            objective: 0.0,
            iterations: 0,
            cuts: Vec::new(),
            cut_log: CutLog::default(),
            risk_alloc: None,
            probability: None,
            status: DispatchStatus::Infeasible,
            message: Some(msg.into()),
        }
    }

    /// First-step releases.
    pub fn first_release(&self) -> Option<&[f64]> {
        self.u_star.first().map(|v| v.as_slice())
    }
}

/// Variable scaling of the LP.
struct Scale {
    u: Vec<f64>,
    p: Vec<f64>,
}

impl Scale {
    fn of(problem: &DispatchProblem) -> Self {
        Self {
            u: problem.cascade.units.iter().map(|r| r.u_max).collect(),
            p: problem.cascade.units.iter().map(|r| r.p_max).collect(),
        }
    }
}

/// Volume bound handling in the LP.
#[derive(Clone, Copy, Debug, PartialEq)]
enum VolumeRows<'a> {
    None,
    /// Hard bounds on the mean path, tightened by per-coordinate margins.
    Mean(&'a [f64]),
}

/// LP with ramp, release and generation limits and the power link. Volume
/// bounds are added only for DET/BON.
pub fn build_lp(problem: &DispatchProblem) -> Result<LpModel> {
    problem.validate()?;
    build_lp_inner(problem, VolumeRows::None)
}

fn build_lp_inner(problem: &DispatchProblem, volume: VolumeRows<'_>) -> Result<LpModel> {
    let n = problem.n();
    let h = problem.horizon;
    let sc = Scale::of(problem);
    let nv = 2 * n * h;
    let mut c = vec![0.0; nv];
    let mut lower = vec![0.0; nv];
    let mut upper = vec![0.0; nv];
    for i in 0..n {
        let r = &problem.cascade.units[i];
        for tau in 0..h {
            let ui = problem.u_index(i, tau);
            let pi = problem.p_index(i, tau);
            let (mut lo, mut hi) = (r.u_min, r.u_max);
            if tau == 0 {
                lo = lo.max(problem.u_prev[i] - r.r_down);
                hi = hi.min(problem.u_prev[i] + r.r_up);
            }
            if lo > hi {
                return Err(Error::Infeasible(alloc::format!(
                    "unit {i}: ramp limits leave no admissible release"
                )));
            }
            lower[ui] = lo / sc.u[i];
            upper[ui] = hi / sc.u[i];
            lower[pi] = 0.0;
            upper[pi] = 1.0;
            c[pi] = sc.p[i];
        }
    }
    let mut lp = LpModel::new(c, lower, upper);
    let mut row = vec![0.0; nv];
    let clear = |row: &mut Vec<f64>| row.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        let r = &problem.cascade.units[i];
        let k = problem.energy_rate(i);
        for tau in 0..h {
            let ui = problem.u_index(i, tau);
            let pi = problem.p_index(i, tau);
            // p = k u, as two inequalities scaled by p_max
            clear(&mut row);
            row[pi] = 1.0;
            row[ui] = -k * sc.u[i] / sc.p[i];
            lp.push_row(&row, 0.0);
            row[pi] = -1.0;
            row[ui] = k * sc.u[i] / sc.p[i];
            lp.push_row(&row, 0.0);
            if tau > 0 {
                let prev = problem.u_index(i, tau - 1);
                clear(&mut row);
                row[ui] = 1.0;
                row[prev] = -1.0;
                lp.push_row(&row, r.r_up / sc.u[i]);
                row[ui] = -1.0;
                row[prev] = 1.0;
                lp.push_row(&row, r.r_down / sc.u[i]);
            }
        }
    }
    if let VolumeRows::Mean(margin) = volume {
        let mean = problem.cumulative_mean();
        for i in 0..n {
            let r = &problem.cascade.units[i];
            let span = r.storage_span();
            for tau in 0..h {
                let d = tau * n + i;
                // v = v_prev + Q - U within [v_min + m, v_max - m]
                clear(&mut row);
                for s in 0..=tau {
                    row[problem.u_index(i, s)] = sc.u[i] / span;
                }
                let rhs = (problem.v_prev[i] + mean[d] - r.v_min - margin[d]) / span;
                lp.push_row(&row, rhs);
                for s in 0..=tau {
                    row[problem.u_index(i, s)] = -sc.u[i] / span;
                }
                let rhs = (r.v_max - margin[d] - problem.v_prev[i] - mean[d]) / span;
                lp.push_row(&row, rhs);
            }
        }
    }
    Ok(lp)
}

fn unscale(problem: &DispatchProblem, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = problem.n();
    let sc = Scale::of(problem);
    let u = (0..problem.horizon)
        .map(|tau| {
            (0..n)
                .map(|i| x[problem.u_index(i, tau)] * sc.u[i])
                .collect()
        })
        .collect();
    let p = (0..problem.horizon)
        .map(|tau| {
            (0..n)
                .map(|i| x[problem.p_index(i, tau)] * sc.p[i])
                .collect()
        })
        .collect();
    (u, p)
}

fn releases(problem: &DispatchProblem, x: &[f64]) -> Vec<f64> {
    let n = problem.n();
    let sc = Scale::of(problem);
    (0..n * problem.horizon)
        .map(|d| x[d] * sc.u[d % n])
        .collect()
}

fn solution_from(problem: &DispatchProblem, x: &[f64], status: DispatchStatus) -> DispatchSolution {
    let (u_star, p_star) = unscale(problem, x);
    let objective = p_star.iter().flatten().sum();
    DispatchSolution {
        u_star,
        p_star,
        objective,
        iterations: 0,
        cuts: Vec::new(),
        cut_log: CutLog::default(),
        risk_alloc: None,
        probability: None,
        status,
        message: None,
    }
}

fn solve_fixed(problem: &DispatchProblem, volume: VolumeRows<'_>) -> Result<DispatchSolution> {
    let lp = match build_lp_inner(problem, volume) {
        Ok(lp) => lp,
        Err(Error::Infeasible(msg)) => return Ok(DispatchSolution::infeasible(msg)),
        Err(e) => return Err(e),
    };
    let sol = solve_lp(&lp)?;
    match sol.status {
        LpStatus::Optimal => Ok(solution_from(problem, &sol.x, DispatchStatus::Optimal)),
        LpStatus::Infeasible => Ok(DispatchSolution::infeasible(
            "volume bounds cannot be met on the mean path",
        )),
        LpStatus::Unbounded => Err(Error::invalid("dispatch LP is unbounded")),
        LpStatus::IterationLimit => Ok(DispatchSolution::infeasible("simplex iteration limit")),
    }
}

/// Deterministic dispatch: hard volume bounds on the mean inflow.
pub fn dispatch_det(problem: &DispatchProblem) -> Result<DispatchSolution> {
    problem.validate()?;
    let zeros = vec![0.0; problem.n() * problem.horizon];
    solve_fixed(problem, VolumeRows::Mean(&zeros))
}

/// Bonferroni multiplier `Phi^-1(1 - epsilon / (2 n T))`.
pub fn bonferroni_multiplier(epsilon: f64, n: usize, horizon: usize) -> f64 {
    norm_inv(1.0 - epsilon / (2.0 * (n * horizon) as f64))
}

/// Bonferroni dispatch: every bound gets risk `epsilon / (2 n T)`.
pub fn dispatch_bon(problem: &DispatchProblem) -> Result<DispatchSolution> {
    problem.validate()?;
    let n = problem.n();
    let k = bonferroni_multiplier(problem.epsilon, n, problem.horizon);
    let cov = problem.cumulative_covariance();
    let margin: Vec<f64> = cov
        .diag()
        .iter()
        .map(|v| k * libm::sqrt(v.max(0.0)))
        .collect();
    for (d, m) in margin.iter().enumerate() {
        let r = &problem.cascade.units[d % n];
        if r.v_min + m > r.v_max - m {
            return Ok(DispatchSolution::infeasible(alloc::format!(
                "unit {}: Bonferroni margins cross the storage band",
                d % n
            )));
        }
    }
    solve_fixed(problem, VolumeRows::Mean(&margin))
}

/// Probability that every volume bound holds at releases `u` (m³/step,
/// indexed `tau * n + i`).
pub fn chance_probability(
    problem: &DispatchProblem,
    u: &[f64],
    opts: &MvnOptions,
) -> Result<MvnProbResult> {
    rect_prob_with(
        &problem.rectangle(u),
        &problem.cumulative_mean(),
        &problem.cumulative_covariance(),
        opts,
    )
}

/// Conservative anchor: ramp down as fast as allowed toward the minimum
/// release. Returns scaled LP variables.
pub fn slater_point(problem: &DispatchProblem) -> Result<Vec<f64>> {
    problem.validate()?;
    let n = problem.n();
    let sc = Scale::of(problem);
    let mut x = vec![0.0; 2 * n * problem.horizon];
    for i in 0..n {
        let r = &problem.cascade.units[i];
        let k = problem.energy_rate(i);
        let mut prev = problem.u_prev[i];
        for tau in 0..problem.horizon {
            let u = r.u_min.max(prev - r.r_down);
            x[problem.u_index(i, tau)] = u / sc.u[i];
            x[problem.p_index(i, tau)] = k * u / sc.p[i];
            prev = u;
        }
    }
    Ok(x)
}

/// Checks the anchor and returns it with its probability.
pub fn checked_slater_point(
    problem: &DispatchProblem,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, f64)> {
    let x = slater_point(problem)?;
    let f = chance_probability(problem, &releases(problem, &x), &cfg.prob_opts())?.value;
    let required = 1.0 - problem.epsilon;
    if f < required {
        return Err(Error::SlaterInfeasible {
            probability: f,
            required,
        });
    }
    Ok((x, f))
}

/// Finds `lambda` in `[0, 1]` with `F(x_k + lambda (x_s - x_k)) = 1 - eps`.
/// Returns the point on the feasible side of the bracket.
pub fn line_search_boundary<F>(
    x_k: &[f64],
    x_s: &[f64],
    f_eval: F,
    epsilon: f64,
    method: LineSearchMethod,
) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut f_eval = f_eval;
    let target = 1.0 - epsilon;
    let point = |lam: f64| -> Vec<f64> {
        x_k.iter()
            .zip(x_s)
            .map(|(a, b)| a + lam * (b - a))
            .collect()
    };
    let f0 = f_eval(x_k)?;
    if f0 >= target {
        return Ok((x_k.to_vec(), 0.0));
    }
    let f1 = f_eval(x_s)?;
    if f1 < target {
        return Err(Error::LineSearch(alloc::format!(
            "anchor probability {f1} below target {target}"
        )));
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let (mut g_lo, mut g_hi) = (f0 - target, f1 - target);
    let mut side = 0i8;
    for _ in 0..200 {
        if hi - lo <= 1e-8 {
            break;
        }
        let mid = match method {
            LineSearchMethod::Bisection => 0.5 * (lo + hi),
            LineSearchMethod::Illinois => {
                let m = lo - g_lo * (hi - lo) / (g_hi - g_lo);
                let w = hi - lo;
                if m.is_finite() && m > lo + 1e-3 * w && m < hi - 1e-3 * w {
                    m
                } else {
                    0.5 * (lo + hi)
                }
            }
        };
        let g = f_eval(&point(mid))? - target;
        if g.abs() <= 1e-6 && g >= 0.0 {
            hi = mid;
            break;
        }
        if g >= 0.0 {
            hi = mid;
            g_hi = g;
            if side == 1 {
                g_lo *= 0.5;
            }
            side = 1;
        } else {
            lo = mid;
            g_lo = g;
            if side == -1 {
                g_hi *= 0.5;
            }
            side = -1;
        }
    }
    Ok((point(hi), hi))
}

fn grad_at(problem: &DispatchProblem, u: &[f64], cfg: &SolverConfig) -> Result<MvnGradResult> {
    rect_prob_grad_with(
        &problem.rectangle(u),
        &problem.cumulative_mean(),
        &problem.cumulative_covariance(),
        &cfg.prob_opts(),
        &cfg.grad_opts(),
    )
}

/// Gradient of the probability with respect to the scaled LP variables.
fn scaled_gradient(problem: &DispatchProblem, g: &MvnGradResult) -> Vec<f64> {
    let n = problem.n();
    let h = problem.horizon;
    let sc = Scale::of(problem);
    let mut out = vec![0.0; 2 * n * h];
    for i in 0..n {
        for s in 0..h {
            // u[i, s] shifts both bounds of every later cumulative coordinate
            let dfdu: f64 = (s..h).map(|tau| g.d_shift(tau * n + i)).sum();
            out[problem.u_index(i, s)] = dfdu * sc.u[i];
        }
    }
    out
}

/// Per-unit shares of the risk budget from the volume sensitivities of the
/// probability, aggregated over the horizon.
pub fn risk_allocation(
    problem: &DispatchProblem,
    u: &[f64],
    cfg: &SolverConfig,
) -> Result<RiskAllocation> {
    let g = grad_at(problem, u, cfg)?;
    Ok(risk_allocation_from(problem, &g))
}

fn risk_allocation_from(problem: &DispatchProblem, g: &MvnGradResult) -> RiskAllocation {
    let n = problem.n();
    let mut w = vec![0.0; n];
    for tau in 0..problem.horizon {
        for i in 0..n {
            w[i] += libm::fabs(g.d_shift(tau * n + i));
        }
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return RiskAllocation {
            shares: vec![1.0 / n as f64; n],
            uniform_fallback: true,
        };
    }
    RiskAllocation {
        shares: w.iter().map(|v| v / total).collect(),
        uniform_fallback: false,
    }
}

/// Chance-constrained dispatch by sequential supporting hyperplanes.
pub fn dispatch_ssh(problem: &DispatchProblem, cfg: &SolverConfig) -> Result<DispatchSolution> {
    problem.validate()?;
    if cfg.cdf_accuracy > problem.epsilon / 10.0 {
        return Err(Error::AccuracyTooCoarse {
            accuracy: cfg.cdf_accuracy,
            epsilon: problem.epsilon,
        });
    }
    let mut lp = match build_lp_inner(problem, VolumeRows::None) {
        Ok(lp) => lp,
        Err(Error::Infeasible(msg)) => return Ok(DispatchSolution::infeasible(msg)),
        Err(e) => return Err(e),
    };
    let (x_s, f_s) = checked_slater_point(problem, cfg)?;
    let target = 1.0 - problem.epsilon;
    let prob_opts = cfg.prob_opts();
    let f_of = |x: &[f64]| -> Result<f64> {
        Ok(chance_probability(problem, &releases(problem, x), &prob_opts)?.value)
    };

    let mut cuts: Vec<Cut> = Vec::new();
    let mut log = CutLog::default();
    let mut prev: Option<Vec<f64>> = None;
    let mut last_boundary: Option<(Vec<f64>, f64)> = None;
    let mut status = DispatchStatus::MaxIter;
    let mut final_x: Option<(Vec<f64>, f64)> = None;

    for k in 0..=cfg.max_iter {
        let sol = solve_lp(&lp)?;
        match sol.status {
            LpStatus::Optimal => {}
            LpStatus::Infeasible => {
                let mut s = DispatchSolution::infeasible("cut LP became infeasible");
                s.cuts = cuts;
                s.cut_log = log;
                return Ok(s);
            }
            LpStatus::Unbounded => return Err(Error::invalid("dispatch LP is unbounded")),
            LpStatus::IterationLimit => {
                return Ok(DispatchSolution::infeasible("simplex iteration limit"))
            }
        }
        let x_k = sol.x;
        let f_k = f_of(&x_k)?;
        log.entries.push(CutLogEntry {
            iteration: k,
            lambda_star: last_boundary.as_ref().map_or(0.0, |b| b.1),
            probability: f_k,
            objective: sol.objective,
        });
        if f_k >= target - cfg.cdf_accuracy {
            status = DispatchStatus::Optimal;
            final_x = Some((x_k, f_k));
            break;
        }
        if let Some(p) = &prev {
            let step: Vec<f64> = x_k.iter().zip(p).map(|(a, b)| a - b).collect();
            if norm_inf(&step) < cfg.tol {
                // the candidate is within tol of the previous one but still
                // outside; report the last boundary point, which is feasible
                status = DispatchStatus::Optimal;
                final_x = last_boundary
                    .as_ref()
                    .map(|(x, _)| (x.clone(), f_of(x).unwrap_or(target)));
                break;
            }
        }
        if k == cfg.max_iter {
            break;
        }
        // both ends of the segment are already evaluated
        let cached = |x: &[f64]| -> Result<f64> {
            if x == x_k.as_slice() {
                Ok(f_k)
            } else if x == x_s.as_slice() {
                Ok(f_s)
            } else {
                f_of(x)
            }
        };
        let (x_b, lambda) =
            line_search_boundary(&x_k, &x_s, cached, problem.epsilon, cfg.line_search)?;
        let reach: Vec<f64> = x_k.iter().zip(&x_b).map(|(a, b)| a - b).collect();
        if norm_inf(&reach) < cfg.tol {
            // the candidate is within tol of the feasible boundary point
            status = DispatchStatus::Optimal;
            log.entries.push(CutLogEntry {
                iteration: k + 1,
                lambda_star: lambda,
                probability: f_of(&x_b)?,
                objective: lp.objective(&x_b),
            });
            final_x = Some((x_b, log.entries[log.entries.len() - 1].probability));
            break;
        }
        let g = grad_at(problem, &releases(problem, &x_b), cfg)?;
        let normal = scaled_gradient(problem, &g);
        let scale = norm_inf(&normal);
        if !(scale > 0.0) {
            return Err(Error::LineSearch(
                "zero probability gradient at the boundary".into(),
            ));
        }
        let normal: Vec<f64> = normal.iter().map(|v| v / scale).collect();
        let offset: f64 = normal.iter().zip(&x_b).map(|(a, b)| a * b).sum();
        let row: Vec<f64> = normal.iter().map(|v| -v).collect();
        lp.push_row(&row, -offset);
        cuts.push(Cut {
            normal,
            offset,
            boundary: x_b.clone(),
            lambda_star: lambda,
        });
        last_boundary = Some((x_b, lambda));
        prev = Some(x_k);
    }

    let (x, f) = match final_x {
        Some(v) => v,
        None => match last_boundary {
            Some((x, _)) => {
                let f = f_of(&x)?;
                (x, f)
            }
            None => {
                let f = f_of(&x_s)?;
                (x_s.clone(), f)
            }
        },
    };
    let mut out = solution_from(problem, &x, status);
    out.iterations = cuts.len();
    out.cuts = cuts;
    out.cut_log = log;
    out.probability = Some(f);
    out.risk_alloc = risk_allocation(problem, &releases(problem, &x), cfg).ok();
    Ok(out)
}

/// Probability and risk allocation for a solution from any dispatcher.
pub fn annotate(
    problem: &DispatchProblem,
    sol: &mut DispatchSolution,
    cfg: &SolverConfig,
) -> Result<()> {
    if sol.status == DispatchStatus::Infeasible {
        return Ok(());
    }
    let u: Vec<f64> = sol.u_star.iter().flatten().copied().collect();
    let g = grad_at(problem, &u, cfg)?;
    sol.probability = Some(g.value.value);
    sol.risk_alloc = Some(risk_allocation_from(problem, &g));
    Ok(())
}

/// True when the solution meets every deterministic constraint of the LP.
pub fn satisfies_lp(problem: &DispatchProblem, sol: &DispatchSolution) -> bool {
    let Ok(lp) = build_lp(problem) else {
        return false;
    };
    let sc = Scale::of(problem);
    let n = problem.n();
    let mut x = vec![0.0; 2 * n * problem.horizon];
    for tau in 0..problem.horizon {
        for i in 0..n {
            x[problem.u_index(i, tau)] = sol.u_star[tau][i] / sc.u[i];
            x[problem.p_index(i, tau)] = sol.p_star[tau][i] / sc.p[i];
        }
    }
    lp.max_violation(&x) <= 1e3 * LP_TOL
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hydro::PlantSpec;
    use crate::special::norm_cdf;

    fn one_unit(v_prev_frac: f64, sd: f64, mu_flow: f64, u_prev_flow: f64) -> DispatchProblem {
        let spec = PlantSpec::default();
        let cfg = spec.cascade(1, 3600.0).unwrap();
        let r = cfg.units[0];
        let v_prev = r.v_min + v_prev_frac * r.storage_span();
        DispatchProblem::one_step(
            cfg,
            vec![v_prev],
            vec![u_prev_flow * 3600.0],
            vec![mu_flow * 3600.0],
            Matrix::from_diag(&[sd * sd]),
            vec![10.0],
            0.05,
        )
    }

    #[test]
    fn lp_dimensions() {
        let p = one_unit(0.5, 1e6, 3000.0, 3000.0);
        let lp = build_lp(&p).unwrap();
        assert_eq!(lp.num_vars(), 2);
        assert_eq!(lp.num_rows(), 2);
    }

    #[test]
    fn det_with_ample_storage_ramps_up() {
        let p = one_unit(0.5, 1e6, 3000.0, 3000.0);
        let s = dispatch_det(&p).unwrap();
        assert_eq!(s.status, DispatchStatus::Optimal);
        let expect = (3000.0 + 1715.0) * 3600.0;
        assert!((s.u_star[0][0] - expect).abs() < 1e-3);
        let mut q = p.clone();
        q.epsilon = 0.3;
        assert_eq!(dispatch_det(&q).unwrap(), s);
    }

    #[test]
    fn zero_head_zero_objective() {
        let mut p = one_unit(0.5, 1e6, 3000.0, 3000.0);
        p.heads = vec![0.0];
        assert_eq!(dispatch_det(&p).unwrap().objective, 0.0);
    }

    #[test]
    fn bonferroni_multiplier_value() {
        let k = bonferroni_multiplier(0.05, 3, 1);
        assert!((norm_cdf(k) - (1.0 - 0.05 / 6.0)).abs() < 1e-12);
        assert!((k - 2.394).abs() < 1e-3);
    }

    #[test]
    fn bon_zero_sigma_is_det() {
        let mut p = one_unit(0.02, 0.0, 3000.0, 3000.0);
        p.sigma = Matrix::zeros(1, 1);
        let a = dispatch_det(&p).unwrap();
        let b = dispatch_bon(&p).unwrap();
        assert_eq!(a.u_star, b.u_star);
    }

    #[test]
    fn bon_margins_crossing_is_infeasible() {
        let p = one_unit(0.5, 2e8, 3000.0, 3000.0);
        assert_eq!(dispatch_bon(&p).unwrap().status, DispatchStatus::Infeasible);
    }

    #[test]
    fn slater_examples() {
        let mut p = one_unit(0.5, 1e6, 3000.0, 1715.0);
        let x = slater_point(&p).unwrap();
        assert!((x[0] * 8575.0 - 1715.0).abs() < 1e-9);
        p.u_prev = vec![8575.0 * 3600.0];
        p.cascade.units[0].r_down = 1715.0 * 3600.0;
        let x = slater_point(&p).unwrap();
        assert!((x[0] * 8575.0 - 6860.0).abs() < 1e-9);
    }

    #[test]
    fn line_search_univariate() {
        // F(lambda) = Phi(b(lambda)) with b moving from -1 to 4
        let f = |x: &[f64]| Ok(norm_cdf(-1.0 + 5.0 * x[0]));
        let (_, lam) =
            line_search_boundary(&[0.0], &[1.0], f, 0.05, LineSearchMethod::Bisection).unwrap();
        let exact = (norm_inv(0.95) + 1.0) / 5.0;
        // the search stops once |F - 0.95| <= 1e-6, i.e. within 1e-6 / F'(lambda)
        let slack = 1e-6 / (5.0 * crate::special::norm_pdf(norm_inv(0.95))) + 1e-8;
        assert!((lam - exact).abs() <= slack);
        let (_, lam2) =
            line_search_boundary(&[0.0], &[1.0], f, 0.05, LineSearchMethod::Illinois).unwrap();
        assert!((lam2 - exact).abs() <= slack);
        let (x, lam) =
            line_search_boundary(&[0.9], &[1.0], f, 0.05, LineSearchMethod::Bisection).unwrap();
        assert_eq!((x, lam), (vec![0.9], 0.0));
        assert!(
            line_search_boundary(&[0.0], &[0.1], f, 0.05, LineSearchMethod::Bisection).is_err()
        );
    }

    #[test]
    fn ssh_univariate_closed_form() {
        // low storage so the lower bound binds inside the release range
        let sd = 3.0e6;
        let p = one_unit(0.02, sd, 3000.0, 3000.0);
        let s = dispatch_ssh(&p, &SolverConfig::default()).unwrap();
        let r = p.cascade.units[0];
        let exact = p.v_prev[0] + p.mu[0][0] - r.v_min - norm_inv(0.95) * sd;
        assert_eq!(s.status, DispatchStatus::Optimal);
        assert!(
            (s.u_star[0][0] - exact).abs() / r.u_max < 1e-4,
            "{} vs {exact}",
            s.u_star[0][0]
        );
        assert!(s.cut_log.is_nonincreasing(1e-9));
        assert_eq!(s.risk_alloc.unwrap().shares, vec![1.0]);
    }

    #[test]
    fn ssh_zero_sigma_is_det() {
        let p = one_unit(0.02, 1.0, 3000.0, 3000.0);
        let d = dispatch_det(&p).unwrap();
        let s = dispatch_ssh(&p, &SolverConfig::default()).unwrap();
        assert!((d.u_star[0][0] - s.u_star[0][0]).abs() / 8575.0 / 3600.0 < 5e-4);
    }

    #[test]
    fn coarse_accuracy_refused() {
        let p = one_unit(0.05, 1e6, 3000.0, 3000.0);
        let cfg = SolverConfig {
            cdf_accuracy: 0.01,
            ..SolverConfig::default()
        };
        assert!(matches!(
            dispatch_ssh(&p, &cfg),
            Err(Error::AccuracyTooCoarse { .. })
        ));
    }
}
