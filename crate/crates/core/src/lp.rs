//! Dense bounded-variable primal simplex.
//!
//! Solves `max c'x  s.t.  A x <= b,  lo <= x <= hi` with a two-phase method.
//! Every variable needs a finite lower bound. Entering and leaving variables
//! follow Bland's rule, so runs are reproducible and cannot cycle.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::{Error, Result};

pub const LP_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct LpModel {
    /// Objective coefficients (maximised).
    pub c: Vec<f64>,
    /// Row-major constraint matrix, one row per `<=` constraint.
    pub a: Matrix,
    pub b: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: LpStatus,
    pub pivots: usize,
}

impl LpModel {
    pub fn new(c: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        let n = c.len();
        Self {
            c,
            a: Matrix::zeros(0, n),
            b: Vec::new(),
            lower,
            upper,
        }
    }

    pub fn num_vars(&self) -> usize {
        self.c.len()
    }

    pub fn num_rows(&self) -> usize {
        self.b.len()
    }

    /// Appends `row' x <= rhs`.
    pub fn push_row(&mut self, row: &[f64], rhs: f64) {
        let n = self.num_vars();
        assert_eq!(row.len(), n, "row length must match the variable count");
        let m = self.num_rows();
        let mut data = Vec::with_capacity((m + 1) * n);
        data.extend_from_slice(self.a.as_slice());
        data.extend_from_slice(row);
        self.a = Matrix::from_vec(m + 1, n, data);
        self.b.push(rhs);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        if self.lower.len() != n
            || self.upper.len() != n
            || self.a.cols() != n
            || self.a.rows() != self.b.len()
        {
            return Err(Error::invalid("LP dimensions are inconsistent"));
        }
        for j in 0..n {
            if !self.lower[j].is_finite() {
                return Err(Error::invalid(
                    "every LP variable needs a finite lower bound",
                ));
            }
            if self.upper[j].is_nan() || self.upper[j] < self.lower[j] {
                return Err(Error::Infeasible("variable bounds cross".into()));
            }
        }
        if self
            .c
            .iter()
            .chain(self.a.as_slice())
            .chain(&self.b)
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("LP data must be finite"));
        }
        Ok(())
    }

    /// Largest violation of rows and bounds at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.num_rows() {
            let lhs: f64 = self.a.row(i).iter().zip(x).map(|(a, x)| a * x).sum();
            worst = worst.max(lhs - self.b[i]);
        }
        for j in 0..self.num_vars() {
            worst = worst.max(self.lower[j] - x[j]).max(x[j] - self.upper[j]);
        }
        worst
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.c.iter().zip(x).map(|(c, x)| c * x).sum()
    }
}

struct Tableau {
    m: usize,
    cols: usize,
    t: Vec<f64>,
    beta: Vec<f64>,
    basis: Vec<usize>,
    is_basic: Vec<bool>,
    value: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    reduced: Vec<f64>,
    pivots: usize,
}

enum Step {
    Optimal,
    Unbounded,
    Moved,
}

impl Tableau {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * self.cols + j]
    }

    fn price(&mut self, cost: &[f64]) {
        for j in 0..self.cols {
            let mut r = cost[j];
            for i in 0..self.m {
                r -= cost[self.basis[i]] * self.at(i, j);
            }
            self.reduced[j] = if self.is_basic[j] { 0.0 } else { r };
        }
    }

    fn objective(&self, cost: &[f64]) -> f64 {
        (0..self.cols).map(|j| cost[j] * self.current(j)).sum()
    }

    fn current(&self, j: usize) -> f64 {
        if self.is_basic[j] {
            let r = self
                .basis
                .iter()
                .position(|&b| b == j)
                .expect("basic variable in basis");
            self.beta[r]
        } else {
            self.value[j]
        }
    }

    // One Bland step of the minimisation with the current reduced costs.
    fn step(&mut self, tol: f64) -> Step {
        let mut entering = None;
        for j in 0..self.cols {
            if self.is_basic[j] || self.hi[j] - self.lo[j] <= 0.0 {
                continue;
            }
            let r = self.reduced[j];
            let at_lower = self.value[j] <= self.lo[j];
            if at_lower && r < -tol {
                entering = Some((j, 1.0));
                break;
            }
            if !at_lower && r > tol {
                entering = Some((j, -1.0));
                break;
            }
        }
        let Some((j, dir)) = entering else {
            return Step::Optimal;
        };
        // ratio test; ties go to the smallest variable index
        let mut t_max = self.hi[j] - self.lo[j];
        let mut leave: Option<(usize, bool)> = None;
        let mut leave_var = usize::MAX;
        for i in 0..self.m {
            let alpha = self.at(i, j);
            if alpha.abs() <= 1e-12 {
                continue;
            }
            let change = -dir * alpha;
            let bv = self.basis[i];
            let (limit, to_upper) = if change < 0.0 {
                ((self.beta[i] - self.lo[bv]) / -change, false)
            } else {
                if self.hi[bv].is_infinite() {
                    continue;
                }
                ((self.hi[bv] - self.beta[i]) / change, true)
            };
            let limit = limit.max(0.0);
            if limit < t_max - 1e-12
                || (limit <= t_max + 1e-12 && leave.is_some() && bv < leave_var)
            {
                t_max = limit;
                leave = Some((i, to_upper));
                leave_var = bv;
            }
        }
        if t_max.is_infinite() {
            return Step::Unbounded;
        }
        for i in 0..self.m {
            self.beta[i] -= dir * t_max * self.at(i, j);
        }
        let entering_value = self.value[j] + dir * t_max;
        match leave {
            None => {
                // bound flip
                self.value[j] = if dir > 0.0 { self.hi[j] } else { self.lo[j] };
            }
            Some((r, to_upper)) => {
                let bv = self.basis[r];
                self.value[bv] = if to_upper { self.hi[bv] } else { self.lo[bv] };
                self.is_basic[bv] = false;
                self.pivot(r, j);
                self.basis[r] = j;
                self.is_basic[j] = true;
                self.beta[r] = entering_value;
                self.pivots += 1;
            }
        }
        Step::Moved
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let cols = self.cols;
        let p = self.at(r, j);
        for k in 0..cols {
            self.t[r * cols + k] /= p;
        }
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.at(i, j);
            if f == 0.0 {
                continue;
            }
            for k in 0..cols {
                self.t[i * cols + k] -= f * self.t[r * cols + k];
            }
        }
        let f = self.reduced[j];
        if f != 0.0 {
            for k in 0..cols {
                self.reduced[k] -= f * self.t[r * cols + k];
            }
        }
        self.reduced[j] = 0.0;
    }

    fn run(&mut self, tol: f64, max_iter: usize) -> Option<bool> {
        for _ in 0..max_iter {
            match self.step(tol) {
                Step::Optimal => return Some(true),
                Step::Unbounded => return Some(false),
                Step::Moved => {}
            }
        }
        None
    }
}

/// Solves the model. Errors only on malformed input; infeasibility and
/// unboundedness are reported through the status.
pub fn solve_lp(model: &LpModel) -> Result<LpSolution> {
    model.validate()?;
    let n = model.num_vars();
    let m = model.num_rows();
    let x0: Vec<f64> = model.lower.clone();
    let resid: Vec<f64> = (0..m)
        .map(|i| {
            model.b[i]
                - model
                    .a
                    .row(i)
                    .iter()
                    .zip(&x0)
                    .map(|(a, x)| a * x)
                    .sum::<f64>()
        })
        .collect();
    let arts: Vec<usize> = (0..m).filter(|&i| resid[i] < 0.0).collect();
    let cols = n + m + arts.len();
    let mut t = vec![0.0; m * cols];
    let mut lo = model.lower.clone();
    let mut hi = model.upper.clone();
    lo.extend(core::iter::repeat_n(0.0, m + arts.len()));
    hi.extend(core::iter::repeat_n(f64::INFINITY, m + arts.len()));
    let mut basis = vec![0; m];
    let mut beta = vec![0.0; m];
    let mut is_basic = vec![false; cols];
    let mut value = lo.clone();
    for j in 0..n {
        value[j] = x0[j];
    }
    for i in 0..m {
        let row = &mut t[i * cols..(i + 1) * cols];
        row[..n].copy_from_slice(model.a.row(i));
        row[n + i] = 1.0;
    }
    for (k, &i) in arts.iter().enumerate() {
        // a'x + s - art = b with art basic at -resid; express row in basis
        let row = &mut t[i * cols..(i + 1) * cols];
        row[n + m + k] = -1.0;
        for v in row.iter_mut() {
            *v = -*v;
        }
        basis[i] = n + m + k;
        beta[i] = -resid[i];
    }
    for i in 0..m {
        if resid[i] >= 0.0 {
            basis[i] = n + i;
            beta[i] = resid[i];
        }
        is_basic[basis[i]] = true;
    }
    let mut tab = Tableau {
        m,
        cols,
        t,
        beta,
        basis,
        is_basic,
        value,
        lo,
        hi,
        reduced: vec![0.0; cols],
        pivots: 0,
    };
    let max_iter = 200 * (m + cols) + 1000;
    let scale = 1.0 + model.b.iter().fold(0.0f64, |a, b| a.max(b.abs()));

    if !arts.is_empty() {
        let mut cost1 = vec![0.0; cols];
        for k in 0..arts.len() {
            cost1[n + m + k] = 1.0;
        }
        tab.price(&cost1);
        if tab.run(LP_TOL, max_iter).is_none() {
            return Ok(finish(model, &tab, LpStatus::IterationLimit));
        }
        if tab.objective(&cost1) > LP_TOL * scale {
            return Ok(finish(model, &tab, LpStatus::Infeasible));
        }
        for k in 0..arts.len() {
            tab.hi[n + m + k] = 0.0;
            if !tab.is_basic[n + m + k] {
                tab.value[n + m + k] = 0.0;
            }
        }
    }
    let mut cost2 = vec![0.0; cols];
    for j in 0..n {
        cost2[j] = -model.c[j];
    }
    tab.price(&cost2);
    let status = match tab.run(LP_TOL, max_iter) {
        None => LpStatus::IterationLimit,
        Some(true) => LpStatus::Optimal,
        Some(false) => LpStatus::Unbounded,
    };
    Ok(finish(model, &tab, status))
}

fn finish(model: &LpModel, tab: &Tableau, status: LpStatus) -> LpSolution {
    let n = model.num_vars();
    let mut x: Vec<f64> = (0..n).map(|j| tab.current(j)).collect();
    for j in 0..n {
        // snap round-off back inside the box
        x[j] = x[j].clamp(model.lower[j], model.upper[j]);
    }
    LpSolution {
        objective: model.objective(&x),
        x,
        status,
        pivots: tab.pivots,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_variable() {
        let mut m = LpModel::new(vec![1.0], vec![0.0], vec![f64::INFINITY]);
        m.push_row(&[1.0], 3.0);
        let s = solve_lp(&m).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.x[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_toy() {
        let mut m = LpModel::new(vec![1.0], vec![0.0], vec![f64::INFINITY]);
        m.push_row(&[1.0], -1.0);
        assert_eq!(solve_lp(&m).unwrap().status, LpStatus::Infeasible);
    }

    #[test]
    fn unbounded_toy() {
        let mut m = LpModel::new(vec![1.0, 1.0], vec![0.0, 0.0], vec![f64::INFINITY; 2]);
        m.push_row(&[1.0, -1.0], 1.0);
        assert_eq!(solve_lp(&m).unwrap().status, LpStatus::Unbounded);
    }

    #[test]
    fn bound_flip_only() {
        let m = LpModel::new(vec![2.0, -1.0], vec![0.0, 1.0], vec![4.0, 3.0]);
        let s = solve_lp(&m).unwrap();
        assert_eq!(s.x, vec![4.0, 1.0]);
        assert_eq!(s.objective, 7.0);
    }

    #[test]
    fn equality_via_two_rows() {
        // x + y = 2 with x >= 1.5: max y
        let mut m = LpModel::new(vec![0.0, 1.0], vec![1.5, 0.0], vec![10.0, 10.0]);
        m.push_row(&[1.0, 1.0], 2.0);
        m.push_row(&[-1.0, -1.0], -2.0);
        let s = solve_lp(&m).unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert!((s.x[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_free_variable() {
        let m = LpModel::new(vec![1.0], vec![f64::NEG_INFINITY], vec![1.0]);
        assert!(solve_lp(&m).is_err());
    }
}
