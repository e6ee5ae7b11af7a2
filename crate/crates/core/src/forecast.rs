//! Autoregressive mean-inflow forecasting with exogenous upstream releases.
//!
//! The model works on per-unit z-scored data:
//!
//! ```text
//! mu_t = alpha0 + sum_l alpha_l q_{t-l} + sum_m beta_m u_{t-m}
//! ```
//!
//! Coefficients are shared across units and fitted by pooled ordinary least
//! squares; each unit keeps its own normalization so predictions can be
//! mapped back to physical units.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::linalg::{lstsq, LstsqOutcome, Matrix};
use crate::{Error, Result};

/// Affine map between physical values and normalized units.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Normalization {
    pub offset: f64,
    pub scale: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        offset: 0.0,
        scale: 1.0,
    };

    /// Z-score normalization from sample mean and standard deviation. A
    /// constant series keeps unit scale.
    pub fn z_score(xs: &[f64]) -> Self {
        let n = xs.len().max(1) as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let sd = libm::sqrt(var);
        Self {
            offset: mean,
            scale: if sd > 0.0 { sd } else { 1.0 },
        }
    }

    #[inline]
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.offset) / self.scale
    }

    #[inline]
    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.scale + self.offset
    }
}

/// Fitted mean-inflow model for one unit.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MeanModel {
    pub alpha0: f64,
    /// Autoregressive coefficients; `alpha[l-1]` multiplies `q_{t-l}`.
    pub alpha: Vec<f64>,
    /// Exogenous coefficients; `beta[m-1]` multiplies `u_{t-m}`.
    pub beta: Vec<f64>,
    pub inflow_norm: Normalization,
    pub release_norm: Normalization,
}

/// Goodness of fit on the normalized training data.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct FitReport {
    pub r2: f64,
    pub rmse: f64,
    pub mae: f64,
    /// Index of the first fitted time step in each series.
    pub start: usize,
    /// Normalized one-step residuals per unit, starting at `start`.
    pub residuals: Vec<Vec<f64>>,
}

impl MeanModel {
    /// Builds a model directly from coefficients (normalized units).
    pub fn new(alpha0: f64, alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let m = Self {
            alpha0,
            alpha,
            beta,
            inflow_norm: Normalization::IDENTITY,
            release_norm: Normalization::IDENTITY,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() {
            return Err(Error::invalid("autoregressive order must be at least 1"));
        }
        if !(self.inflow_norm.scale > 0.0 && self.release_norm.scale > 0.0) {
            return Err(Error::invalid("normalization scale must be positive"));
        }
        Ok(())
    }

    pub fn ar_order(&self) -> usize {
        self.alpha.len()
    }

    pub fn exo_order(&self) -> usize {
        self.beta.len()
    }

    /// Unit-specific copy with its own normalization.
    pub fn with_normalization(&self, inflow: Normalization, release: Normalization) -> Self {
        Self {
            inflow_norm: inflow,
            release_norm: release,
            ..self.clone()
        }
    }

    /// Physical (m³/s or whatever unit the model was fitted in) prediction
    /// from physical histories, most recent first.
    pub fn predict_physical(&self, q_hist: &[f64], u_hist: &[f64]) -> Result<f64> {
        let q: Vec<f64> = q_hist
            .iter()
            .take(self.ar_order())
            .map(|&x| self.inflow_norm.normalize(x))
            .collect();
        let u: Vec<f64> = u_hist
            .iter()
            .take(self.exo_order())
            .map(|&x| self.release_norm.normalize(x))
            .collect();
        predict_mean(self, &q, &u).map(|z| self.inflow_norm.denormalize(z))
    }
}

/// One-step mean forecast in normalized units.
///
/// Histories are normalized and ordered most recent first:
/// `q_hist[0] = q_{t-1}`, `u_hist[0] = u_{t-1}`. Extra history is ignored.
pub fn predict_mean(model: &MeanModel, q_hist: &[f64], u_hist: &[f64]) -> Result<f64> {
    if q_hist.len() < model.ar_order() {
        return Err(Error::ShortHistory {
            needed: model.ar_order(),
            got: q_hist.len(),
        });
    }
    if u_hist.len() < model.exo_order() {
        return Err(Error::ShortHistory {
            needed: model.exo_order(),
            got: u_hist.len(),
        });
    }
    let ar: f64 = model.alpha.iter().zip(q_hist).map(|(a, q)| a * q).sum();
    let exo: f64 = model.beta.iter().zip(u_hist).map(|(b, u)| b * u).sum();
    Ok(model.alpha0 + ar + exo)
}

fn column_name(j: usize, l: usize) -> String {
    if j == 0 {
        String::from("intercept")
    } else if j <= l {
        format!("q[t-{j}]")
    } else {
        format!("u[t-{}]", j - l)
    }
}

/// Pooled least-squares fit of the shared coefficients.
///
/// `inflows[i]` is the inflow series of unit `i`; `upstream_releases[i]` the
/// release series of its upstream neighbour (ignored when `m == 0`). All
/// series must have equal length greater than `l + m + 2`.
pub fn fit_mean_model(
    inflows: &[Vec<f64>],
    upstream_releases: &[Vec<f64>],
    l: usize,
    m: usize,
) -> Result<(Vec<MeanModel>, FitReport)> {
    if l < 1 {
        return Err(Error::invalid("autoregressive order must be at least 1"));
    }
    if inflows.is_empty() {
        return Err(Error::invalid("no inflow series"));
    }
    let len = inflows[0].len();
    if inflows.iter().any(|s| s.len() != len) {
        return Err(Error::invalid("inflow series have different lengths"));
    }
    if len <= l + m + 2 {
        return Err(Error::ShortHistory {
            needed: l + m + 3,
            got: len,
        });
    }
    if m > 0 {
        if upstream_releases.len() != inflows.len() {
            return Err(Error::invalid("need one upstream release series per unit"));
        }
        if upstream_releases.iter().any(|s| s.len() != len) {
            return Err(Error::invalid("release series length differs from inflows"));
        }
    }
    let all_finite = inflows.iter().flatten().all(|v| v.is_finite())
        && (m == 0 || upstream_releases.iter().flatten().all(|v| v.is_finite()));
    if !all_finite {
        return Err(Error::invalid(
            "series contain missing or non-finite values",
        ));
    }

    let q_norms: Vec<Normalization> = inflows.iter().map(|s| Normalization::z_score(s)).collect();
    let u_norms: Vec<Normalization> = if m > 0 {
        upstream_releases
            .iter()
            .map(|s| Normalization::z_score(s))
            .collect()
    } else {
        vec![Normalization::IDENTITY; inflows.len()]
    };
    let zq: Vec<Vec<f64>> = inflows
        .iter()
        .zip(&q_norms)
        .map(|(s, n)| s.iter().map(|&x| n.normalize(x)).collect())
        .collect();
    let zu: Vec<Vec<f64>> = if m > 0 {
        upstream_releases
            .iter()
            .zip(&u_norms)
            .map(|(s, n)| s.iter().map(|&x| n.normalize(x)).collect())
            .collect()
    } else {
        Vec::new()
    };

    let start = l.max(m);
    let p = 1 + l + m;
    let rows = (len - start) * inflows.len();
    let mut x = Matrix::zeros(rows, p);
    let mut y = Vec::with_capacity(rows);
    let mut r = 0;
    for (unit, q) in zq.iter().enumerate() {
        for t in start..len {
            let row = x.row_mut(r);
            row[0] = 1.0;
            for k in 1..=l {
                row[k] = q[t - k];
            }
            for k in 1..=m {
                row[l + k] = zu[unit][t - k];
            }
            y.push(q[t]);
            r += 1;
        }
    }

    // Identically-zero regressors (constant series) carry no information and
    // get a zero coefficient; anything else collinear is an error.
    let active: Vec<usize> = (0..p)
        .filter(|&j| j == 0 || (0..rows).any(|i| x[(i, j)] != 0.0))
        .collect();
    let mut xa = Matrix::zeros(rows, active.len());
    for i in 0..rows {
        for (a, &j) in active.iter().enumerate() {
            xa[(i, a)] = x[(i, j)];
        }
    }
    let coef_active = match lstsq(&xa, &y, 1e-9) {
        LstsqOutcome::Solved(c) => c,
        LstsqOutcome::RankDeficient(cols) => {
            return Err(Error::RankDeficient {
                columns: cols.iter().map(|&a| column_name(active[a], l)).collect(),
            })
        }
    };
    let mut coef = vec![0.0; p];
    for (a, &j) in active.iter().enumerate() {
        coef[j] = coef_active[a];
    }

    let base = MeanModel {
        alpha0: coef[0],
        alpha: coef[1..=l].to_vec(),
        beta: coef[l + 1..].to_vec(),
        inflow_norm: Normalization::IDENTITY,
        release_norm: Normalization::IDENTITY,
    };

    let mut residuals = Vec::with_capacity(inflows.len());
    let (mut ssr, mut sae) = (0.0, 0.0);
    for unit in 0..inflows.len() {
        let mut res = Vec::with_capacity(len - start);
        for t in start..len {
            let qh: Vec<f64> = (1..=l).map(|k| zq[unit][t - k]).collect();
            let uh: Vec<f64> = (1..=m).map(|k| zu[unit][t - k]).collect();
            let e = zq[unit][t] - predict_mean(&base, &qh, &uh)?;
            ssr += e * e;
            sae += libm::fabs(e);
            res.push(e);
        }
        residuals.push(res);
    }
    let ybar = y.iter().sum::<f64>() / rows as f64;
    let sst: f64 = y.iter().map(|v| (v - ybar) * (v - ybar)).sum();
    let r2 = if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 };
    let report = FitReport {
        r2,
        rmse: libm::sqrt(ssr / rows as f64),
        mae: sae / rows as f64,
        start,
        residuals,
    };
    let models = q_norms
        .iter()
        .zip(&u_norms)
        .map(|(qn, un)| base.with_normalization(*qn, *un))
        .collect();
    Ok((models, report))
}
