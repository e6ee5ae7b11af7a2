//! Forecast-error covariance models.
//!
//! * DIU: a static sample covariance of historical residuals.
//! * DDU: per-unit GARCH-X conditional variances driven by the upstream
//!   release, combined with a constant correlation matrix,
//!   `Sigma_t = D_t R D_t`.
//!
//! Parameter names: `(omega, alpha_e, beta_v, gamma)` correspond to the
//! baseline variance, squared-residual weight, variance persistence and
//! upstream-release weight of the recursion
//!
//! ```text
//! s2_t = omega + alpha_e * e_{t-1}^2 + beta_v * s2_{t-1} + gamma * u_{t-1}
//! ```
//!
//! Residuals are in normalized flow units and `u` is the upstream release as
//! a fraction of that unit's maximum release.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::linalg::{
    cholesky, lstsq, project_to_correlation, symmetric_eigen, LstsqOutcome, Matrix,
};
use crate::{Error, Result};

/// Static covariance of forecast residuals.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct DiuModel {
    pub sigma: Vec<f64>,
    pub cov: Matrix,
}

impl DiuModel {
    /// Builds `diag(sigma) R diag(sigma)`.
    pub fn from_sigma_corr(sigma: &[f64], corr: &Matrix) -> Self {
        let n = sigma.len();
        let mut cov = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                cov[(i, j)] = sigma[i] * corr[(i, j)] * sigma[j];
            }
        }
        Self {
            sigma: sigma.to_vec(),
            cov,
        }
    }
}

/// Sample covariance (Bessel-corrected) of a `T x n` residual matrix.
pub fn fit_diu(residuals: &Matrix) -> Result<DiuModel> {
    let (t, n) = (residuals.rows(), residuals.cols());
    if t < 2 {
        return Err(Error::ShortHistory { needed: 2, got: t });
    }
    let means: Vec<f64> = (0..n)
        .map(|j| (0..t).map(|i| residuals[(i, j)]).sum::<f64>() / t as f64)
        .collect();
    let mut cov = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..t)
                .map(|k| (residuals[(k, i)] - means[i]) * (residuals[(k, j)] - means[j]))
                .sum::<f64>()
                / (t as f64 - 1.0);
            cov[(i, j)] = s;
            cov[(j, i)] = s;
        }
    }
    let sigma = cov.diag().iter().map(|v| libm::sqrt(v.max(0.0))).collect();
    Ok(DiuModel { sigma, cov })
}

/// Pearson correlation of a `T x n` residual matrix, projected onto the
/// nearest valid correlation matrix when it is not positive semidefinite.
pub fn fit_correlation(residuals: &Matrix) -> Result<Matrix> {
    let diu = fit_diu(residuals)?;
    let n = residuals.cols();
    if let Some(column) = diu.sigma.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::ZeroVariance { column });
    }
    let mut corr = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            corr[(i, j)] = (diu.cov[(i, j)] / (diu.sigma[i] * diu.sigma[j])).clamp(-1.0, 1.0);
        }
        corr[(i, i)] = 1.0;
    }
    let (vals, _) = symmetric_eigen(&corr);
    if vals.iter().any(|&v| v < -1e-12) {
        corr = project_to_correlation(&corr, 1e-10);
    }
    Ok(corr)
}

/// GARCH-X variance recursion coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct GarchXParams {
    pub omega: f64,
    pub alpha_e: f64,
    pub beta_v: f64,
    pub gamma: f64,
}

impl GarchXParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0) {
            return Err(Error::invalid("omega must be positive"));
        }
        if !(self.alpha_e >= 0.0 && self.beta_v >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::invalid("GARCH-X weights must be nonnegative"));
        }
        if !(self.alpha_e + self.beta_v < 1.0) {
            return Err(Error::invalid("alpha_e + beta_v must be below 1"));
        }
        Ok(())
    }

    /// Variance that makes the recursion constant: `omega = s2`, no dynamics.
    pub fn constant(s2: f64) -> Self {
        Self {
            omega: s2,
            alpha_e: 0.0,
            beta_v: 0.0,
            gamma: 0.0,
        }
    }

    /// Next conditional variance from the previous one, the last residual
    /// and the last upstream release.
    #[inline]
    pub fn next_variance(&self, prev_s2: f64, resid: f64, release_up: f64) -> f64 {
        self.omega + self.alpha_e * resid * resid + self.beta_v * prev_s2 + self.gamma * release_up
    }

    /// Upper end of the stationary band for releases bounded by `u_max`.
    pub fn stationary_upper(&self, u_max: f64) -> f64 {
        (self.omega + self.gamma * u_max) / (1.0 - self.alpha_e - self.beta_v)
    }
}

/// Conditional-variance state of the cascade.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct DduState {
    /// Current conditional variances.
    pub sigma2: Vec<f64>,
    /// Last observed normalized residual per unit.
    pub last_resid: Vec<f64>,
    /// Last upstream release per unit (fraction of maximum release).
    pub last_release_up: Vec<f64>,
    /// Constant correlation matrix.
    pub corr: Matrix,
}

impl DduState {
    pub fn new(sigma2: Vec<f64>, corr: Matrix) -> Result<Self> {
        let n = sigma2.len();
        let s = Self {
            last_resid: vec![0.0; n],
            last_release_up: vec![0.0; n],
            sigma2,
            corr,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.sigma2.len();
        if self.corr.rows() != n || !self.corr.is_square() {
            return Err(Error::invalid(
                "correlation matrix does not match unit count",
            ));
        }
        if self.last_resid.len() != n || self.last_release_up.len() != n {
            return Err(Error::invalid("state vectors have inconsistent lengths"));
        }
        if self.sigma2.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("conditional variances must be positive"));
        }
        if !self.corr.is_symmetric(1e-12) {
            return Err(Error::invalid("correlation matrix must be symmetric"));
        }
        for i in 0..n {
            if (self.corr[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(Error::invalid("correlation diagonal must be one"));
            }
            for j in 0..n {
                if self.corr[(i, j)].abs() > 1.0 + 1e-12 {
                    return Err(Error::invalid("correlation entries must lie in [-1, 1]"));
                }
            }
        }
        let (vals, _) = symmetric_eigen(&self.corr);
        if vals.iter().any(|&v| v < -1e-10) {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sigma2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma2.is_empty()
    }

    /// Advances every unit's conditional variance one step.
    pub fn step(&mut self, params: &GarchXParams) {
        for i in 0..self.len() {
            self.sigma2[i] = garchx_step(params, self, i);
        }
    }

    /// Records the realized residuals and upstream releases of the step.
    pub fn observe(&mut self, resid: &[f64], release_up: &[f64]) {
        self.last_resid.copy_from_slice(resid);
        self.last_release_up.copy_from_slice(release_up);
    }
}

/// New conditional variance of unit `i`.
pub fn garchx_step(params: &GarchXParams, state: &DduState, i: usize) -> f64 {
    params.next_variance(
        state.sigma2[i],
        state.last_resid[i],
        state.last_release_up[i],
    )
}

/// `D R D` with `D = diag(sqrt(sigma2))`.
pub fn assemble_covariance(state: &DduState) -> Matrix {
    let d: Vec<f64> = state.sigma2.iter().map(|&s| libm::sqrt(s)).collect();
    DiuModel::from_sigma_corr(&d, &state.corr).cov
}

/// Centered rolling mean of squared residuals, used as a smoothed
/// conditional-variance target.
pub fn rolling_variance(residuals: &[f64], window: usize) -> Vec<f64> {
    let n = residuals.len();
    let w = window.max(1);
    let half = w / 2;
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (lo + w).min(n);
            let lo = hi.saturating_sub(w);
            let seg = &residuals[lo..hi];
            seg.iter().map(|e| e * e).sum::<f64>() / seg.len() as f64
        })
        .collect()
}

/// Options for the likelihood search.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct GarchFitOptions {
    pub restarts: usize,
    pub max_iter: usize,
    pub tolerance: f64,
    pub smoothing_window: usize,
    pub seed: u64,
}

impl Default for GarchFitOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iter: 4000,
            tolerance: 1e-8,
            smoothing_window: 24,
            seed: 0x6a72_6368,
        }
    }
}

/// Gaussian log-likelihood of residual series under the recursion. The
/// first variance of each series is its sample variance.
pub fn garchx_log_likelihood(params: &GarchXParams, series: &[(&[f64], &[f64])]) -> f64 {
    let mut ll = 0.0;
    for (e, u) in series {
        if e.len() < 2 {
            continue;
        }
        let mut s2 = e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64;
        for t in 1..e.len() {
            s2 = params.next_variance(s2, e[t - 1], u[t - 1]);
            if !(s2 > 0.0) || !s2.is_finite() {
                return f64::NEG_INFINITY;
            }
            ll += -0.5 * libm::log(s2) - e[t] * e[t] / (2.0 * s2);
        }
    }
    ll
}

/// Maximum-likelihood GARCH-X fit for one residual series.
pub fn fit_garchx(residuals: &[f64], upstream_releases: &[f64]) -> Result<GarchXParams> {
    fit_garchx_pooled(
        &[(residuals, upstream_releases)],
        &GarchFitOptions::default(),
    )
}

// Search coordinates: omega and gamma scaled by the residual variance so all
// four coordinates are O(1).
struct Scaling {
    var: f64,
    gamma_unit: f64,
}

impl Scaling {
    fn to_params(&self, x: &[f64; 4]) -> GarchXParams {
        GarchXParams {
            omega: x[0] * self.var,
            alpha_e: x[1],
            beta_v: x[2],
            gamma: x[3] * self.gamma_unit,
        }
    }

    fn from_params(&self, p: &GarchXParams) -> [f64; 4] {
        [
            p.omega / self.var,
            p.alpha_e,
            p.beta_v,
            p.gamma / self.gamma_unit,
        ]
    }
}

const OMEGA_FLOOR: f64 = 1e-8;
const PERSISTENCE_CAP: f64 = 0.999;

fn project(x: &mut [f64; 4]) {
    x[0] = x[0].max(OMEGA_FLOOR);
    x[1] = x[1].max(0.0);
    x[2] = x[2].max(0.0);
    x[3] = x[3].max(0.0);
    let s = x[1] + x[2];
    if s > PERSISTENCE_CAP {
        x[1] *= PERSISTENCE_CAP / s;
        x[2] *= PERSISTENCE_CAP / s;
    }
}

/// Projected Nelder–Mead minimisation. Returns the best point, its value and
/// whether the simplex collapsed below `tol`.
fn nelder_mead<F>(
    f: &F,
    start: [f64; 4],
    step: f64,
    max_iter: usize,
    tol: f64,
) -> ([f64; 4], f64, bool)
where
    F: Fn(&[f64; 4]) -> f64,
{
    let mut pts: Vec<[f64; 4]> = Vec::with_capacity(5);
    let mut p0 = start;
    project(&mut p0);
    pts.push(p0);
    for k in 0..4 {
        let mut p = p0;
        p[k] += if p[k].abs() > 1e-3 {
            step * p[k].abs().max(0.05)
        } else {
            step * 0.05
        };
        project(&mut p);
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(f).collect();
    let mut converged = false;
    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| {
            vals[a]
                .partial_cmp(&vals[b])
                .unwrap_or(core::cmp::Ordering::Equal)
        });
        pts = order.iter().map(|&i| pts[i]).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        let spread = vals[4] - vals[0];
        let size = (1..5)
            .map(|i| {
                (0..4)
                    .map(|k| (pts[i][k] - pts[0][k]).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if spread.is_finite() && spread <= tol * (1.0 + vals[0].abs()) && size < 1e-6 {
            converged = true;
            break;
        }
        let mut centroid = [0.0; 4];
        for p in &pts[..4] {
            for k in 0..4 {
                centroid[k] += p[k] / 4.0;
            }
        }
        let along = |t: f64| {
            let mut p = [0.0; 4];
            for k in 0..4 {
                p[k] = centroid[k] + t * (pts[4][k] - centroid[k]);
            }
            project(&mut p);
            p
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                pts[4] = xe;
                vals[4] = fe;
            } else {
                pts[4] = xr;
                vals[4] = fr;
            }
        } else if fr < vals[3] {
            pts[4] = xr;
            vals[4] = fr;
        } else {
            let (xc, fc) = if fr < vals[4] {
                let x = along(-0.5);
                (x, f(&x))
            } else {
                let x = along(0.5);
                (x, f(&x))
            };
            if fc < vals[4].min(fr) {
                pts[4] = xc;
                vals[4] = fc;
            } else {
                for i in 1..5 {
                    for k in 0..4 {
                        pts[i][k] = pts[0][k] + 0.5 * (pts[i][k] - pts[0][k]);
                    }
                    project(&mut pts[i]);
                    vals[i] = f(&pts[i]);
                }
            }
        }
    }
    let best = (0..5)
        .min_by(|&a, &b| {
            vals[a]
                .partial_cmp(&vals[b])
                .unwrap_or(core::cmp::Ordering::Equal)
        })
        .unwrap_or(0);
    (pts[best], vals[best], converged)
}

/// Maximum-likelihood fit with parameters shared across several residual
/// series (one per unit). Each entry pairs residuals with the upstream
/// release driver of the same length.
pub fn fit_garchx_pooled(
    series: &[(&[f64], &[f64])],
    opts: &GarchFitOptions,
) -> Result<GarchXParams> {
    let total: usize = series.iter().map(|(e, _)| e.len()).sum();
    if total < 50 {
        return Err(Error::ShortHistory {
            needed: 50,
            got: total,
        });
    }
    if series.iter().any(|(e, u)| e.len() != u.len()) {
        return Err(Error::invalid("residual and release series lengths differ"));
    }
    if series
        .iter()
        .any(|(e, u)| e.iter().chain(u.iter()).any(|v| !v.is_finite()))
    {
        return Err(Error::invalid("series contain non-finite values"));
    }
    let var = series
        .iter()
        .flat_map(|(e, _)| e.iter())
        .map(|x| x * x)
        .sum::<f64>()
        / total as f64;
    if !(var > 0.0) {
        return Err(Error::invalid(
            "residuals are identically zero; likelihood is degenerate",
        ));
    }
    let mean_u = series.iter().flat_map(|(_, u)| u.iter()).sum::<f64>() / total as f64;
    let scaling = Scaling {
        var,
        gamma_unit: if mean_u.abs() > 1e-12 {
            var / mean_u.abs()
        } else {
            var
        },
    };
    let objective = |x: &[f64; 4]| {
        let ll = garchx_log_likelihood(&scaling.to_params(x), series);
        if ll.is_finite() {
            -ll / total as f64
        } else {
            f64::INFINITY
        }
    };

    let mut starts = Vec::with_capacity(opts.restarts.max(1));
    starts.push(scaling.from_params(&target_regression_start(series, opts.smoothing_window, var)));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    while starts.len() < opts.restarts.max(1) {
        starts.push([
            rng.random_range(0.05..1.0),
            rng.random_range(0.0..0.3),
            rng.random_range(0.0..0.8),
            rng.random_range(0.0..1.0),
        ]);
    }

    let tol = opts.tolerance / total as f64;
    let mut best: Option<([f64; 4], f64)> = None;
    let mut any_converged = false;
    for s in starts {
        // restart from the previous optimum until the simplex stops moving
        let (mut x, mut fx, mut conv) = nelder_mead(&objective, s, 0.5, opts.max_iter, tol);
        for _ in 0..3 {
            let (x2, f2, c2) = nelder_mead(&objective, x, 0.1, opts.max_iter, tol);
            let improved = f2 < fx - tol * (1.0 + fx.abs());
            x = x2;
            fx = f2;
            conv = c2;
            if !improved {
                break;
            }
        }
        any_converged |= conv;
        if best.as_ref().is_none_or(|(_, fb)| fx < *fb) {
            best = Some((x, fx));
        }
    }
    let (x, fx) = best.expect("at least one start");
    let params = scaling.to_params(&x);
    if !any_converged || !fx.is_finite() {
        return Err(Error::NoConvergence {
            best: params,
            log_likelihood: -fx * total as f64,
        });
    }
    Ok(params)
}

// Starting point from regressing the smoothed variance target on its lag,
// the lagged squared residual and the lagged release.
fn target_regression_start(series: &[(&[f64], &[f64])], window: usize, var: f64) -> GarchXParams {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (e, u) in series {
        let target = rolling_variance(e, window);
        for t in 1..e.len() {
            rows.push([1.0, e[t - 1] * e[t - 1], target[t - 1], u[t - 1]]);
            y.push(target[t]);
        }
    }
    let fallback = GarchXParams {
        omega: 0.5 * var,
        alpha_e: 0.05,
        beta_v: 0.3,
        gamma: 0.0,
    };
    if rows.len() < 8 {
        return fallback;
    }
    let x = Matrix::from_rows(&rows);
    match lstsq(&x, &y, 1e-10) {
        LstsqOutcome::Solved(c) => {
            let mut p = [c[0] / var, c[1], c[2], 0.0];
            project(&mut p);
            GarchXParams {
                omega: p[0] * var,
                alpha_e: p[1],
                beta_v: p[2],
                gamma: c[3].max(0.0),
            }
        }
        LstsqOutcome::RankDeficient(_) => fallback,
    }
}

/// True when a covariance matrix admits a Cholesky factor after the same
/// relative jitter the probability oracle applies.
pub fn is_psd_with_jitter(cov: &Matrix) -> bool {
    let n = cov.rows();
    let jitter = 1e-10 * cov.trace() / n.max(1) as f64;
    let mut c = cov.clone();
    for i in 0..n {
        c[(i, i)] += jitter;
    }
    cholesky(&c).is_some()
}
