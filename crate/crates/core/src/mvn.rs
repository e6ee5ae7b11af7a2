//! Rectangle probabilities of the multivariate normal distribution and their
//! derivatives with respect to the rectangle bounds.
//!
//! The probability uses Genz's separation-of-variables transform: after a
//! Cholesky factorisation (with optional variable reordering) the integral
//! becomes an `(n-1)`-dimensional integral over the unit cube, estimated by
//! randomly shifted Korobov lattice rules with the baker's transform. The
//! spread across shifts gives the error estimate.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::special::{bvn_cdf, norm_cdf, norm_inv, norm_pdf};
use crate::{Error, Result};

/// Largest supported dimension.
pub const MAX_DIM: usize = 50;

/// Axis-aligned box `lower <= x <= upper`. Entries may be infinite.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Rectangle {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Rectangle {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let r = Self { lower, upper };
        r.validate()?;
        Ok(r)
    }

    /// The whole space in dimension `n`.
    pub fn everything(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::invalid("rectangle bound lengths differ"));
        }
        for (l, u) in self.lower.iter().zip(&self.upper) {
            if l.is_nan() || u.is_nan() || !(l < u) {
                return Err(Error::invalid(
                    "rectangle needs lower < upper in every coordinate",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MvnProbResult {
    pub value: f64,
    /// Three standard errors across the random shifts.
    pub est_error: f64,
    pub samples_used: usize,
    /// False when the budget ran out before `est_error <= accuracy`.
    pub converged: bool,
}

/// Sampling knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MvnOptions {
    pub accuracy: f64,
    pub seed: u64,
    pub randomizations: usize,
    pub min_points: usize,
    /// Cap on total integrand evaluations.
    pub budget: usize,
    /// Genz–Bretz variable prioritisation.
    pub reorder: bool,
    /// Two-dimensional problems use the bivariate CDF instead of sampling.
    pub bivariate_exact: bool,
}

impl Default for MvnOptions {
    fn default() -> Self {
        Self {
            accuracy: 1e-5,
            seed: 0,
            randomizations: 12,
            min_points: 1 << 10,
            budget: 1 << 18,
            reorder: true,
            bivariate_exact: true,
        }
    }
}

impl MvnOptions {
    pub fn with_accuracy(accuracy: f64, seed: u64) -> Self {
        Self {
            accuracy,
            seed,
            ..Self::default()
        }
    }
}

/// `P(lower <= X <= upper)` for `X ~ N(mu, sigma)`.
pub fn rect_prob(
    rect: &Rectangle,
    mu: &[f64],
    sigma: &Matrix,
    accuracy: f64,
    seed: u64,
) -> Result<MvnProbResult> {
    rect_prob_with(rect, mu, sigma, &MvnOptions::with_accuracy(accuracy, seed))
}

pub fn rect_prob_with(
    rect: &Rectangle,
    mu: &[f64],
    sigma: &Matrix,
    opts: &MvnOptions,
) -> Result<MvnProbResult> {
    check_inputs(rect, mu, sigma)?;
    let n = rect.dim();
    if n == 0 {
        return Ok(exact(1.0));
    }
    let a: Vec<f64> = rect.lower.iter().zip(mu).map(|(l, m)| l - m).collect();
    let b: Vec<f64> = rect.upper.iter().zip(mu).map(|(u, m)| u - m).collect();
    let trace = sigma.trace();
    if trace == 0.0 {
        let inside = a.iter().zip(&b).all(|(&l, &u)| l <= 0.0 && 0.0 <= u);
        return Ok(exact(if inside { 1.0 } else { 0.0 }));
    }
    // coordinates with two infinite bounds integrate to one and are dropped
    let keep: Vec<usize> = (0..n)
        .filter(|&i| a[i] > f64::NEG_INFINITY || b[i] < f64::INFINITY)
        .collect();
    if keep.is_empty() {
        return Ok(exact(1.0));
    }
    let jitter = 1e-10 * trace / n as f64;
    let mut s = sigma.select(&keep);
    for i in 0..keep.len() {
        s[(i, i)] += jitter;
    }
    let a: Vec<f64> = keep.iter().map(|&i| a[i]).collect();
    let b: Vec<f64> = keep.iter().map(|&i| b[i]).collect();
    if keep.len() == 1 {
        let sd = libm::sqrt(s[(0, 0)]);
        return Ok(exact(interval_prob(a[0] / sd, b[0] / sd)));
    }
    if keep.len() == 2 && opts.bivariate_exact {
        let (s0, s1) = (libm::sqrt(s[(0, 0)]), libm::sqrt(s[(1, 1)]));
        if !(s0 > 0.0 && s1 > 0.0 && s[(0, 1)].abs() <= s0 * s1) {
            return Err(Error::NotPositiveDefinite);
        }
        let r = s[(0, 1)] / (s0 * s1);
        let (a0, b0, a1, b1) = (a[0] / s0, b[0] / s0, a[1] / s1, b[1] / s1);
        let p = bvn_cdf(b0, b1, r) - bvn_cdf(a0, b1, r) - bvn_cdf(b0, a1, r) + bvn_cdf(a0, a1, r);
        return Ok(exact(p.clamp(0.0, 1.0)));
    }
    let (l, a, b) = factor(&s, a, b, opts.reorder)?;
    Ok(integrate(&l, &a, &b, opts))
}

fn exact(value: f64) -> MvnProbResult {
    MvnProbResult {
        value,
        est_error: 0.0,
        samples_used: 0,
        converged: true,
    }
}

fn check_inputs(rect: &Rectangle, mu: &[f64], sigma: &Matrix) -> Result<()> {
    rect.validate()?;
    let n = rect.dim();
    if n > MAX_DIM {
        return Err(Error::invalid("dimension above 50 is not supported"));
    }
    if mu.len() != n || sigma.rows() != n || sigma.cols() != n {
        return Err(Error::invalid(
            "mean, covariance and rectangle dimensions differ",
        ));
    }
    if mu.iter().chain(sigma.as_slice()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("mean and covariance must be finite"));
    }
    if !sigma.is_symmetric(1e-9 * (1.0 + sigma.trace().abs())) {
        return Err(Error::invalid("covariance must be symmetric"));
    }
    if sigma.diag().iter().any(|&d| d < 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(())
}

#[inline]
fn interval_prob(a: f64, b: f64) -> f64 {
    // use the upper tail when both bounds are positive to keep precision
    if a > 0.0 {
        (norm_cdf(-a) - norm_cdf(-b)).max(0.0)
    } else {
        (norm_cdf(b) - norm_cdf(a)).max(0.0)
    }
}

/// Cholesky factor with Genz–Bretz prioritisation: at each stage pick the
/// remaining variable with the smallest expected conditional interval
/// probability. Bounds are permuted and scaled by the pivots.
fn factor(
    s: &Matrix,
    mut a: Vec<f64>,
    mut b: Vec<f64>,
    reorder: bool,
) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    let n = s.rows();
    let mut c = s.clone();
    let mut l = Matrix::zeros(n, n);
    let mut y = vec![0.0; n];
    let tiny = 1e-300;
    for k in 0..n {
        if reorder {
            let mut best = k;
            let mut best_p = f64::INFINITY;
            for i in k..n {
                let rem = c[(i, i)] - (0..k).map(|j| l[(i, j)] * l[(i, j)]).sum::<f64>();
                let sd = libm::sqrt(rem.max(tiny));
                let m: f64 = (0..k).map(|j| l[(i, j)] * y[j]).sum();
                let p = interval_prob((a[i] - m) / sd, (b[i] - m) / sd);
                if p < best_p {
                    best_p = p;
                    best = i;
                }
            }
            if best != k {
                swap_sym(&mut c, k, best);
                a.swap(k, best);
                b.swap(k, best);
                for j in 0..k {
                    let t = l[(k, j)];
                    l[(k, j)] = l[(best, j)];
                    l[(best, j)] = t;
                }
            }
        }
        let rem = c[(k, k)] - (0..k).map(|j| l[(k, j)] * l[(k, j)]).sum::<f64>();
        if !(rem > 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        let d = libm::sqrt(rem);
        l[(k, k)] = d;
        for i in k + 1..n {
            let v = c[(i, k)] - (0..k).map(|j| l[(i, j)] * l[(k, j)]).sum::<f64>();
            l[(i, k)] = v / d;
        }
        // expected value of the truncated standard normal drives later picks
        let m: f64 = (0..k).map(|j| l[(k, j)] * y[j]).sum();
        let (ak, bk) = ((a[k] - m) / d, (b[k] - m) / d);
        let p = interval_prob(ak, bk);
        y[k] = if p > 1e-300 {
            (norm_pdf(ak) - norm_pdf(bk)) / p
        } else if ak > 0.0 {
            ak
        } else {
            bk
        };
    }
    Ok((l, a, b))
}

fn swap_sym(c: &mut Matrix, i: usize, j: usize) {
    let n = c.rows();
    for k in 0..n {
        let t = c[(i, k)];
        c[(i, k)] = c[(j, k)];
        c[(j, k)] = t;
    }
    for k in 0..n {
        let t = c[(k, i)];
        c[(k, i)] = c[(k, j)];
        c[(k, j)] = t;
    }
}

// Korobov multipliers for lattices of 2^m points, m = 4..=20, picked by
// minimising the worst relative P2 figure of merit over dimensions 2..=6.
const KOROBOV: [(u32, u64); 17] = [
    (4, 3),
    (5, 7),
    (6, 11),
    (7, 29),
    (8, 39),
    (9, 115),
    (10, 325),
    (11, 349),
    (12, 1083),
    (13, 1545),
    (14, 5667),
    (15, 7333),
    (16, 12261),
    (17, 33635),
    (18, 41685),
    (19, 201925),
    (20, 400867),
];

fn generator(points: usize, dims: usize) -> Vec<u64> {
    let m = points.trailing_zeros();
    let a = KOROBOV.iter().find(|(k, _)| *k == m).map_or(1, |(_, a)| *a);
    let n = points as u64;
    let mut z = Vec::with_capacity(dims);
    let mut c = 1u64;
    for _ in 0..dims {
        z.push(c);
        c = (c * a) % n;
    }
    z
}

fn integrate(l: &Matrix, a: &[f64], b: &[f64], opts: &MvnOptions) -> MvnProbResult {
    let n = l.rows();
    let dims = n - 1;
    let shifts_n = opts.randomizations.max(2);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let max_points = 1usize << KOROBOV[KOROBOV.len() - 1].0;
    let mut points = opts.min_points.clamp(16, max_points).next_power_of_two();
    let mut used = 0usize;
    let mut w = vec![0.0; dims];
    let mut y = vec![0.0; n];
    let mut shift = vec![0.0; dims];
    loop {
        let z = generator(points, dims);
        let inv = 1.0 / points as f64;
        let mask = points as u64 - 1;
        let mut means = Vec::with_capacity(shifts_n);
        for _ in 0..shifts_n {
            for s in shift.iter_mut() {
                *s = rng.random::<f64>();
            }
            let mut acc = 0.0;
            for k in 0..points as u64 {
                for d in 0..dims {
                    let x = ((k * z[d]) & mask) as f64 * inv + shift[d];
                    let x = x - libm::floor(x);
                    // baker's transform
                    w[d] = 1.0 - libm::fabs(2.0 * x - 1.0);
                }
                acc += integrand(l, a, b, &w, &mut y);
            }
            means.push(acc * inv);
        }
        used += points * shifts_n;
        let k = shifts_n as f64;
        let mean = means.iter().sum::<f64>() / k;
        let var = means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (k - 1.0);
        let est_error = 3.0 * libm::sqrt(var / k);
        let converged = est_error <= opts.accuracy;
        if converged || points >= max_points || used + 2 * points * shifts_n > opts.budget {
            return MvnProbResult {
                value: mean.clamp(0.0, 1.0),
                est_error,
                samples_used: used,
                converged,
            };
        }
        points *= 2;
    }
}

// Standard normal CDF with the saturated tails short-circuited; upper
// bounds in dispatch problems are usually far out.
#[inline]
fn cdf(z: f64) -> f64 {
    if z >= 8.3 {
        1.0
    } else if z <= -38.5 {
        0.0
    } else {
        norm_cdf(z)
    }
}

#[inline]
fn integrand(l: &Matrix, a: &[f64], b: &[f64], w: &[f64], y: &mut [f64]) -> f64 {
    let n = l.rows();
    let d0 = l[(0, 0)];
    let mut lo = cdf(a[0] / d0);
    let mut hi = cdf(b[0] / d0);
    let mut f = hi - lo;
    for i in 1..n {
        if f <= 0.0 {
            return 0.0;
        }
        let p = (lo + w[i - 1] * (hi - lo)).clamp(1e-17, 1.0 - 1e-17);
        y[i - 1] = norm_inv(p);
        let row = l.row(i);
        let m: f64 = (0..i).map(|j| row[j] * y[j]).sum();
        let d = row[i];
        lo = cdf((a[i] - m) / d);
        hi = cdf((b[i] - m) / d);
        f *= hi - lo;
    }
    f.max(0.0)
}

/// Bound derivatives of the rectangle probability.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MvnGradResult {
    /// The probability itself.
    pub value: MvnProbResult,
    pub d_lower: Vec<f64>,
    pub d_upper: Vec<f64>,
    /// Largest error estimate over the conditional probabilities, scaled by
    /// the density factor.
    pub est_error: f64,
}

impl MvnGradResult {
    /// Derivative with respect to a shift applied to both bounds of
    /// coordinate `i`.
    pub fn d_shift(&self, i: usize) -> f64 {
        self.d_lower[i] + self.d_upper[i]
    }
}

/// Probability and bound gradient. The probability uses `accuracy`; each
/// conditional probability uses `grad_accuracy`.
pub fn rect_prob_grad(
    rect: &Rectangle,
    mu: &[f64],
    sigma: &Matrix,
    accuracy: f64,
    seed: u64,
) -> Result<MvnGradResult> {
    let opts = MvnOptions::with_accuracy(accuracy, seed);
    rect_prob_grad_with(rect, mu, sigma, &opts, &opts)
}

pub fn rect_prob_grad_with(
    rect: &Rectangle,
    mu: &[f64],
    sigma: &Matrix,
    prob_opts: &MvnOptions,
    grad_opts: &MvnOptions,
) -> Result<MvnGradResult> {
    let value = rect_prob_with(rect, mu, sigma, prob_opts)?;
    let n = rect.dim();
    let mut d_lower = vec![0.0; n];
    let mut d_upper = vec![0.0; n];
    let mut est_error: f64 = 0.0;
    let jitter = 1e-10 * sigma.trace() / n.max(1) as f64;
    for i in 0..n {
        let var = sigma[(i, i)] + jitter;
        if !(var > 0.0) {
            continue;
        }
        let sd = libm::sqrt(var);
        for (bound, out, sign) in [
            (rect.upper[i], &mut d_upper, 1.0),
            (rect.lower[i], &mut d_lower, -1.0),
        ] {
            if !bound.is_finite() {
                continue;
            }
            let dens = norm_pdf((bound - mu[i]) / sd) / sd;
            if dens == 0.0 {
                continue;
            }
            let cond = conditional_prob(rect, mu, sigma, i, bound, var, grad_opts)?;
            out[i] = sign * dens * cond.value;
            est_error = est_error.max(dens * cond.est_error);
        }
    }
    Ok(MvnGradResult {
        value,
        d_lower,
        d_upper,
        est_error,
    })
}

// P(rect without coordinate i | X_i = x) via the Schur complement.
fn conditional_prob(
    rect: &Rectangle,
    mu: &[f64],
    sigma: &Matrix,
    i: usize,
    x: f64,
    var: f64,
    opts: &MvnOptions,
) -> Result<MvnProbResult> {
    let n = rect.dim();
    if n == 1 {
        return Ok(exact(1.0));
    }
    let rest: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    let m = rest.len();
    let mut cmu = Vec::with_capacity(m);
    let mut cov = Matrix::zeros(m, m);
    for (r, &j) in rest.iter().enumerate() {
        cmu.push(mu[j] + sigma[(j, i)] / var * (x - mu[i]));
        for (c, &k) in rest.iter().enumerate() {
            cov[(r, c)] = sigma[(j, k)] - sigma[(j, i)] * sigma[(i, k)] / var;
        }
    }
    for r in 0..m {
        for c in 0..r {
            let v = 0.5 * (cov[(r, c)] + cov[(c, r)]);
            cov[(r, c)] = v;
            cov[(c, r)] = v;
        }
        cov[(r, r)] = cov[(r, r)].max(0.0);
    }
    let sub = Rectangle {
        lower: rest.iter().map(|&j| rect.lower[j]).collect(),
        upper: rest.iter().map(|&j| rect.upper[j]).collect(),
    };
    rect_prob_with(&sub, &cmu, &cov, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corr3(r: f64) -> Matrix {
        Matrix::from_rows(&[[1.0, r, r], [r, 1.0, r], [r, r, 1.0]])
    }

    #[test]
    fn univariate_interval() {
        let r = Rectangle::new(vec![-1.959964], vec![1.959964]).unwrap();
        let p = rect_prob(&r, &[0.0], &Matrix::identity(1), 1e-5, 1).unwrap();
        assert!((p.value - 0.95).abs() < 1e-4);
        assert_eq!(p.est_error, 0.0);
    }

    #[test]
    fn whole_space_is_one() {
        for n in 1..5 {
            let r = Rectangle::everything(n);
            let p = rect_prob(&r, &vec![0.3; n], &corr_n(n, 0.4), 1e-5, 3).unwrap();
            assert_eq!(p.value, 1.0);
        }
    }

    fn corr_n(n: usize, r: f64) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = if i == j { 1.0 } else { r };
            }
        }
        m
    }

    #[test]
    fn independent_orthant() {
        let r = Rectangle::new(vec![0.0, 0.0], vec![f64::INFINITY; 2]).unwrap();
        let p = rect_prob(&r, &[0.0, 0.0], &Matrix::identity(2), 1e-6, 2).unwrap();
        assert!((p.value - 0.25).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn bivariate_inclusion_exclusion() {
        let (l1, u1, l2, u2, rho) = (-0.7, 1.3, -1.5, 0.4, 0.6);
        let exact = bvn_cdf(u1, u2, rho) - bvn_cdf(l1, u2, rho) - bvn_cdf(u1, l2, rho)
            + bvn_cdf(l1, l2, rho);
        let r = Rectangle::new(vec![l1, l2], vec![u1, u2]).unwrap();
        let s = Matrix::from_rows(&[[1.0, rho], [rho, 1.0]]);
        // sampled path against the orthant formula
        let opts = MvnOptions {
            budget: 1 << 23,
            bivariate_exact: false,
            ..MvnOptions::with_accuracy(2e-7, 8)
        };
        let p = rect_prob_with(&r, &[0.0, 0.0], &s, &opts).unwrap();
        assert!(p.converged && p.samples_used > 0);
        assert!((p.value - exact).abs() < 1e-6, "{p:?} vs {exact}");
        let q = rect_prob(&r, &[0.0, 0.0], &s, 1e-5, 8).unwrap();
        assert!((q.value - exact).abs() < 1e-9);
    }

    #[test]
    fn seed_determinism() {
        let r = Rectangle::new(vec![-1.0; 3], vec![1.0; 3]).unwrap();
        let a = rect_prob(&r, &[0.0; 3], &corr3(0.5), 1e-5, 42).unwrap();
        let b = rect_prob(&r, &[0.0; 3], &corr3(0.5), 1e-5, 42).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    #[test]
    fn zero_covariance_is_indicator() {
        let r = Rectangle::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let z = Matrix::zeros(2, 2);
        assert_eq!(rect_prob(&r, &[0.0, 0.5], &z, 1e-5, 0).unwrap().value, 1.0);
        assert_eq!(rect_prob(&r, &[0.0, 1.5], &z, 1e-5, 0).unwrap().value, 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let r = Rectangle::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let bad = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(rect_prob(&r, &[0.0, 0.0], &bad, 1e-5, 0).is_err());
        assert!(Rectangle::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn univariate_gradient_is_density() {
        let r = Rectangle::new(vec![-0.5], vec![1.2]).unwrap();
        let g = rect_prob_grad(&r, &[0.0], &Matrix::identity(1), 1e-5, 0).unwrap();
        assert!((g.d_upper[0] - norm_pdf(1.2)).abs() < 1e-9);
        assert!((g.d_lower[0] + norm_pdf(-0.5)).abs() < 1e-9);
    }

    #[test]
    fn symmetric_gradient() {
        let r = Rectangle::new(vec![-1.0, -2.0], vec![1.0, 2.0]).unwrap();
        let s = Matrix::from_diag(&[1.0, 4.0]);
        let g = rect_prob_grad(&r, &[0.0, 0.0], &s, 1e-6, 0).unwrap();
        for i in 0..2 {
            assert!((g.d_upper[i] + g.d_lower[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = Matrix::from_rows(&[[1.0, 0.3, -0.2], [0.3, 2.0, 0.5], [-0.2, 0.5, 1.5]]);
        let mu = [0.1, -0.3, 0.2];
        let r = Rectangle::new(vec![-1.2, -2.0, -0.8], vec![0.9, 1.5, 2.1]).unwrap();
        let g = rect_prob_grad(&r, &mu, &s, 1e-8, 5).unwrap();
        let h = 1e-4;
        for i in 0..3 {
            let mut up = r.clone();
            let mut dn = r.clone();
            up.upper[i] += h;
            dn.upper[i] -= h;
            let fd = (rect_prob(&up, &mu, &s, 1e-9, 5).unwrap().value
                - rect_prob(&dn, &mu, &s, 1e-9, 5).unwrap().value)
                / (2.0 * h);
            assert!(
                (fd - g.d_upper[i]).abs() <= 1e-3 * g.d_upper[i].abs(),
                "{i}: {fd} vs {}",
                g.d_upper[i]
            );
        }
    }
}
