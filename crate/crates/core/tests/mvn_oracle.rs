//! Rectangle probabilities against independent quadrature.

use cascade_core::linalg::Matrix;
use cascade_core::mvn::{rect_prob, rect_prob_grad, Rectangle};
use cascade_core::special::norm_cdf;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod quadrature;

use quadrature::quadrature;

struct Instance {
    lower: Vec<f64>,
    upper: Vec<f64>,
    mu: Vec<f64>,
    sigma: Matrix,
}

impl Instance {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let n = rng.random_range(1..=3);
        let sd: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..3.0)).collect();
        // random correlation from normalized random vectors
        let vecs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
                v.iter().map(|x| x / norm).collect()
            })
            .collect();
        let mut sigma = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let c = if i == j {
                    1.0
                } else {
                    0.9 * vecs[i]
                        .iter()
                        .zip(&vecs[j])
                        .map(|(x, y)| x * y)
                        .sum::<f64>()
                };
                sigma[(i, j)] = c * sd[i] * sd[j];
            }
        }
        let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for i in 0..n {
            let lo = mu[i] + sd[i] * rng.random_range(-2.5..0.5);
            let hi = lo + sd[i] * rng.random_range(0.2..3.0);
            let open = rng.random_range(0..6);
            lower.push(if open == 0 { f64::NEG_INFINITY } else { lo });
            upper.push(if open == 1 { f64::INFINITY } else { hi });
        }
        Self {
            lower,
            upper,
            mu,
            sigma,
        }
    }

    fn oracle(&self) -> f64 {
        let n = self.mu.len();
        let sd: Vec<f64> = (0..n).map(|i| self.sigma[(i, i)].sqrt()).collect();
        let mut r = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                r[(i, j)] = self.sigma[(i, j)] / (sd[i] * sd[j]);
            }
        }
        let a: Vec<f64> = (0..n)
            .map(|i| (self.lower[i] - self.mu[i]) / sd[i])
            .collect();
        let b: Vec<f64> = (0..n)
            .map(|i| (self.upper[i] - self.mu[i]) / sd[i])
            .collect();
        quadrature(&a, &b, &r)
    }

    fn rect(&self) -> Rectangle {
        Rectangle::new(self.lower.clone(), self.upper.clone()).unwrap()
    }
}

#[test]
fn quadrature_oracle_is_sane() {
    // independent coordinates factor
    let mut r = Matrix::identity(3);
    let p = quadrature(&[-1.0, -0.5, 0.0], &[1.0, 2.0, 1.5], &r);
    let want =
        (norm_cdf(1.0) - norm_cdf(-1.0)) * (norm_cdf(2.0) - norm_cdf(-0.5)) * (norm_cdf(1.5) - 0.5);
    assert!((p - want).abs() < 1e-8, "{p} vs {want}");
    // orthant with equal correlation 1/2: 1/4 for n = 3
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                r[(i, j)] = 0.5;
            }
        }
    }
    let inf = f64::INFINITY;
    let p = quadrature(&[0.0; 3], &[inf; 3], &r);
    assert!((p - 0.25).abs() < 1e-6, "{p}");
}

#[test]
fn matches_quadrature_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for k in 0..50 {
        let inst = Instance::random(&mut rng);
        let got = rect_prob(&inst.rect(), &inst.mu, &inst.sigma, 1e-5, k).unwrap();
        let want = inst.oracle();
        worst = worst.max((got.value - want).abs());
        assert!(
            (got.value - want).abs() < 5e-4,
            "instance {k} (n = {}): {} vs {want}",
            inst.mu.len(),
            got.value
        );
    }
    println!("largest deviation {worst:.2e}");
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked = 0;
    while checked < 20 {
        let inst = Instance::random(&mut rng);
        let n = inst.mu.len();
        let g = rect_prob_grad(&inst.rect(), &inst.mu, &inst.sigma, 1e-7, 5).unwrap();
        for i in 0..n {
            let h = 1e-3 * inst.sigma[(i, i)].sqrt();
            for upper in [false, true] {
                let bound = if upper { inst.upper[i] } else { inst.lower[i] };
                if !bound.is_finite() {
                    continue;
                }
                let shifted = |d: f64| {
                    let mut s = Instance {
                        lower: inst.lower.clone(),
                        upper: inst.upper.clone(),
                        mu: inst.mu.clone(),
                        sigma: inst.sigma.clone(),
                    };
                    if upper {
                        s.upper[i] += d;
                    } else {
                        s.lower[i] += d;
                    }
                    s.oracle()
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                let an = if upper { g.d_upper[i] } else { g.d_lower[i] };
                let scale = fd.abs().max(1e-2 / inst.sigma[(i, i)].sqrt());
                assert!(
                    (an - fd).abs() / scale < 1e-3,
                    "n = {n}, coord {i}, upper {upper}: analytic {an} vs fd {fd}"
                );
            }
        }
        checked += 1;
    }
}

#[test]
fn degenerate_rectangles() {
    let sigma = Matrix::identity(2);
    let inf = f64::INFINITY;
    let all = rect_prob(&Rectangle::everything(2), &[0.0, 0.0], &sigma, 1e-6, 0).unwrap();
    assert!((all.value - 1.0).abs() < 1e-12);
    let far = Rectangle::new(vec![40.0, -inf], vec![41.0, inf]).unwrap();
    assert!(rect_prob(&far, &[0.0, 0.0], &sigma, 1e-6, 0).unwrap().value < 1e-300);
    assert!(Rectangle::new(vec![1.0], vec![0.0]).is_err());
    assert!(Rectangle::new(vec![1.0], vec![1.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn widening_never_lowers_probability(
        lo in -2.0f64..-0.01, hi in 0.01f64..2.0, widen in 0.0f64..1.5, rho in -0.6f64..0.6
    ) {
        let mut sigma = Matrix::identity(3);
        for (i, j) in [(0, 1), (1, 0), (1, 2), (2, 1)] {
            sigma[(i, j)] = rho;
        }
        let narrow = Rectangle::new(vec![lo; 3], vec![hi; 3]).unwrap();
        let wide = Rectangle::new(vec![lo - widen; 3], vec![hi + widen; 3]).unwrap();
        let p0 = rect_prob(&narrow, &[0.0; 3], &sigma, 1e-6, 3).unwrap();
        let p1 = rect_prob(&wide, &[0.0; 3], &sigma, 1e-6, 3).unwrap();
        prop_assert!(p1.value >= p0.value - p0.est_error - p1.est_error);
        prop_assert!((0.0..=1.0).contains(&p0.value));
    }

    #[test]
    fn log_probability_is_concave_along_a_shift(c in -1.5f64..1.5, d in 0.05f64..0.5) {
        // log P(X <= c·1) is concave in c for Gaussian X
        let mut sigma = Matrix::identity(2);
        sigma[(0, 1)] = 0.4;
        sigma[(1, 0)] = 0.4;
        let lp = |t: f64| {
            let r = Rectangle::new(vec![f64::NEG_INFINITY; 2], vec![t; 2]).unwrap();
            rect_prob(&r, &[0.0; 2], &sigma, 1e-9, 0).unwrap().value.ln()
        };
        prop_assert!(lp(c) >= 0.5 * (lp(c - d) + lp(c + d)) - 1e-9);
    }
}
