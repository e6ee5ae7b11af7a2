//! Independent quadrature for standardized Gaussian rectangle probabilities
//! in up to three dimensions.

use cascade_core::linalg::Matrix;
use cascade_core::special::{norm_cdf, norm_pdf};

const CUT: f64 = 8.5;

/// Composite Simpson on `[a, b]` with `n` (even) panels.
fn simpson(a: f64, b: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + k as f64 * h);
    }
    s * h / 3.0
}

fn clip(x: f64) -> f64 {
    x.clamp(-CUT, CUT)
}

fn interval(lo: f64, hi: f64, m: f64, s: f64) -> f64 {
    (norm_cdf((hi - m) / s) - norm_cdf((lo - m) / s)).max(0.0)
}

/// Standardized rectangle probability by nested Simpson over the leading
/// coordinates and the exact conditional CDF for the last one.
pub fn quadrature(a: &[f64], b: &[f64], r: &Matrix) -> f64 {
    match a.len() {
        1 => norm_cdf(b[0]) - norm_cdf(a[0]),
        2 => {
            let rho = r[(0, 1)];
            let s = (1.0 - rho * rho).sqrt();
            simpson(clip(a[0]), clip(b[0]), 4000, |x| {
                norm_pdf(x) * interval(a[1], b[1], rho * x, s)
            })
        }
        3 => {
            let (r01, r02, r12) = (r[(0, 1)], r[(0, 2)], r[(1, 2)]);
            let s1 = (1.0 - r01 * r01).sqrt();
            // x2 | x0, x1 by regression on (x0, x1)
            let det = 1.0 - r01 * r01;
            let w0 = (r02 - r01 * r12) / det;
            let w1 = (r12 - r01 * r02) / det;
            let s2 = (1.0 - (w0 * r02 + w1 * r12)).max(1e-300).sqrt();
            simpson(clip(a[0]), clip(b[0]), 600, |x0| {
                let m1 = r01 * x0;
                let lo = clip(a[1]).max(m1 - CUT * s1);
                let hi = clip(b[1]).min(m1 + CUT * s1);
                norm_pdf(x0)
                    * simpson(lo, hi, 600, |x1| {
                        norm_pdf((x1 - m1) / s1) / s1 * interval(a[2], b[2], w0 * x0 + w1 * x1, s2)
                    })
            })
        }
        _ => unreachable!(),
    }
}
