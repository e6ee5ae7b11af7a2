use cascade_core::dispatch::{
    dispatch_bon, dispatch_det, dispatch_ssh, risk_allocation, satisfies_lp, DispatchProblem,
    DispatchStatus, LineSearchMethod, SolverConfig,
};
use cascade_core::hydro::{CascadeConfig, PlantSpec};
use cascade_core::linalg::Matrix;
use cascade_core::mvn::{rect_prob, MvnOptions};
use cascade_core::special::norm_inv;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DT: f64 = 3600.0;

fn cascade(n: usize, capacity_steps: f64) -> CascadeConfig {
    let spec = PlantSpec {
        capacity_steps,
        ..PlantSpec::default()
    };
    spec.cascade(n, DT).unwrap()
}

fn exchangeable(n: usize, sd: f64, rho: f64) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = sd * sd * if i == j { 1.0 } else { rho };
        }
    }
    m
}

/// Three units sitting low in storage so the lower volume bound matters.
fn benchmark(sd_flow: f64, eps: f64) -> DispatchProblem {
    let cfg = cascade(3, 4.0);
    let v_prev: Vec<f64> = cfg
        .units
        .iter()
        .map(|r| r.v_min + 0.15 * r.storage_span())
        .collect();
    DispatchProblem::one_step(
        cfg,
        v_prev,
        vec![3000.0 * DT; 3],
        vec![3000.0 * DT; 3],
        exchangeable(3, sd_flow * DT, 0.4),
        vec![8.0, 8.0, 8.0],
        eps,
    )
}

fn random_problem(rng: &mut ChaCha8Rng) -> DispatchProblem {
    let n = rng.random_range(1..=3);
    let cfg = cascade(n, rng.random_range(2.0..8.0));
    let v_prev: Vec<f64> = cfg
        .units
        .iter()
        .map(|r| r.v_min + rng.random_range(0.05..0.9) * r.storage_span())
        .collect();
    let u_prev: Vec<f64> = (0..n)
        .map(|_| rng.random_range(2000.0..6000.0) * DT)
        .collect();
    let mu: Vec<f64> = (0..n)
        .map(|_| rng.random_range(2000.0..4000.0) * DT)
        .collect();
    // random correlation from a random factor loading
    let sd: Vec<f64> = (0..n).map(|_| rng.random_range(50.0..600.0) * DT).collect();
    let load: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
    let mut sigma = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let c = if i == j { 1.0 } else { load[i] * load[j] };
            sigma[(i, j)] = c * sd[i] * sd[j];
        }
    }
    let heads: Vec<f64> = (0..n).map(|_| rng.random_range(5.0..15.0)).collect();
    let eps = [0.01, 0.05, 0.1, 0.2][rng.random_range(0..4)];
    DispatchProblem::one_step(cfg, v_prev, u_prev, mu, sigma, heads, eps)
}

#[test]
fn ssh_cuts_separate_and_objective_never_rises() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = SolverConfig::default();
    let mut solved = 0;
    while solved < 15 {
        let p = random_problem(&mut rng);
        let Ok(sol) = dispatch_ssh(&p, &cfg) else {
            continue;
        };
        solved += 1;
        assert_eq!(sol.status, DispatchStatus::Optimal);
        assert!(sol.cut_log.is_nonincreasing(1e-9), "{:?}", sol.cut_log);
        assert!(sol.probability.unwrap() >= 1.0 - p.epsilon - 2e-5);
        assert!(satisfies_lp(&p, &sol));
        // every cut cuts off the candidate that generated it
        for (k, cut) in sol.cuts.iter().enumerate() {
            let log = &sol.cut_log.entries[k];
            assert!(log.probability < 1.0 - p.epsilon);
            assert!(cut.lambda_star > 0.0 && cut.lambda_star <= 1.0);
        }
    }
}

#[test]
fn ssh_matches_univariate_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    while checked < 10 {
        let cfg = cascade(1, 24.0);
        let r = cfg.units[0];
        let sd = rng.random_range(100.0..800.0) * DT;
        let mu = rng.random_range(2500.0..3500.0) * DT;
        let eps = rng.random_range(0.01..0.2);
        let v_prev = r.v_min + rng.random_range(0.0..0.05) * r.storage_span();
        let exact = v_prev + mu - r.v_min - norm_inv(1.0 - eps) * sd;
        let u_prev = exact + rng.random_range(-0.5..0.5) * r.r_up;
        // interior: release and ramp limits inactive at the optimum
        let lo = r.u_min.max(u_prev - r.r_down);
        let hi = r
            .u_max
            .min(u_prev + r.r_up)
            .min(r.p_max / (cfg.energy_per_m3_m(0) * 10.0));
        if !(exact > lo + 0.01 * r.u_max && exact < hi - 0.01 * r.u_max) {
            continue;
        }
        let p = DispatchProblem::one_step(
            cfg,
            vec![v_prev],
            vec![u_prev],
            vec![mu],
            Matrix::from_diag(&[sd * sd]),
            vec![10.0],
            eps,
        );
        let Ok(sol) = dispatch_ssh(&p, &SolverConfig::default()) else {
            continue;
        };
        assert!((sol.u_star[0][0] - exact).abs() / r.u_max < 1e-4);
        checked += 1;
    }
}

#[test]
fn bon_is_inner_approximation() {
    let p = benchmark(300.0, 0.05);
    let cfg = SolverConfig::default();
    let ssh = dispatch_ssh(&p, &cfg).unwrap();
    let bon = dispatch_bon(&p).unwrap();
    let det = dispatch_det(&p).unwrap();
    assert_eq!(bon.status, DispatchStatus::Optimal);
    assert!(bon.objective <= ssh.objective + 1e-6);
    assert!(ssh.objective <= det.objective + 1e-6);
    // BON solution satisfies the joint constraint
    let u: Vec<f64> = bon.u_star.concat();
    let f = rect_prob(
        &p.rectangle(&u),
        &p.cumulative_mean(),
        &p.cumulative_covariance(),
        1e-6,
        1,
    )
    .unwrap();
    assert!(f.value >= 0.95 - 1e-5);
}

#[test]
fn illinois_agrees_with_bisection() {
    let p = benchmark(300.0, 0.05);
    let a = dispatch_ssh(&p, &SolverConfig::default()).unwrap();
    let cfg = SolverConfig {
        line_search: LineSearchMethod::Bisection,
        ..SolverConfig::default()
    };
    let b = dispatch_ssh(&p, &cfg).unwrap();
    assert!((a.objective - b.objective).abs() / a.objective < 1e-3);
}

#[test]
fn symmetric_units_share_risk_equally() {
    let p = benchmark(300.0, 0.05);
    let cfg = SolverConfig::default();
    // symmetric releases at the chance boundary
    let mut lo = 0.0;
    let mut hi = p.v_prev[0] + p.mu[0][0] - p.cascade.units[0].v_min;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let f = rect_prob(
            &p.rectangle(&[mid; 3]),
            &p.cumulative_mean(),
            &p.cumulative_covariance(),
            1e-6,
            2,
        )
        .unwrap()
        .value;
        if f >= 0.95 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let a = risk_allocation(&p, &[lo; 3], &cfg).unwrap();
    for s in &a.shares {
        assert!((s - 1.0 / 3.0).abs() < 0.01, "{:?}", a.shares);
    }
}

#[test]
fn unit_at_lower_bound_takes_the_risk() {
    let mut p = benchmark(300.0, 0.05);
    // unit 1 ends the step right at its minimum storage; the others stay high
    let r = p.cascade.units[0];
    p.v_prev = vec![
        r.v_min + 0.9 * r.storage_span(),
        r.v_min + 0.05 * r.storage_span(),
        r.v_min + 0.9 * r.storage_span(),
    ];
    let u = vec![3000.0 * DT, p.v_prev[1] + p.mu[0][1] - r.v_min, 3000.0 * DT];
    let a = risk_allocation(&p, &u, &SolverConfig::default()).unwrap();
    assert!(a.shares[1] > 0.99, "{:?}", a.shares);
    let one = DispatchProblem::one_step(
        cascade(1, 4.0),
        vec![p.v_prev[1]],
        vec![u[1]],
        vec![p.mu[0][1]],
        Matrix::from_diag(&[(300.0 * DT) * (300.0 * DT)]),
        vec![8.0],
        0.05,
    );
    assert_eq!(
        risk_allocation(&one, &[u[1]], &SolverConfig::default())
            .unwrap()
            .shares,
        vec![1.0]
    );
}

#[test]
fn two_step_lookahead() {
    let mut p = benchmark(300.0, 0.05);
    p.horizon = 2;
    p.mu = vec![vec![3000.0 * DT; 3], vec![2800.0 * DT; 3]];
    let step = exchangeable(3, 300.0 * DT, 0.4);
    let mut sigma = Matrix::zeros(6, 6);
    for tau in 0..2 {
        for i in 0..3 {
            for j in 0..3 {
                sigma[(tau * 3 + i, tau * 3 + j)] = step[(i, j)];
            }
        }
    }
    p.sigma = sigma;
    let sol = dispatch_ssh(&p, &SolverConfig::default()).unwrap();
    assert_eq!(sol.status, DispatchStatus::Optimal);
    assert_eq!(sol.u_star.len(), 2);
    assert!(sol.probability.unwrap() >= 0.95 - 2e-5);
    let bon = dispatch_bon(&p).unwrap();
    assert!(bon.objective <= sol.objective + 1e-6);
    // cumulative covariance grows along the horizon
    let c = p.cumulative_covariance();
    assert!((c[(3, 3)] - 2.0 * step[(0, 0)]).abs() < 1e-6 * step[(0, 0)]);
    assert!((c[(0, 3)] - step[(0, 0)]).abs() < 1e-6 * step[(0, 0)]);
}

#[test]
fn det_lands_on_minimum_storage_when_inflow_is_tight() {
    let mut p = benchmark(300.0, 0.05);
    p.mu = vec![vec![1000.0 * DT; 3]];
    let s = dispatch_det(&p).unwrap();
    for i in 0..3 {
        let v = p.v_prev[i] + p.mu[0][i] - s.u_star[0][i];
        let r = p.cascade.units[i];
        let floor_binding = (v - r.v_min).abs() < 1e-6 * r.storage_span();
        let ramp_binding = (s.u_star[0][i] - r.u_min.max(p.u_prev[i] - r.r_down)).abs() < 1.0;
        assert!(floor_binding || ramp_binding);
    }
    let _ = MvnOptions::default();
}
