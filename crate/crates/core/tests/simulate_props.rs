use cascade_core::dispatch::{DispatchStatus, SolverConfig};
use cascade_core::forecast::{MeanModel, Normalization};
use cascade_core::hydro::{power, HeadTable, PlantSpec};
use cascade_core::linalg::Matrix;
use cascade_core::scenario::{
    build_trajectory, constant_trajectory, DisruptionEvent, ScenarioSpec,
};
use cascade_core::simulate::{
    rollout, run_closed_loop_testing, run_policy_testing, test_schedule, FittedModels, ModelKind,
    Policy, Routing, SimConfig, SolverKind,
};
use cascade_core::uncertainty::{DiuModel, GarchXParams};

const DT: f64 = 3600.0;
const N: usize = 3;

fn sim(v0_fraction: f64) -> SimConfig {
    let cascade = PlantSpec {
        capacity_steps: 1.0,
        ..PlantSpec::default()
    }
    .cascade(N, DT)
    .unwrap();
    let head_tables = cascade
        .units
        .iter()
        .map(|r| HeadTable::reference(r, 40).unwrap())
        .collect();
    let v0 = cascade
        .units
        .iter()
        .map(|r| r.v_min + v0_fraction * r.storage_span())
        .collect();
    SimConfig {
        cascade,
        head_tables,
        v0,
        u0: vec![3000.0 * DT; N],
        lookahead: 1,
        solver: SolverConfig::default(),
        routing: Routing::TotalInflow,
    }
}

fn corr(rho: f64) -> Matrix {
    let mut m = Matrix::identity(N);
    for i in 0..N {
        for j in 0..N {
            if i != j {
                m[(i, j)] = rho;
            }
        }
    }
    m
}

/// Persistence forecast with a 300 m³/s normalization scale.
fn models(garch: GarchXParams, diu_sigma: f64) -> FittedModels {
    let norm = Normalization {
        offset: 3000.0,
        scale: 300.0,
    };
    let mean = MeanModel::new(0.0, vec![1.0], vec![])
        .unwrap()
        .with_normalization(norm, norm);
    FittedModels {
        mean: vec![mean; N],
        diu: DiuModel::from_sigma_corr(&[diu_sigma; N], &corr(0.5)),
        garch,
        corr: corr(0.5),
    }
}

fn fitted() -> FittedModels {
    models(
        GarchXParams {
            omega: 0.01,
            alpha_e: 0.05,
            beta_v: 0.5,
            gamma: 0.15,
        },
        0.3,
    )
}

fn disrupted(q0: f64, amplitude: f64, duration: usize, steps: usize) -> Vec<Vec<f64>> {
    let ev = DisruptionEvent {
        start_step: 8,
        duration,
        amplitude,
    };
    build_trajectory(&ScenarioSpec::staggered(q0, &[ev], N, 1, steps, 0))
}

fn ddu_ssh(eps: f64) -> Policy {
    Policy {
        model: ModelKind::Ddu,
        solver: SolverKind::Ssh,
        epsilon: eps,
    }
}

#[test]
fn det_settles_at_the_inflow() {
    let cfg = sim(0.1);
    let traj = constant_trajectory(3000.0, N, 24);
    let r = rollout(&cfg, &fitted(), &Policy::det(), &traj).unwrap();
    assert_eq!(r.infeasible_steps(), 0);
    for i in 0..N {
        let u_last = r.u.last().unwrap()[i] / DT;
        assert!((u_last - 3000.0).abs() < 1e-6, "unit {i}: {u_last}");
        // greedy release parks storage on its lower bound
        let v_min = cfg.cascade.units[i].v_min;
        assert!((r.v.last().unwrap()[i] - v_min).abs() < 1e-3 * DT);
    }
    assert!(r.ivi < 1e-3 * DT);
}

#[test]
fn storage_telescopes_and_generation_matches_power() {
    let cfg = sim(0.1);
    let traj = disrupted(3000.0, 0.2, 12, 30);
    let r = rollout(&cfg, &fitted(), &ddu_ssh(0.05), &traj).unwrap();
    for i in 0..N {
        let inflow: f64 = r.q.iter().map(|q| q[i] * DT).sum();
        let release: f64 = r.u.iter().map(|u| u[i]).sum();
        let want = cfg.v0[i] + inflow - release;
        let got = r.v.last().unwrap()[i];
        assert!(
            (got - want).abs() <= 1e-9 * want.abs(),
            "unit {i}: {got} vs {want}"
        );
    }
    // generation is the linear power map at the previous storage's head
    let mut v = cfg.v0.clone();
    let mut total = 0.0;
    for t in 0..r.u.len() {
        for i in 0..N {
            let unit = &cfg.cascade.units[i];
            let head = cascade_core::hydro::lookup_head(&cfg.head_tables[i], v[i]);
            let p = power(r.u[t][i], head, unit, &cfg.cascade.constants).min(unit.p_max);
            assert!((p - r.p[t][i]).abs() < 1e-9 * p.max(1.0));
            total += p;
        }
        v = r.v[t].clone();
    }
    assert!((total - r.total_generation).abs() < 1e-9 * total);
}

#[test]
fn replaying_a_rollout_reproduces_it() {
    let cfg = sim(0.1);
    let traj = disrupted(3000.0, 0.25, 10, 30);
    let r = rollout(&cfg, &fitted(), &ddu_ssh(0.1), &traj).unwrap();
    let replay = test_schedule(&cfg, &r.u, &traj).unwrap();
    assert!((replay.generation - r.total_generation).abs() < 1e-9 * r.total_generation);
    assert!((replay.ivi - r.ivi).abs() <= 1e-9 * r.ivi.max(1.0));
    assert_eq!(replay.violations, r.violations_count);
}

#[test]
fn closed_loop_testing_reruns_the_policy() {
    let cfg = sim(0.1);
    let mean = disrupted(3000.0, 0.1, 10, 30);
    let hard = disrupted(3000.0, 0.3, 10, 30);
    let policy = ddu_ssh(0.1);
    let learned = rollout(&cfg, &fitted(), &policy, &mean).unwrap();
    let on_hard = rollout(&cfg, &fitted(), &policy, &hard).unwrap();
    let closed = run_closed_loop_testing(&cfg, &fitted(), &policy, [&hard]).unwrap();
    assert_eq!(closed.avg_generation, on_hard.total_generation);
    assert_eq!(closed.ivi, on_hard.ivi);
    // re-solving against the deeper disruption beats replaying the schedule
    let open = run_policy_testing(&cfg, &learned.u, [&hard]).unwrap();
    assert!(closed.ivi <= open.ivi, "{} vs {}", closed.ivi, open.ivi);
}

#[test]
fn no_release_means_no_shortfall() {
    let cfg = sim(0.0);
    let traj = disrupted(2500.0, 0.4, 12, 40);
    let zero = vec![vec![0.0; N]; 40];
    let out = test_schedule(&cfg, &zero, &traj).unwrap();
    assert_eq!(out.generation, 0.0);
    assert_eq!(out.ivi, 0.0);
    assert_eq!(out.violations, 0);
}

#[test]
fn shortfall_is_counted_below_the_lower_bound() {
    let cfg = sim(0.0);
    let traj = constant_trajectory(2000.0, N, 3);
    // release 500 m³/s more than the inflow, starting at v_min
    let u = vec![vec![2500.0 * DT; N]; 3];
    let out = test_schedule(&cfg, &u, &traj).unwrap();
    let want = N as f64 * (500.0 + 1000.0 + 1500.0) * DT;
    assert!((out.ivi - want).abs() < 1e-6 * want);
    assert_eq!(out.violations, 3 * N);
}

#[test]
fn ddu_without_dynamics_equals_diu() {
    // ω = σ² with α = β = γ = 0 freezes the conditional covariance at the static one
    let s = 0.3;
    let m = models(
        GarchXParams {
            omega: s * s,
            alpha_e: 0.0,
            beta_v: 0.0,
            gamma: 0.0,
        },
        s,
    );
    let cfg = sim(0.1);
    let traj = disrupted(3000.0, 0.2, 8, 20);
    let ddu = rollout(&cfg, &m, &ddu_ssh(0.05), &traj).unwrap();
    let diu = rollout(
        &cfg,
        &m,
        &Policy {
            model: ModelKind::Diu,
            ..ddu_ssh(0.05)
        },
        &traj,
    )
    .unwrap();
    for (a, b) in ddu.u.iter().zip(&diu.u) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-9 * x.abs().max(1.0), "{x} vs {y}");
        }
    }
}

#[test]
fn tighter_risk_lowers_shortfall() {
    let cfg = sim(0.1);
    let learn = disrupted(3000.0, 0.15, 10, 36);
    let tests: Vec<Vec<Vec<f64>>> = [
        (2800.0, 0.15, 8),
        (3000.0, 0.25, 14),
        (3200.0, 0.3, 18),
        (2900.0, 0.2, 12),
    ]
    .iter()
    .map(|&(q, a, d)| disrupted(q, a, d, 36))
    .collect();
    let mut prev: Option<f64> = None;
    for eps in [0.2, 0.1, 0.05] {
        let r = rollout(&cfg, &fitted(), &ddu_ssh(eps), &learn).unwrap();
        assert!(r
            .traces
            .iter()
            .all(|t| t.status != DispatchStatus::Infeasible));
        let s = run_policy_testing(&cfg, &r.u, &tests).unwrap();
        if let Some(ivi) = prev {
            assert!(
                s.ivi <= ivi + 1e-6 * ivi.max(1.0),
                "eps {eps}: {} > {ivi}",
                s.ivi
            );
        }
        prev = Some(s.ivi);
    }
}

#[test]
fn rollout_is_deterministic() {
    let cfg = sim(0.1);
    let traj = disrupted(3000.0, 0.2, 12, 20);
    let a = rollout(&cfg, &fitted(), &ddu_ssh(0.05), &traj).unwrap();
    let b = rollout(&cfg, &fitted(), &ddu_ssh(0.05), &traj).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let cfg = sim(0.1);
    assert!(rollout(
        &cfg,
        &fitted(),
        &Policy::det(),
        &constant_trajectory(3000.0, 2, 5)
    )
    .is_err());
    let mut short = sim(0.1);
    short.v0.pop();
    assert!(rollout(
        &short,
        &fitted(),
        &Policy::det(),
        &constant_trajectory(3000.0, N, 5)
    )
    .is_err());
    let u = vec![vec![0.0; N]; 6];
    assert!(test_schedule(&cfg, &u, &constant_trajectory(3000.0, N, 5)).is_err());
}
