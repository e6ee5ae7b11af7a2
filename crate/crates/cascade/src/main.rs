use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use cascade::config::RunConfig;
use cascade::data::{read_history, write_records};
use cascade::experiment::{
    benchmark_problem, feasibility_map, gamma_sweep, improvement_grid, risk_table, Setup, OK,
};
use cascade::fit::{fit_all, ModelFile};
use cascade::output::{
    write_cutlog, write_json, write_rollout, write_rows, write_rows_with_header, CutRow, Manifest,
    CUTLOG_HEADER,
};
use cascade::synth::generate;
use cascade_core::dispatch::DispatchStatus;
use cascade_core::simulate::{solve, ModelKind, Policy, SolverKind};

/// Real-time dispatch of a hydropower cascade under decision-dependent
/// inflow uncertainty.
#[derive(Parser, Debug)]
#[command(name = "cascade", version)]
struct Cli {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `paths.output`).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic streamflow history.
    GenData {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit mean, DIU, GARCH-X and correlation models on a history CSV.
    Fit {
        /// Streamflow CSV (overrides `paths.data`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// One rolling-horizon learning run on the mean scenario.
    Dispatch {
        /// Forecast-error model.
        #[arg(long, value_enum, default_value_t = ModelArg::Ddu)]
        model: ModelArg,
        /// Chance-constraint treatment.
        #[arg(long, value_enum, default_value_t = SolverArg::Ssh)]
        solver: SolverArg,
        /// Joint violation tolerance (overrides `solver.epsilon`).
        #[arg(long)]
        epsilon: Option<f64>,
        /// Solve the single steady-state benchmark problem instead.
        #[arg(long)]
        benchmark: bool,
        /// Fitted model file (overrides `paths.models`).
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Run an experiment preset.
    Experiment {
        #[arg(value_enum)]
        preset: Preset,
        /// Risk level of the grid presets (overrides `solver.epsilon`).
        #[arg(long)]
        epsilon: Option<f64>,
        /// Replace the fitted release weight γ.
        #[arg(long)]
        gamma: Option<f64>,
        /// Monte Carlo scenarios per policy test.
        #[arg(long)]
        scenarios: Option<usize>,
        /// Fitted model file (overrides `paths.models`).
        #[arg(long)]
        models: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Det,
    Diu,
    Ddu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SolverArg {
    Det,
    Bon,
    Ssh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    Table1,
    Heatmap,
    Feasibility,
    GammaSweep,
    All,
}

impl Preset {
    fn dir(self) -> &'static str {
        match self {
            Preset::Table1 => "table1",
            Preset::Heatmap => "heatmap",
            Preset::Feasibility => "feasibility",
            Preset::GammaSweep => "gamma-sweep",
            Preset::All => "all",
        }
    }
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Solver(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Solver(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Solver(e) => e,
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn data(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Data(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Outcome {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(usage(anyhow::anyhow!("--jobs must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(usage)?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Some(o) = cli.output {
        cfg.paths.output = o;
    }
    match cli.command {
        Command::GenData { steps, seed } => {
            if let Some(s) = steps {
                cfg.synth.steps = s;
            }
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            gen_data(&cfg)
        }
        Command::Fit { data } => {
            if let Some(d) = data {
                cfg.paths.data = Some(d);
            }
            fit(&cfg)
        }
        Command::Dispatch {
            model,
            solver,
            epsilon,
            benchmark,
            models,
        } => {
            if let Some(m) = models {
                cfg.paths.models = m;
            }
            let det = model == ModelArg::Det || solver == SolverArg::Det;
            if let Some(e) = epsilon {
                if det {
                    eprintln!("warning: --epsilon is ignored by the deterministic dispatcher");
                } else {
                    cfg.solver.epsilon = e;
                }
            }
            cfg.validate().map_err(usage)?;
            let policy = if det {
                Policy::det()
            } else {
                Policy {
                    model: match model {
                        ModelArg::Diu => ModelKind::Diu,
                        _ => ModelKind::Ddu,
                    },
                    solver: match solver {
                        SolverArg::Bon => SolverKind::Bon,
                        _ => SolverKind::Ssh,
                    },
                    epsilon: cfg.solver.epsilon,
                }
            };
            dispatch(&cfg, &policy, benchmark)
        }
        Command::Experiment {
            preset,
            epsilon,
            gamma,
            scenarios,
            models,
        } => {
            if let Some(m) = models {
                cfg.paths.models = m;
            }
            if let Some(e) = epsilon {
                cfg.solver.epsilon = e;
            }
            if let Some(g) = gamma {
                cfg.uncertainty.gamma_override = Some(g);
            }
            if let Some(s) = scenarios {
                cfg.scenario.scenarios = s;
            }
            cfg.validate().map_err(usage)?;
            experiment(&cfg, preset)
        }
    }
}

fn out_dir(cfg: &RunConfig, sub: &str) -> Result<PathBuf, Failure> {
    let dir = cfg.paths.output.join(sub);
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(data)?;
    Ok(dir)
}

fn gen_data(cfg: &RunConfig) -> Outcome {
    cfg.synth.validate().map_err(usage)?;
    let history = generate(&cfg.synth).map_err(usage)?;
    let dir = out_dir(cfg, "data")?;
    let path = dir.join("history.csv");
    let file = std::fs::File::create(&path)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(data)?;
    write_records(std::io::BufWriter::new(file), &history.records()).map_err(data)?;
    let mut manifest = Manifest::new("gen-data", cfg);
    manifest
        .add_output(&cfg.paths.output, &path)
        .map_err(data)?;
    manifest.write(&dir).map_err(data)?;
    println!(
        "wrote {} ({} units x {} steps)",
        path.display(),
        history.units(),
        history.steps()
    );
    Ok(())
}

fn fit(cfg: &RunConfig) -> Outcome {
    let path = cfg.paths.data_path();
    let history = read_history(&path, cfg.forecast.exo_lags > 0).map_err(data)?;
    if history.units() != cfg.cascade.units {
        return Err(data(anyhow::anyhow!(
            "{} has {} units, configuration expects {}",
            path.display(),
            history.units(),
            cfg.cascade.units
        )));
    }
    let model = fit_all(
        &history,
        cfg.forecast.lags,
        cfg.forecast.exo_lags,
        cfg.synth.driver_scale,
        &cfg.uncertainty.garch,
    )
    .map_err(data)?;
    let models_path = cfg.paths.models_path();
    if !models_path.starts_with(&cfg.paths.output) {
        return Err(usage(anyhow::anyhow!(
            "paths.models ({}) must lie inside the output directory",
            models_path.display()
        )));
    }
    if let Some(parent) = models_path.parent() {
        std::fs::create_dir_all(parent).map_err(data)?;
    }
    model.save(&models_path).map_err(data)?;
    let dir = out_dir(cfg, "fit")?;
    let report = dir.join("fit_report.json");
    write_json(&report, &model.summary).map_err(data)?;
    let mut manifest = Manifest::new("fit", cfg);
    manifest
        .add_output(&cfg.paths.output, &models_path)
        .map_err(data)?;
    manifest
        .add_output(&cfg.paths.output, &report)
        .map_err(data)?;
    manifest.write(&dir).map_err(data)?;

    let s = &model.summary;
    let g = &model.models.garch;
    println!("observations  {}", s.observations);
    println!("R2            {:.4}", s.r2);
    println!("RMSE          {:.4}", s.rmse);
    println!("MAE           {:.4}", s.mae);
    println!("DIU sigma     {:?}", s.diu_sigma);
    println!(
        "GARCH-X       omega={:.6} alpha={:.6} beta={:.6} gamma={:.6}",
        g.omega, g.alpha_e, g.beta_v, g.gamma
    );
    println!("log-lik       {:.3}", s.garch_log_likelihood);
    println!("models        {}", models_path.display());
    Ok(())
}

fn load_setup(cfg: &RunConfig) -> Result<(Setup, String), Failure> {
    let path = cfg.paths.models_path();
    let model = ModelFile::load(&path).map_err(data)?;
    let bytes = std::fs::read(&path).map_err(data)?;
    let setup = Setup::new(cfg.clone(), model.models).map_err(data)?;
    Ok((setup, cascade::output::sha256_hex(&bytes)))
}

fn dispatch(cfg: &RunConfig, policy: &Policy, benchmark: bool) -> Outcome {
    let (setup, models_hash) = load_setup(cfg)?;
    let dir = out_dir(cfg, "dispatch")?;
    let mut manifest = Manifest::new(&format!("dispatch {}", policy.label()), cfg);
    manifest.models_sha256 = Some(models_hash);
    let solution = dir.join("solution.json");
    let cutlog = dir.join("cutlog.csv");

    if benchmark {
        let problem = benchmark_problem(&setup, policy.epsilon).map_err(data)?;
        let sol =
            solve(&problem, policy, &cfg.solver.config()).map_err(|e| Failure::Solver(e.into()))?;
        write_json(&solution, &sol).map_err(data)?;
        let rows: Vec<CutRow> = sol
            .cut_log
            .entries
            .iter()
            .map(|e| CutRow {
                step: 0,
                iteration: e.iteration,
                lambda_star: e.lambda_star,
                probability: e.probability,
                objective_mwh: e.objective,
            })
            .collect();
        write_rows_with_header(&cutlog, &CUTLOG_HEADER, &rows).map_err(data)?;
        manifest
            .add_output(&cfg.paths.output, &solution)
            .map_err(data)?;
        manifest
            .add_output(&cfg.paths.output, &cutlog)
            .map_err(data)?;
        manifest.write(&dir).map_err(data)?;
        println!(
            "objective {:.6} MWh, {} cuts, status {:?}",
            sol.objective, sol.iterations, sol.status
        );
        if sol.status == DispatchStatus::Infeasible {
            return Err(Failure::Solver(anyhow::anyhow!(
                "benchmark is infeasible: {}",
                sol.message.unwrap_or_default()
            )));
        }
        return Ok(());
    }

    let learned = setup
        .learn(&setup.models, policy, &setup.dists())
        .map_err(Failure::Solver)?;
    let r = &learned.result;
    write_json(&solution, r).map_err(data)?;
    write_cutlog(&cutlog, r).map_err(data)?;
    let rollout = dir.join("rollout.csv");
    write_rollout(&rollout, r, cfg.cascade.step_seconds).map_err(data)?;
    for p in [&solution, &cutlog, &rollout] {
        manifest.add_output(&cfg.paths.output, p).map_err(data)?;
    }
    manifest.write(&dir).map_err(data)?;
    println!(
        "{}: expected generation {:.3} MWh, learning IVI {:.3e} m3, {} steps",
        policy.label(),
        r.total_generation,
        r.ivi,
        r.u.len()
    );
    let infeasible: Vec<String> = r
        .traces
        .iter()
        .enumerate()
        .filter(|(_, t)| t.status == DispatchStatus::Infeasible)
        .map(|(k, t)| format!("step {k}: {}", t.message.as_deref().unwrap_or("infeasible")))
        .collect();
    if !infeasible.is_empty() {
        return Err(Failure::Solver(anyhow::anyhow!(
            "{} infeasible step(s), fallback release used:\n  {}",
            infeasible.len(),
            infeasible.join("\n  ")
        )));
    }
    Ok(())
}

fn experiment(cfg: &RunConfig, preset: Preset) -> Outcome {
    let (setup, models_hash) = load_setup(cfg)?;
    let presets = match preset {
        Preset::All => vec![
            Preset::Table1,
            Preset::Heatmap,
            Preset::Feasibility,
            Preset::GammaSweep,
        ],
        p => vec![p],
    };
    let mut failures = Vec::new();
    for p in presets {
        let dir = out_dir(cfg, &format!("experiment/{}", p.dir()))?;
        let mut manifest = Manifest::new(&format!("experiment {}", p.dir()), cfg);
        manifest.models_sha256 = Some(models_hash.clone());
        let mut written = Vec::new();
        let mut statuses: Vec<String> = Vec::new();
        match p {
            Preset::Table1 => {
                let rows = risk_table(&setup).map_err(usage)?;
                statuses.extend(rows.iter().map(|r| r.status.clone()));
                let path = dir.join("table1.csv");
                write_rows(&path, &rows).map_err(data)?;
                written.push(path);
            }
            Preset::Heatmap => {
                let cells = improvement_grid(&setup).map_err(usage)?;
                statuses.extend(cells.iter().map(|c| c.status.clone()));
                let path = dir.join("heatmap.csv");
                write_rows(&path, &cells).map_err(data)?;
                written.push(path);
            }
            Preset::Feasibility => {
                let (cells, summary) = feasibility_map(&setup).map_err(usage)?;
                statuses.extend(cells.iter().map(|c| c.status.clone()));
                let path = dir.join("feasibility.csv");
                write_rows(&path, &cells).map_err(data)?;
                written.push(path);
                let path = dir.join("regimes.csv");
                write_rows(&path, &summary).map_err(data)?;
                written.push(path);
            }
            Preset::GammaSweep => {
                let points = gamma_sweep(&setup).map_err(usage)?;
                statuses.extend(points.iter().map(|g| g.status.clone()));
                let path = dir.join("gamma_sweep.csv");
                write_rows(&path, &points).map_err(data)?;
                written.push(path);
            }
            Preset::All => unreachable!("expanded above"),
        }
        for path in &written {
            manifest.add_output(&cfg.paths.output, path).map_err(data)?;
            println!("wrote {}", path.display());
        }
        manifest.write(&dir).map_err(data)?;
        failures.extend(
            statuses
                .into_iter()
                .filter(|s| s != OK)
                .map(|s| format!("{}: {s}", p.dir())),
        );
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Solver(anyhow::anyhow!(
            "{} cell(s) did not complete:\n  {}",
            failures.len(),
            failures.join("\n  ")
        )))
    }
}
