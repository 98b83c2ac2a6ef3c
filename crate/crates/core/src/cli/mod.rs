//! Command-line runner: config loading, experiment dispatch and artifact output.

pub mod config;
pub mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use crate::diagnostics::{
    boundary_hit_rate, chaos_study, drift_consistency_study, epsilon_convergence_study, invariance_report,
    maxwellian_envelope_check, mean_no_permeability, reflection_invariants, DiagnosticsError, EnvelopeParams,
};
use crate::drift::VelocityKernel;
use crate::geometry::{Domain, Vector};
use crate::halfspace_oracle::{passage_bound_report, OracleError};
use crate::simulator::{pathwise_identity_check, run, run_timed, InitialLaw, SimConfig, SimError, VelocityLaw};

use config::{parse_config, ConfigError, ExperimentConfig};
use output::{fmt_f64, simulation_artifacts, Artifacts, Csv, Status, Verdict};

pub const ENV_SEED: &str = "CONFINED_SEED";
pub const ENV_OUT: &str = "CONFINED_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2: bad input, 3: computation failed, 4: output could not be written.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Simulation(SimError::InvalidConfig(_)) => 2,
            CliError::Simulation(_) | CliError::Diagnostics(_) | CliError::Oracle(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "confined", version, about = "Confined Lagrangian particle simulations and their verification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment configuration file (TOML).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory [default: out/<subcommand>].
    #[arg(long, value_name = "DIR", env = ENV_OUT)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, env = ENV_SEED)]
    pub seed: Option<u64>,
    /// Worker threads (0: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct StudyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of independent seeds; overrides the config file.
    #[arg(long)]
    pub seeds: Option<u32>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one simulation and write events, checkpoints and a summary.
    Simulate(Common),
    /// Free flow in the unit disc: velocity variance, radial law and wall statistics at T.
    InvarianceTest(Common),
    /// Mean normal velocity in boundary shells of several widths.
    NoPermeability(Common),
    /// Wall hits per particle against the closed-form prediction, over several seeds.
    HitRate(StudyArgs),
    /// Passage counts of the free Langevin process at a wall against the explicit bound.
    PassageBound(PassageArgs),
    /// Pair covariance of particle functionals across system sizes.
    ChaosStudy(StudyArgs),
    /// Phase-space density distance to a small-ε reference run.
    EpsilonStudy(StudyArgs),
    /// Smoothed empirical drift against the exact conditional drift.
    DriftConsistency(StudyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct PassageArgs {
    #[command(flatten)]
    pub common: Common,
    /// Horizon T.
    #[arg(long = "T", value_name = "T")]
    pub horizon: Option<f64>,
    /// Distance β* of the initial support to the wall.
    #[arg(long)]
    pub beta_star: Option<f64>,
    /// Largest passage index reported.
    #[arg(long)]
    pub n_max: Option<u32>,
    /// Monte Carlo paths.
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Initial position (distance to the wall).
    #[arg(long)]
    pub y: Option<f64>,
    /// Initial velocity.
    #[arg(long, allow_hyphen_values = true)]
    pub v: Option<f64>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::InvarianceTest(_) => "invariance-test",
            Command::NoPermeability(_) => "no-permeability",
            Command::HitRate(_) => "hit-rate",
            Command::PassageBound(_) => "passage-bound",
            Command::ChaosStudy(_) => "chaos-study",
            Command::EpsilonStudy(_) => "epsilon-study",
            Command::DriftConsistency(_) => "drift-consistency",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Simulate(c) | Command::InvarianceTest(c) | Command::NoPermeability(c) => c,
            Command::HitRate(s) | Command::ChaosStudy(s) | Command::EpsilonStudy(s) | Command::DriftConsistency(s) => &s.common,
            Command::PassageBound(p) => &p.common,
        }
    }
}

/// Unit disc, no drift, uniform positions × `N(0, I)` velocities, `N = 5·10⁴`, `dt = 10⁻³`, `T = 1`.
pub fn free_flow_base() -> SimConfig {
    let mut cfg = SimConfig::new(Domain::unit_ball(2), 50_000, InitialLaw::uniform_gaussian(2, 1.0));
    cfg.dt = 1e-3;
    cfg.horizon = 1.0;
    cfg
}

/// Unit interval with `b = −tanh`, `N = 2000`, `ε = 0.1`, `dt = 0.01`.
pub fn interval_base(horizon: f64, velocity_mean: f64) -> SimConfig {
    let mut initial = InitialLaw::uniform_gaussian(1, 1.0);
    initial.velocity = VelocityLaw::Gaussian { mean: Vector::from_elem(velocity_mean, 1), std: 1.0 };
    let mut cfg = SimConfig::new(Domain::interval(1.0).expect("valid length"), 2000, initial);
    cfg.kernel = VelocityKernel::NegTanh;
    cfg.epsilon = 0.1;
    cfg.dt = 0.01;
    cfg.horizon = horizon;
    cfg
}

fn simulate_base() -> SimConfig {
    let mut cfg = SimConfig::new(Domain::unit_ball(2), 1000, InitialLaw::uniform_gaussian(2, 1.0));
    cfg.kernel = VelocityKernel::NegTanh;
    cfg.epsilon = 0.2;
    cfg.record_events = true;
    cfg.checkpoints = vec![0.5, 1.0];
    cfg
}

fn seeds(master: u64, count: u32) -> Vec<u64> {
    (0..count as u64).map(|i| master.wrapping_add(i)).collect()
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable statistics")
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    let sim = cfg.sim_config(simulate_base())?;
    let (record, wall) = run_timed(&sim)?;
    let mut art = Artifacts { files: simulation_artifacts(&record, wall), ..Default::default() };
    let (status, stats, tol) = if sim.record_events {
        let refl = reflection_invariants(&record);
        let residual = pathwise_identity_check(&record)?;
        let ok = refl.max_speed_change <= 1e-12 && refl.max_normal_defect <= 1e-12 && refl.max_jump_mismatch == 0.0 && residual <= 1e-10;
        (
            Status::from_pass(ok),
            json!({ "reflection": refl, "pathwise_residual": residual, "jump_histogram": record.jump_histogram() }),
            json!({ "speed_change": 1e-12, "normal_defect": 1e-12, "jump_mismatch": 0.0, "pathwise_residual": 1e-10 }),
        )
    } else {
        (Status::Monitor, json!({ "jump_histogram": record.jump_histogram() }), json!({}))
    };
    art.verdicts.push(Verdict { name: "simulate".into(), status, statistics: stats, tolerances: tol, seeds: vec![sim.seed], wall_time_s: wall });
    Ok(art)
}

pub fn invariance_test(cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    let sim = cfg.sim_config(free_flow_base())?;
    let p = &cfg.invariance;
    let (record, wall) = run_timed(&sim)?;
    let rep = invariance_report(&record, p.delta)?;
    let var_ok = rep.variances.iter().all(|v| (v - rep.expected_variance).abs() <= p.variance_tol);
    let radial_ok = rep.radial_deviation < p.radial_tol;
    let shell_ok = rep.shell.within(3.0);
    let mut art = Artifacts::default();
    let mut csv = Csv::new(["statistic", "value", "target", "tolerance", "pass"]);
    for (j, v) in rep.variances.iter().enumerate() {
        let ok = (v - rep.expected_variance).abs() <= p.variance_tol;
        csv.push(vec![format!("velocity_variance_{j}"), fmt_f64(*v), fmt_f64(rep.expected_variance), fmt_f64(p.variance_tol), ok.to_string()]);
    }
    csv.push(vec!["radial_cdf_deviation".into(), fmt_f64(rep.radial_deviation), "0.0".into(), fmt_f64(p.radial_tol), radial_ok.to_string()]);
    csv.push(vec![
        "shell_mean_normal_velocity".into(),
        rep.shell.estimate.map_or("nan".into(), fmt_f64),
        "0.0".into(),
        rep.shell.std_error.map_or("nan".into(), |s| fmt_f64(3.0 * s)),
        shell_ok.to_string(),
    ]);
    art.add_csv("invariance.csv", &csv);
    art.verdicts.push(Verdict {
        name: "invariance-test".into(),
        status: Status::from_pass(var_ok && radial_ok && shell_ok),
        statistics: to_json(&rep),
        tolerances: json!({ "variance": p.variance_tol, "radial_cdf": p.radial_tol, "shell_standard_errors": 3.0 }),
        seeds: vec![sim.seed],
        wall_time_s: wall,
    });
    // Envelope monitoring on the first velocity coordinate.
    if let VelocityLaw::Gaussian { std, .. } = &sim.initial.velocity {
        let u0: Vec<f64> = record.final_particles.iter().map(|p| p.u[0]).collect();
        let params = EnvelopeParams { s0: *std, sigma: sim.sigma, time: record.final_time(), upper: (0.0, 1.0), lower: (0.0, 1.0) };
        let env = maxwellian_envelope_check(&u0, &params);
        art.verdicts.push(Verdict {
            name: "maxwellian-envelope".into(),
            status: Status::Monitor,
            statistics: to_json(&env),
            tolerances: json!({ "poisson_standard_errors": 3.0, "min_bin_count": crate::diagnostics::ENVELOPE_MIN_COUNT }),
            seeds: vec![sim.seed],
            wall_time_s: 0.0,
        });
    }
    Ok(art)
}

pub fn no_permeability(cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    let sim = cfg.sim_config(free_flow_base())?;
    let (record, wall) = run_timed(&sim)?;
    let shells: Vec<_> = cfg
        .no_permeability
        .deltas
        .iter()
        .map(|&d| mean_no_permeability(&record.final_particles, &sim.domain, d))
        .collect();
    let mut csv = Csv::new(["delta", "count", "estimate", "std_error", "pass"]);
    for s in &shells {
        csv.push(vec![
            fmt_f64(s.delta),
            s.count.to_string(),
            s.estimate.map_or("nan".into(), fmt_f64),
            s.std_error.map_or("nan".into(), fmt_f64),
            s.within(3.0).to_string(),
        ]);
    }
    let mut art = Artifacts::default();
    art.add_csv("no_permeability.csv", &csv);
    art.verdicts.push(Verdict {
        name: "no-permeability".into(),
        status: Status::from_pass(shells.iter().all(|s| s.within(3.0))),
        statistics: to_json(&shells),
        tolerances: json!({ "standard_errors": 3.0 }),
        seeds: vec![sim.seed],
        wall_time_s: wall,
    });
    Ok(art)
}

pub fn hit_rate(cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    let base = cfg.sim_config(free_flow_base())?;
    let start = Instant::now();
    let seeds = seeds(base.seed, cfg.hit_rate.seeds);
    let mut rows = Vec::new();
    for &s in &seeds {
        let mut sim = base.clone();
        sim.seed = s;
        rows.push((s, boundary_hit_rate(&run(&sim)?)?));
    }
    let z_max = cfg.hit_rate.z_max;
    let mut csv = Csv::new(["seed", "particles", "hits", "empirical", "predicted", "std_error", "z", "pass"]);
    for (s, h) in &rows {
        csv.push(vec![
            s.to_string(),
            h.particles.to_string(),
            h.hits.to_string(),
            fmt_f64(h.empirical),
            fmt_f64(h.predicted),
            fmt_f64(h.std_error),
            fmt_f64(h.z),
            (h.z.abs() <= z_max).to_string(),
        ]);
    }
    let mut art = Artifacts::default();
    art.add_csv("hit_rate.csv", &csv);
    let worst = rows.iter().map(|(_, h)| h.z.abs()).fold(0.0, f64::max);
    art.verdicts.push(Verdict {
        name: "hit-rate".into(),
        status: Status::from_pass(worst <= z_max),
        statistics: json!({ "predicted": rows.first().map(|r| r.1.predicted), "max_abs_z": worst, "runs": rows.iter().map(|r| r.1).collect::<Vec<_>>() }),
        tolerances: json!({ "max_abs_z": z_max }),
        seeds,
        wall_time_s: start.elapsed().as_secs_f64(),
    });
    Ok(art)
}

pub fn passage_bound(cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    let p = &cfg.passage;
    let seed = cfg.master_seed();
    let start = Instant::now();
    let rep = passage_bound_report(p.y, p.v, p.horizon, p.beta_star, p.n_max, p.dt, p.paths, seed)?;
    let mut csv = Csv::new(["n", "estimate", "std_error", "bound", "pass"]);
    for r in &rep.rows {
        csv.push(vec![r.n.to_string(), fmt_f64(r.estimate), fmt_f64(r.std_error), fmt_f64(r.bound), r.pass.to_string()]);
    }
    let mut art = Artifacts::default();
    art.add_csv("passage_bound.csv", &csv);
    art.verdicts.push(Verdict {
        name: "passage-bound".into(),
        status: Status::from_pass(rep.all_pass()),
        statistics: to_json(&rep),
        tolerances: json!({ "standard_errors": 3.0, "scheme_relative_agreement": 1e-6 }),
        seeds: vec![seed],
        wall_time_s: start.elapsed().as_secs_f64(),
    });
    Ok(art)
}

pub fn chaos(cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    let base = cfg.sim_config(interval_base(0.5, 0.0))?;
    let c = &cfg.chaos;
    let start = Instant::now();
    let seeds = seeds(base.seed, c.seeds);
    let interacting = chaos_study(&base, &c.sizes, &seeds, c.functional)?;
    let mut free = base.clone();
    free.kernel = VelocityKernel::Zero;
    let baseline = chaos_study(&free, &c.sizes, &seeds, c.functional)?;
    let mut csv = Csv::new(["kernel", "n", "seed", "cov", "std_error"]);
    for (name, study) in [("interacting", &interacting), ("zero", &baseline)] {
        for r in &study.rows {
            csv.push(vec![name.into(), r.n.to_string(), r.seed.to_string(), fmt_f64(r.cov), fmt_f64(r.std_error)]);
        }
    }
    let mut art = Artifacts::default();
    art.add_csv("chaos.csv", &csv);
    art.verdicts.push(Verdict {
        name: "chaos-study".into(),
        status: Status::from_pass(interacting.non_increasing() && baseline.consistent_with_zero(3.0)),
        statistics: json!({
            "sizes": c.sizes,
            "median_abs_cov": interacting.median_abs_cov,
            "null_pooled_cov": baseline.pooled,
        }),
        tolerances: json!({ "trend": "non-increasing median |cov|", "null_standard_errors": 3.0 }),
        seeds,
        wall_time_s: start.elapsed().as_secs_f64(),
    });
    Ok(art)
}

pub fn epsilon(cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    let base = cfg.sim_config(interval_base(1.0, 1.0))?;
    let e = &cfg.epsilon_study;
    let start = Instant::now();
    let seeds = seeds(base.seed, e.seeds);
    let study = epsilon_convergence_study(&base, &e.epsilons, e.epsilon_ref, &seeds, e.nodes_x, e.nodes_u)?;
    let mut csv = Csv::new(["seed", "epsilon", "l1_distance"]);
    for r in &study.rows {
        csv.push(vec![r.seed.to_string(), fmt_f64(r.epsilon), fmt_f64(r.distance)]);
    }
    let mut art = Artifacts::default();
    art.add_csv("epsilon_study.csv", &csv);
    art.verdicts.push(Verdict {
        name: "epsilon-study".into(),
        status: Status::from_pass(study.non_increasing()),
        statistics: json!({ "epsilons": study.epsilons, "epsilon_ref": study.epsilon_ref, "median_l1": study.medians }),
        tolerances: json!({ "trend": "non-increasing median L1 distance" }),
        seeds,
        wall_time_s: start.elapsed().as_secs_f64(),
    });
    Ok(art)
}

pub fn drift_consistency(cfg: &ExperimentConfig) -> Result<Artifacts, CliError> {
    let d = &cfg.drift_consistency;
    let dom = cfg.simulation.domain.clone().unwrap_or_else(|| Domain::unit_ball(2));
    let start = Instant::now();
    let seeds = seeds(cfg.master_seed(), d.seeds);
    let schedule: Vec<(usize, f64)> = d.sizes.iter().copied().zip(d.epsilons.iter().copied()).collect();
    let queries: Vec<Vector> = d.queries.iter().map(|q| q.iter().copied().collect()).collect();
    let study = drift_consistency_study(&dom, &d.velocity_mean, d.velocity_std, &d.kernel, &schedule, &seeds, &queries)?;
    let mut csv = Csv::new(["n", "epsilon", "seed", "mean_error"]);
    for r in &study.rows {
        csv.push(vec![r.n.to_string(), fmt_f64(r.epsilon), r.seed.to_string(), fmt_f64(r.error)]);
    }
    let mut art = Artifacts::default();
    art.add_csv("drift_consistency.csv", &csv);
    art.verdicts.push(Verdict {
        name: "drift-consistency".into(),
        status: Status::from_pass(study.decreasing()),
        statistics: json!({ "schedule": study.schedule, "median_error": study.medians }),
        tolerances: json!({ "trend": "strictly decreasing median error" }),
        seeds,
        wall_time_s: start.elapsed().as_secs_f64(),
    });
    Ok(art)
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => parse_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    if let Some(w) = common.workers {
        cfg.workers = Some(w);
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

/// Runs a parsed command line; returns the artifacts and the directory they were written to.
pub fn execute(cli: &Cli) -> Result<(Artifacts, PathBuf), CliError> {
    let common = cli.command.common();
    let mut cfg = load(common)?;
    match &cli.command {
        Command::HitRate(s) | Command::ChaosStudy(s) | Command::EpsilonStudy(s) | Command::DriftConsistency(s) => {
            if let Some(n) = s.seeds {
                cfg.hit_rate.seeds = n;
                cfg.chaos.seeds = n;
                cfg.epsilon_study.seeds = n;
                cfg.drift_consistency.seeds = n;
            }
        }
        Command::PassageBound(p) => {
            let sec = &mut cfg.passage;
            sec.horizon = p.horizon.unwrap_or(sec.horizon);
            sec.beta_star = p.beta_star.unwrap_or(sec.beta_star);
            sec.n_max = p.n_max.unwrap_or(sec.n_max);
            sec.paths = p.paths.unwrap_or(sec.paths);
            sec.dt = p.dt.unwrap_or(sec.dt);
            sec.y = p.y.unwrap_or(sec.y);
            sec.v = p.v.unwrap_or(sec.v);
        }
        _ => {}
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out").join(cli.command.name()));
    let go = || match &cli.command {
        Command::Simulate(_) => simulate(&cfg),
        Command::InvarianceTest(_) => invariance_test(&cfg),
        Command::NoPermeability(_) => no_permeability(&cfg),
        Command::HitRate(_) => hit_rate(&cfg),
        Command::PassageBound(_) => passage_bound(&cfg),
        Command::ChaosStudy(_) => chaos(&cfg),
        Command::EpsilonStudy(_) => epsilon(&cfg),
        Command::DriftConsistency(_) => drift_consistency(&cfg),
    };
    let art = match cfg.workers.filter(|w| *w > 0) {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| std::io::Error::other(e.to_string()))?
            .install(go)?,
        None => go()?,
    };
    art.write(&out, &to_json(&cfg))?;
    Ok((art, out))
}

pub fn main_with(cli: Cli) -> ExitCode {
    match execute(&cli) {
        Ok((art, out)) => {
            for v in &art.verdicts {
                let status = match v.status {
                    Status::Pass => "pass",
                    Status::Fail => "FAIL",
                    Status::Monitor => "monitor",
                };
                println!("{:<22} {status}", v.name);
            }
            println!("outputs written to {}", out.display());
            if art.any_failed() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
