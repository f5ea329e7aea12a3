//! The `ctql` command-line front end.
//!
//! Every subcommand reads a flat `key=value` config (optional), applies
//! `--set key=value` overrides and `--seed`, fills in defaults and writes its
//! artifacts plus a `manifest.json` into `--out-dir`.
//!
//! Exit codes: 0 success, 2 config error, 3 artifact or shape error,
//! 4 numerical divergence or non-convergence.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, FlatConfig};
use crate::env::{AugmentedState, EnvironmentSpec};
use crate::hjb_oracle::{
    self, ControlRateSet, FiniteHorizonProblem, GridSolution, GridSpec, IterationControl,
    OracleError, TerminalCost, ValueFormat,
};
use crate::io::fmt_f64;
use crate::learner::{self, GreedyPolicy, LearningCurve, TrainConfig, TrainError, Trainer};
use crate::odeint::{self, IntegratorConfig};
use crate::qnet::{Checkpoint, QNetError, QNetwork};
use crate::rng::{streams, RngState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ARTIFACT: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error("numerical failure: {0}")]
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Artifact(_) => EXIT_ARTIFACT,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Artifact(e.to_string())
    }
}

impl From<QNetError> for CliError {
    fn from(e: QNetError) -> Self {
        CliError::Artifact(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "ctql", about = "Continuous-time Q-learning with rate-bounded controls")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key=value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=<SEED>`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for all artifacts of this run.
    #[arg(long, default_value = "ctql-out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the Q-network and write the learning curve and checkpoints.
    Train(Common),
    /// Roll out the greedy policy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Solve the HJB equation on a grid.
    SolveHjb(Common),
    /// Compare a checkpoint against a grid solution.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        solution: PathBuf,
        /// Fraction of the grid box (per axis, centred) used for probes.
        #[arg(long)]
        inner: Option<f64>,
    },
}

/// Keys accepted by the run itself (beyond environment and training).
pub const RUN_KEYS: &[&str] = &["checkpoint_every", "sample_dt"];

pub const GRID_KEYS: &[&str] = &[
    "mode",
    "grid_points",
    "grid_x_min",
    "grid_x_max",
    "grid_u_min",
    "grid_u_max",
    "delta",
    "tol",
    "max_iter",
    "directions",
    "horizon",
    "time_steps",
    "terminal",
    "value_format",
];

pub const COMPARE_KEYS: &[&str] = &["inner", "probes_per_axis"];

/// Every key any subcommand understands.
pub fn allowed_keys() -> Vec<&'static str> {
    let mut keys: Vec<&'static str> = EnvironmentSpec::CONFIG_KEYS.to_vec();
    for k in TrainConfig::CONFIG_KEYS
        .iter()
        .chain(RUN_KEYS)
        .chain(GRID_KEYS)
        .chain(COMPARE_KEYS)
    {
        if !keys.contains(k) {
            keys.push(k);
        }
    }
    keys
}

/// Reads the config file, applies overrides and rejects unknown keys.
pub fn resolve_config(common: &Common) -> Result<FlatConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => FlatConfig::load(path)?,
        None => FlatConfig::new(),
    };
    for o in &common.overrides {
        cfg.apply_assignment(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", seed.to_string());
    }
    cfg.check_known(&allowed_keys())?;
    Ok(cfg)
}

/// Record of one invocation. The fingerprint hashes the resolved config only,
/// so it does not depend on the wall-clock fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub config_fingerprint: String,
    /// Artifact paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub status: String,
    pub started_unix: f64,
    pub elapsed_seconds: f64,
}

struct Run {
    command: String,
    cfg: FlatConfig,
    out_dir: PathBuf,
    artifacts: Vec<String>,
    started: Instant,
    started_unix: f64,
}

impl Run {
    fn new(command: &str, cfg: FlatConfig, out_dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(out_dir)?;
        Ok(Self {
            command: command.to_string(),
            cfg,
            out_dir: out_dir.to_path_buf(),
            artifacts: Vec::new(),
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
        self.out_dir.join(name)
    }

    fn finish(mut self, status: &str) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.command.clone(),
            config: self
                .cfg
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            seed: self.cfg.parsed_or("seed", 0u64)?,
            config_fingerprint: self.cfg.fingerprint(),
            artifacts: {
                let mut a = self.artifacts.clone();
                a.push("manifest.json".into());
                a
            },
            status: status.to_string(),
            started_unix: self.started_unix,
            elapsed_seconds: self.started.elapsed().as_secs_f64(),
        };
        let path = self.path("manifest.json");
        crate::io::write_json(&path, &manifest)?;
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<std::fs::File>, CliError> {
    Ok(BufWriter::new(std::fs::File::create(path)?))
}

fn fill_train_defaults(cfg: &mut FlatConfig) {
    let d = TrainConfig::default();
    cfg.set_default("N", d.iterations.to_string());
    cfg.set_default("K", d.batch.to_string());
    cfg.set_default("h", d.h.to_string());
    cfg.set_default("tau", d.tau.to_string());
    cfg.set_default("lr", d.learning_rate.to_string());
    cfg.set_default("grad_zero_tol", d.grad_zero_tol.to_string());
    cfg.set_default("substeps", d.substeps.to_string());
    cfg.set_default("seed", d.seed.to_string());
    cfg.set_default("eval_every", d.eval_every.to_string());
    cfg.set_default("eval_T", d.eval_t.to_string());
    cfg.set_default(
        "hidden",
        d.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
    );
    cfg.set_default("policy_hold", "feedback");
    cfg.set_default("probe_count", d.probe_count.to_string());
    cfg.set_default("checkpoint_every", "0");
    cfg.set_default("preset", "lqr1d");
}

fn fill_env_defaults(cfg: &mut FlatConfig, env: &EnvironmentSpec) {
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    cfg.set_default("preset", "lqr1d");
    cfg.set_default("n", env.n.to_string());
    cfg.set_default("m", env.m.to_string());
    cfg.set_default("gamma", env.gamma.to_string());
    cfg.set_default("M", env.rate_bound.to_string());
    cfg.set_default("x_min", env.x_min.to_string());
    cfg.set_default("x_max", env.x_max.to_string());
    cfg.set_default("u_min", env.u_min.to_string());
    cfg.set_default("u_max", env.u_max.to_string());
    cfg.set_default("A", join(&env.a.data));
    cfg.set_default("B", join(&env.b.data));
    cfg.set_default(
        "cost",
        match env.cost {
            crate::env::CostKind::Quadratic => "quadratic",
            crate::env::CostKind::Zero => "zero",
        },
    );
}

fn write_curve(run: &mut Run, curve: &LearningCurve) -> Result<(), CliError> {
    let path = run.path("curve.csv");
    let mut w = create(&path)?;
    curve.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

/// `train`: runs the Q-learner; writes `curve.csv`, `checkpoint_final.json`,
/// periodic `checkpoints/iter_<k>.json`, the greedy trajectory from the
/// evaluation start and the manifest.
pub fn cmd_train(common: &Common) -> Result<(), CliError> {
    let mut cfg = resolve_config(common)?;
    let env = EnvironmentSpec::from_config(&cfg)?;
    fill_train_defaults(&mut cfg);
    fill_env_defaults(&mut cfg, &env);
    let tcfg = TrainConfig::from_config(&cfg)?;
    let checkpoint_every: usize = cfg.parsed_or("checkpoint_every", 0)?;
    let fingerprint = cfg.fingerprint();
    let mut trainer =
        Trainer::new(&env, &tcfg).map_err(|e| CliError::Config(e.to_string()))?;
    let mut run = Run::new("train", cfg, &common.out_dir)?;
    if checkpoint_every > 0 {
        std::fs::create_dir_all(common.out_dir.join("checkpoints"))?;
    }

    let mut curve = LearningCurve::default();
    let mut periodic: Vec<(String, Result<(), QNetError>)> = Vec::new();
    let out_dir = common.out_dir.clone();
    let outcome = trainer.run(&mut curve, &mut |t: &Trainer| {
        if checkpoint_every > 0 && t.iteration % checkpoint_every == 0 {
            let name = format!("checkpoints/iter_{:06}.json", t.iteration);
            let ck = Checkpoint::new(&t.network, &t.target, &t.adam, t.iteration, &fingerprint);
            let res = ck.save(&out_dir.join(&name));
            periodic.push((name, res));
        }
    });
    for (name, res) in periodic {
        res?;
        run.path(&name);
    }

    write_curve(&mut run, &curve)?;
    let ck = Checkpoint::new(
        &trainer.network,
        &trainer.target,
        &trainer.adam,
        trainer.iteration,
        &fingerprint,
    );
    let ck_path = run.path("checkpoint_final.json");
    ck.save(&ck_path)?;

    match outcome {
        Ok(()) => {
            let mut policy = GreedyPolicy::new(
                &trainer.network,
                &env,
                tcfg.grad_zero_tol,
                RngState::stream(tcfg.seed, streams::EVAL_TIES),
            );
            if let Ok(rows) = odeint::trajectory_record(
                &env,
                &trainer.eval_start,
                &mut policy,
                tcfg.eval_t,
                &tcfg.integrator(),
                tcfg.h,
            ) {
                let path = run.path("trajectory.csv");
                let mut w = create(&path)?;
                odeint::write_trajectory_csv(&rows, env.n, env.m, &mut w)?;
                w.flush()?;
            }
            if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
                println!(
                    "trained {} iterations: eval_cost {} -> {}",
                    trainer.iteration, first.eval_cost, last.eval_cost
                );
            }
            run.finish("ok")
        }
        Err(e) => {
            run.finish("diverged")?;
            Err(match e {
                TrainError::InvalidConfig(s) => CliError::Config(s),
                other => CliError::Divergence(other.to_string()),
            })
        }
    }
}

fn eval_start_from(cfg: &FlatConfig, env: &EnvironmentSpec) -> Result<AugmentedState, CliError> {
    match (cfg.float_list("eval_x")?, cfg.float_list("eval_u")?) {
        (Some(x), Some(u)) => {
            let z = AugmentedState::new(x, u);
            env.check_state(&z)
                .map_err(|e| CliError::Config(format!("eval start: {e}")))?;
            Ok(z)
        }
        (None, None) => Ok(learner::default_eval_start(env, cfg.parsed_or("seed", 0u64)?)),
        _ => Err(CliError::Config("eval_x and eval_u must be given together".into())),
    }
}

/// `eval`: discounted cost of the checkpoint's greedy policy from the
/// evaluation start over `eval_T`, plus `trajectory.csv`.
pub fn cmd_eval(common: &Common, checkpoint: &Path) -> Result<f64, CliError> {
    let mut cfg = resolve_config(common)?;
    let env = EnvironmentSpec::from_config(&cfg)?;
    fill_env_defaults(&mut cfg, &env);
    cfg.set_default("eval_T", "10");
    cfg.set_default("h", "0.05");
    cfg.set_default("substeps", "5");
    cfg.set_default("grad_zero_tol", "1e-12");
    cfg.set_default("seed", "0");
    let ck = Checkpoint::load(checkpoint)?;
    ck.check_input_dim(env.n + env.m)?;
    let z0 = eval_start_from(&cfg, &env)?;
    let t_eval: f64 = cfg.parsed_or("eval_T", 10.0)?;
    let integ = IntegratorConfig {
        h: cfg.parsed_or("h", 0.05)?,
        substeps: cfg.parsed_or("substeps", 5)?,
    };
    integ.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let sample_dt: f64 = cfg.parsed_or("sample_dt", integ.h)?;
    let tol: f64 = cfg.parsed_or("grad_zero_tol", 1e-12)?;
    let seed: u64 = cfg.parsed_or("seed", 0)?;

    let mut run = Run::new("eval", cfg, &common.out_dir)?;
    let cost = learner::greedy_cost(&ck.network, &env, &z0, t_eval, &integ, tol, seed)
        .map_err(|e| CliError::Divergence(e.to_string()))?;
    let mut policy = GreedyPolicy::new(
        &ck.network,
        &env,
        tol,
        RngState::stream(seed, streams::EVAL_TIES),
    );
    let rows = odeint::trajectory_record(&env, &z0, &mut policy, t_eval, &integ, sample_dt)
        .map_err(|e| CliError::Divergence(e.to_string()))?;
    let path = run.path("trajectory.csv");
    let mut w = create(&path)?;
    odeint::write_trajectory_csv(&rows, env.n, env.m, &mut w)?;
    w.flush()?;
    println!("discounted cost {}", fmt_f64(cost));
    run.finish("ok")?;
    Ok(cost)
}

/// Grid, rate set and solver settings from the config.
pub fn grid_from_config(
    cfg: &FlatConfig,
    env: &EnvironmentSpec,
) -> Result<(GridSpec, ControlRateSet), CliError> {
    let points: usize = cfg.parsed_or("grid_points", 201)?;
    let grid = GridSpec::uniform(
        env.n,
        env.m,
        (cfg.parsed_or("grid_x_min", -2.0)?, cfg.parsed_or("grid_x_max", 2.0)?),
        (cfg.parsed_or("grid_u_min", -2.0)?, cfg.parsed_or("grid_u_max", 2.0)?),
        points,
    );
    let directions: usize = cfg.parsed_or("directions", hjb_oracle::DEFAULT_DIRECTIONS)?;
    let rates = ControlRateSet::standard(env.m, env.rate_bound, directions);
    Ok((grid, rates))
}

fn oracle_error(e: OracleError) -> CliError {
    match e {
        OracleError::InvalidGrid(_) | OracleError::Capacity { .. } | OracleError::InvalidArgument(_) => {
            CliError::Config(e.to_string())
        }
        OracleError::NotConverged { .. } | OracleError::NonFinite(_) => {
            CliError::Divergence(e.to_string())
        }
        OracleError::Io(_) | OracleError::Format(_) => CliError::Artifact(e.to_string()),
    }
}

/// `solve-hjb`: writes `solution.json` (+ values file) and `convergence.csv`.
/// A non-converged solution is still written, flagged `converged=false`.
pub fn cmd_solve_hjb(common: &Common) -> Result<GridSolution, CliError> {
    let mut cfg = resolve_config(common)?;
    let env = EnvironmentSpec::from_config(&cfg)?;
    fill_env_defaults(&mut cfg, &env);
    for (k, v) in [
        ("mode", "infinite"),
        ("grid_points", "201"),
        ("grid_x_min", "-2"),
        ("grid_x_max", "2"),
        ("grid_u_min", "-2"),
        ("grid_u_max", "2"),
        ("tol", "1e-9"),
        ("max_iter", "1000000"),
        ("value_format", "csv"),
    ] {
        cfg.set_default(k, v);
    }
    let (grid, rates) = grid_from_config(&cfg, &env)?;
    grid.validate().map_err(oracle_error)?;
    let format = match cfg.get("value_format").unwrap_or("csv") {
        "csv" => ValueFormat::Csv,
        "f64le" => ValueFormat::F64Le,
        other => {
            return Err(CliError::Config(format!(
                "invalid value `{other}` for `value_format`: expected csv or f64le"
            )))
        }
    };
    let mode = cfg.get("mode").unwrap_or("infinite").to_string();
    let result = match mode.as_str() {
        "infinite" => {
            let delta = match cfg.parsed::<f64>("delta")? {
                Some(d) => d,
                None => hjb_oracle::default_delta(&env, &grid, &rates),
            };
            cfg.set_default("delta", delta.to_string());
            let control = IterationControl {
                tol: cfg.parsed_or("tol", 1e-9)?,
                max_iter: cfg.parsed_or("max_iter", 1_000_000)?,
            };
            hjb_oracle::solve_infinite(&env, &grid, delta, &rates, control)
        }
        "finite" => {
            let horizon: f64 = cfg.parsed_or("horizon", 1.0)?;
            let steps: usize = cfg.parsed_or("time_steps", 100)?;
            cfg.set_default("horizon", horizon.to_string());
            cfg.set_default("time_steps", steps.to_string());
            let terminal = parse_terminal(cfg.get("terminal").unwrap_or("zero"))?;
            cfg.set_default("terminal", "zero");
            let problem = FiniteHorizonProblem { env: env.clone(), terminal };
            hjb_oracle::solve_finite(&problem, &grid.clone().with_time(horizon, steps), &rates)
        }
        other => {
            return Err(CliError::Config(format!(
                "invalid value `{other}` for `mode`: expected infinite or finite"
            )))
        }
    };
    let (solution, failure) = match result {
        Ok(s) => (s, None),
        Err(OracleError::NotConverged { partial, iterations, last_update }) => (
            *partial,
            Some(CliError::Divergence(format!(
                "no convergence after {iterations} sweeps (last update {last_update:e})"
            ))),
        ),
        Err(e) => return Err(oracle_error(e)),
    };
    let mut run = Run::new("solve-hjb", cfg, &common.out_dir)?;
    let header = run.path("solution.json");
    solution.save(&header, format).map_err(oracle_error)?;
    run.path(match format {
        ValueFormat::Csv => "solution.values.csv",
        ValueFormat::F64Le => "solution.values.f64le",
    });
    let log = run.path("convergence.csv");
    let mut w = create(&log)?;
    writeln!(w, "iteration,sup_update")?;
    for (i, u) in solution.history.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, fmt_f64(*u))?;
    }
    w.flush()?;
    println!(
        "{} after {} sweeps (final update {:e})",
        if solution.meta.converged { "converged" } else { "not converged" },
        solution.meta.iterations,
        solution.meta.final_update
    );
    match failure {
        None => {
            run.finish("ok")?;
            Ok(solution)
        }
        Some(e) => {
            run.finish("not_converged")?;
            Err(e)
        }
    }
}

fn parse_terminal(s: &str) -> Result<TerminalCost, CliError> {
    match s {
        "zero" => Ok(TerminalCost::Zero),
        "quadratic" => Ok(TerminalCost::Quadratic),
        other => match other.strip_prefix("constant:") {
            Some(c) => c
                .parse::<f64>()
                .map(TerminalCost::Constant)
                .map_err(|e| CliError::Config(format!("terminal: {e}"))),
            None => Err(CliError::Config(format!(
                "invalid value `{other}` for `terminal`: expected zero, quadratic or constant:<c>"
            ))),
        },
    }
}

/// A learned Q-function as seen by `compare`.
pub trait QFunction {
    fn input_dim(&self) -> usize;
    fn value(&self, z: &[f64]) -> f64;
    /// Direction of the greedy control rate (any positive scaling).
    fn rate_direction(&self, z: &[f64]) -> Vec<f64>;
}

/// Network Q-function; the greedy direction is `-grad_u Q`.
pub struct LearnedQ<'a> {
    pub net: &'a QNetwork,
    pub n: usize,
    pub grad_zero_tol: f64,
}

impl QFunction for LearnedQ<'_> {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn value(&self, z: &[f64]) -> f64 {
        self.net.value(z)
    }

    fn rate_direction(&self, z: &[f64]) -> Vec<f64> {
        let (_, g) = self.net.value_and_input_gradient(z);
        let gu = &g[self.n..];
        let norm = gu.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > self.grad_zero_tol {
            gu.iter().map(|v| -v).collect()
        } else {
            vec![0.0; gu.len()]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub z: Vec<f64>,
    pub q_learned: f64,
    pub q_oracle: f64,
    pub policy_match: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub max_abs_err: f64,
    pub mean_abs_err: f64,
    /// Fraction of probes whose componentwise rate signs agree.
    pub policy_agreement: f64,
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Compares `learned` with the oracle on a `per_axis`-point tensor grid
/// over the central `inner` fraction of the oracle's grid box. A zero rate
/// on either side never counts as a match.
pub fn compare(
    learned: &dyn QFunction,
    oracle: &GridSolution,
    inner: f64,
    per_axis: usize,
) -> Result<CompareReport, CliError> {
    if learned.input_dim() != oracle.spec.dim() {
        return Err(CliError::Artifact(format!(
            "checkpoint input width {} does not match grid dimension {}",
            learned.input_dim(),
            oracle.spec.dim()
        )));
    }
    if !(inner > 0.0 && inner <= 1.0) {
        return Err(CliError::Config(format!("inner must lie in (0, 1], got {inner}")));
    }
    let rates = &oracle.meta.rates;
    let greedy = hjb_oracle::greedy_policy(oracle, rates).map_err(oracle_error)?;
    let probes = oracle.spec.inner_probes(inner, per_axis);
    let rows: Vec<CompareRow> = probes
        .into_iter()
        .map(|z| {
            let dl = learned.rate_direction(&z);
            let dor = greedy.rate(&z);
            let policy_match = dl
                .iter()
                .zip(dor)
                .all(|(a, b)| sign(*a) == sign(*b) && sign(*a) != 0)
                || (dl.len() > 1
                    && dl.iter().zip(dor).all(|(a, b)| sign(*a) == sign(*b))
                    && dor.iter().any(|v| *v != 0.0));
            CompareRow {
                q_learned: learned.value(&z),
                q_oracle: oracle.interpolate(&z),
                z,
                policy_match,
            }
        })
        .collect();
    let errs: Vec<f64> = rows.iter().map(|r| (r.q_learned - r.q_oracle).abs()).collect();
    let count = rows.len().max(1) as f64;
    Ok(CompareReport {
        max_abs_err: errs.iter().copied().fold(0.0, f64::max),
        mean_abs_err: errs.iter().sum::<f64>() / count,
        policy_agreement: rows.iter().filter(|r| r.policy_match).count() as f64 / count,
        rows,
    })
}

pub fn write_compare_csv<W: Write>(report: &CompareReport, n: usize, m: usize, mut w: W) -> std::io::Result<()> {
    let mut header: Vec<String> = (0..n).map(|i| format!("x_{i}")).collect();
    header.extend((0..m).map(|i| format!("u_{i}")));
    header.extend(["q_learned", "q_oracle", "abs_err", "policy_match"].map(String::from));
    writeln!(w, "{}", header.join(","))?;
    for r in &report.rows {
        let mut fields: Vec<String> = r.z.iter().map(|v| fmt_f64(*v)).collect();
        fields.push(fmt_f64(r.q_learned));
        fields.push(fmt_f64(r.q_oracle));
        fields.push(fmt_f64((r.q_learned - r.q_oracle).abs()));
        fields.push(u8::from(r.policy_match).to_string());
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

/// `compare`: writes `compare.csv` and prints the summary.
pub fn cmd_compare(
    common: &Common,
    checkpoint: &Path,
    solution: &Path,
    inner: Option<f64>,
) -> Result<CompareReport, CliError> {
    let mut cfg = resolve_config(common)?;
    if let Some(i) = inner {
        cfg.set("inner", i.to_string());
    }
    cfg.set_default("inner", "0.6");
    cfg.set_default("probes_per_axis", "21");
    cfg.set_default("grad_zero_tol", "1e-12");
    let inner: f64 = cfg.parsed_or("inner", 0.6)?;
    let per_axis: usize = cfg.parsed_or("probes_per_axis", 21)?;
    let tol: f64 = cfg.parsed_or("grad_zero_tol", 1e-12)?;
    let ck = Checkpoint::load(checkpoint)?;
    let sol = GridSolution::load(solution).map_err(oracle_error)?;
    let env = &sol.meta.env;
    let learned = LearnedQ {
        net: &ck.network,
        n: env.n,
        grad_zero_tol: tol,
    };
    let report = compare(&learned, &sol, inner, per_axis)?;
    let mut run = Run::new("compare", cfg, &common.out_dir)?;
    let path = run.path("compare.csv");
    let mut w = create(&path)?;
    write_compare_csv(&report, env.n, env.m, &mut w)?;
    w.flush()?;
    println!(
        "max_abs_err {} mean_abs_err {} policy_agreement {}",
        fmt_f64(report.max_abs_err),
        fmt_f64(report.mean_abs_err),
        fmt_f64(report.policy_agreement)
    );
    run.finish("ok")?;
    Ok(report)
}

/// Dispatches a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint).map(|_| ()),
        Command::SolveHjb(c) => cmd_solve_hjb(c).map(|_| ()),
        Command::Compare {
            common,
            checkpoint,
            solution,
            inner,
        } => cmd_compare(common, checkpoint, solution, *inner).map(|_| ()),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
