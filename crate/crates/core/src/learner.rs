//! Continuous-time Q-learning.
//!
//! Each iteration draws `K` augmented states uniformly from the sampling box,
//! rolls every one of them forward for `h` under the greedy rate
//!
//! ```text
//! a_theta(z) = -M grad_u Q_theta(z) / |grad_u Q_theta(z)|
//! ```
//!
//! and fits `Q_theta` to the targets `y = R + e^{-gamma h} Q_target(z(h))`
//! with one Adam step, followed by a soft update of the target network.
//! When `grad_u Q_theta` vanishes the rate is a random vector of length `M`.

use std::io::Write;

use thiserror::Error;

use crate::config::{ConfigError, FlatConfig};
use crate::env::{AugmentedState, EnvironmentSpec};
use crate::io::fmt_f64;
use crate::odeint::{self, IntegratorConfig, OdeError, Policy};
use crate::qnet::{self, AdamState, InitScheme, QNetError, QNetwork, TargetParams, DEFAULT_HIDDEN};
use crate::rng::{streams, RngState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at iteration {iteration}: {source}")]
    Network {
        iteration: usize,
        #[source]
        source: QNetError,
    },
    #[error("rollout diverged at iteration {iteration}: {source}")]
    Rollout {
        iteration: usize,
        #[source]
        source: OdeError,
    },
}

impl TrainError {
    pub fn iteration(&self) -> Option<usize> {
        match self {
            TrainError::InvalidConfig(_) => None,
            TrainError::Network { iteration, .. } | TrainError::Rollout { iteration, .. } => {
                Some(*iteration)
            }
        }
    }
}

/// When the rollout policy is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyHold {
    /// State feedback: the rate is recomputed at every integrator stage.
    Feedback,
    /// The rate computed at the sample point is held for the whole rollout.
    IterationStart,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Iteration count `N`.
    pub iterations: usize,
    /// Samples per iteration `K`.
    pub batch: usize,
    /// Rollout horizon.
    pub h: f64,
    pub tau: f64,
    pub learning_rate: f64,
    /// `|grad_u Q|` at or below this counts as zero.
    pub grad_zero_tol: f64,
    /// RK4 steps per rollout.
    pub substeps: usize,
    pub seed: u64,
    /// Iterations between learning-curve rows; 0 records only the first and last.
    pub eval_every: usize,
    pub eval_t: f64,
    /// Fixed evaluation start; drawn from the seed when `None`.
    pub eval_start: Option<AugmentedState>,
    pub hidden: Vec<usize>,
    pub init: InitScheme,
    pub policy_hold: PolicyHold,
    /// Points in the Bellman-residual probe set.
    pub probe_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            batch: 10,
            h: 0.05,
            tau: 0.01,
            learning_rate: 1e-3,
            grad_zero_tol: 1e-12,
            substeps: 5,
            seed: 0,
            eval_every: 50,
            eval_t: 10.0,
            eval_start: None,
            hidden: DEFAULT_HIDDEN.to_vec(),
            init: InitScheme::FanInUniform,
            policy_hold: PolicyHold::Feedback,
            probe_count: 32,
        }
    }
}

impl TrainConfig {
    pub const CONFIG_KEYS: &'static [&'static str] = &[
        "N",
        "K",
        "h",
        "tau",
        "lr",
        "grad_zero_tol",
        "substeps",
        "seed",
        "eval_every",
        "eval_T",
        "eval_x",
        "eval_u",
        "hidden",
        "init",
        "policy_hold",
        "probe_count",
    ];

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |s: &str| Err(TrainError::InvalidConfig(s.to_string()));
        if self.batch == 0 {
            return bad("K must be >= 1");
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return bad("h must be > 0");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if !(self.grad_zero_tol > 0.0) {
            return bad("grad_zero_tol must be > 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("lr must be > 0");
        }
        if self.substeps == 0 {
            return bad("substeps must be >= 1");
        }
        if !(self.eval_t > 0.0 && self.eval_t.is_finite()) {
            return bad("eval_T must be > 0");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig {
            substeps: self.substeps,
            h: self.h,
        }
    }

    pub fn from_config(cfg: &FlatConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let hidden = match cfg.get("hidden") {
            None => d.hidden.clone(),
            Some(raw) => raw
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|e| ConfigError::invalid("hidden", raw, e.to_string()))
                })
                .collect::<Result<_, _>>()?,
        };
        let policy_hold = match cfg.get("policy_hold").unwrap_or("feedback") {
            "feedback" => PolicyHold::Feedback,
            "iteration_start" => PolicyHold::IterationStart,
            other => {
                return Err(ConfigError::invalid(
                    "policy_hold",
                    other,
                    "expected feedback or iteration_start",
                ))
            }
        };
        let init = match cfg.get("init").unwrap_or("fan_in_uniform") {
            "fan_in_uniform" => InitScheme::FanInUniform,
            "he_uniform" => InitScheme::HeUniform,
            other => {
                return Err(ConfigError::invalid(
                    "init",
                    other,
                    "expected fan_in_uniform or he_uniform",
                ))
            }
        };
        let eval_start = match (cfg.float_list("eval_x")?, cfg.float_list("eval_u")?) {
            (Some(x), Some(u)) => Some(AugmentedState::new(x, u)),
            (None, None) => None,
            _ => return Err(ConfigError::invalid("eval_x", "", "eval_x and eval_u go together")),
        };
        let out = Self {
            iterations: cfg.parsed_or("N", d.iterations)?,
            batch: cfg.parsed_or("K", d.batch)?,
            h: cfg.parsed_or("h", d.h)?,
            tau: cfg.parsed_or("tau", d.tau)?,
            learning_rate: cfg.parsed_or("lr", d.learning_rate)?,
            grad_zero_tol: cfg.parsed_or("grad_zero_tol", d.grad_zero_tol)?,
            substeps: cfg.parsed_or("substeps", d.substeps)?,
            seed: cfg.parsed_or("seed", d.seed)?,
            eval_every: cfg.parsed_or("eval_every", d.eval_every)?,
            eval_t: cfg.parsed_or("eval_T", d.eval_t)?,
            eval_start,
            hidden,
            init,
            policy_hold,
            probe_count: cfg.parsed_or("probe_count", d.probe_count)?,
        };
        out.validate()
            .map_err(|e| ConfigError::invalid("training", "", e.to_string()))?;
        Ok(out)
    }
}

/// Rate of norm `M` opposing `grad_u`, or `M` times a random unit vector
/// when `|grad_u| <= grad_zero_tol`.
pub fn policy_direction(grad_u: &[f64], rate_bound: f64, grad_zero_tol: f64, rng: &mut RngState) -> Vec<f64> {
    let mut out = vec![0.0; grad_u.len()];
    policy_direction_into(grad_u, rate_bound, grad_zero_tol, rng, &mut out);
    out
}

fn policy_direction_into(
    grad_u: &[f64],
    rate_bound: f64,
    grad_zero_tol: f64,
    rng: &mut RngState,
    out: &mut [f64],
) {
    let norm = grad_u.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > grad_zero_tol {
        for (o, g) in out.iter_mut().zip(grad_u) {
            *o = -rate_bound * g / norm;
        }
    } else {
        for (o, d) in out.iter_mut().zip(rng.unit_vector(grad_u.len())) {
            *o = rate_bound * d;
        }
    }
}

/// `R + e^{-gamma h} Q_target(z_end)`.
pub fn build_target(
    reward: f64,
    z_end: &AugmentedState,
    target: &TargetParams,
    gamma: f64,
    h: f64,
) -> Result<f64, QNetError> {
    let q = target.forward(z_end)?;
    let y = reward + (-gamma * h).exp() * q;
    if !y.is_finite() {
        return Err(QNetError::TrainingDivergence(format!("non-finite target {y}")));
    }
    Ok(y)
}

/// Greedy feedback `a_theta` of a network, with its own tie-breaking stream.
pub struct GreedyPolicy<'a> {
    net: &'a QNetwork,
    n: usize,
    rate_bound: f64,
    grad_zero_tol: f64,
    rng: RngState,
}

impl<'a> GreedyPolicy<'a> {
    pub fn new(net: &'a QNetwork, env: &EnvironmentSpec, grad_zero_tol: f64, rng: RngState) -> Self {
        Self {
            net,
            n: env.n,
            rate_bound: env.rate_bound,
            grad_zero_tol,
            rng,
        }
    }
}

impl Policy for GreedyPolicy<'_> {
    fn control_rate(&mut self, z: &[f64], a: &mut [f64]) {
        let (_, grad) = self.net.value_and_input_gradient(z);
        policy_direction_into(&grad[self.n..], self.rate_bound, self.grad_zero_tol, &mut self.rng, a);
    }
}

/// Rate computed once at the first query and held afterwards.
struct HeldPolicy<P> {
    inner: P,
    held: Option<Vec<f64>>,
}

impl<P: Policy> Policy for HeldPolicy<P> {
    fn control_rate(&mut self, z: &[f64], a: &mut [f64]) {
        if self.held.is_none() {
            let mut first = vec![0.0; a.len()];
            self.inner.control_rate(z, &mut first);
            self.held = Some(first);
        }
        a.copy_from_slice(self.held.as_deref().expect("set above"));
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub iteration: usize,
    /// Training loss of this iteration (NaN before the first step).
    pub loss: f64,
    /// Discounted cost from the evaluation start; `inf` if the rollout diverged.
    pub eval_cost: f64,
    pub bellman_residual: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LearningCurve {
    pub rows: Vec<CurveRow>,
}

impl LearningCurve {
    pub const HEADER: &'static str = "iter,loss,eval_cost,bellman_residual";

    pub fn first(&self) -> Option<&CurveRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&CurveRow> {
        self.rows.last()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{}",
                r.iteration,
                fmt_f64(r.loss),
                fmt_f64(r.eval_cost),
                fmt_f64(r.bellman_residual)
            )?;
        }
        Ok(())
    }
}

/// Mean over `probes` of `|Q(z0) - (cost + e^{-gamma t} Q(z(t)))|` along the
/// network's own greedy policy, `t = t_span`.
pub fn bellman_residual(
    net: &QNetwork,
    env: &EnvironmentSpec,
    probes: &[AugmentedState],
    t_span: f64,
    cfg: &IntegratorConfig,
    grad_zero_tol: f64,
    rng: RngState,
) -> Result<f64, OdeError> {
    if probes.is_empty() {
        return Err(OdeError::InvalidConfig("empty probe set".into()));
    }
    let span_cfg = IntegratorConfig {
        h: t_span,
        substeps: ((t_span / cfg.step_size()) - 1e-9).ceil().max(1.0) as usize,
    };
    let mut policy = GreedyPolicy::new(net, env, grad_zero_tol, rng);
    let discount = (-env.gamma * t_span).exp();
    let mut total = 0.0;
    for z0 in probes {
        let roll = odeint::rollout_step(env, z0, &mut policy, &span_cfg)?;
        let lhs = net.value(&z0.to_flat());
        let rhs = roll.discounted_cost + discount * net.value(&roll.z_end.to_flat());
        total += (lhs - rhs).abs();
    }
    Ok(total / probes.len() as f64)
}

/// Samples of `g(s) = int_0^s e^{-gamma t} r dt + e^{-gamma s} Q(z(s))` along
/// the closed loop. `g` is non-decreasing for any admissible rate and
/// constant along optimal trajectories when `Q` is the true Q-function.
pub fn optimality_monitor(
    q_eval: &dyn Fn(&[f64]) -> f64,
    env: &EnvironmentSpec,
    z0: &AugmentedState,
    policy: &mut dyn Policy,
    t_eval: f64,
    cfg: &IntegratorConfig,
    sample_dt: f64,
) -> Result<Vec<(f64, f64)>, OdeError> {
    Ok(odeint::simulate_sampled(env, z0, policy, t_eval, cfg, sample_dt)?
        .into_iter()
        .map(|p| (p.t, p.cost + (-env.gamma * p.t).exp() * q_eval(&p.z)))
        .collect())
}

/// Evaluation start: `(1, 1)` for the scalar problem, otherwise drawn from
/// `[0, 0.1]^{n+m}` on the seed's evaluation stream.
pub fn default_eval_start(env: &EnvironmentSpec, seed: u64) -> AugmentedState {
    if env.n == 1 && env.m == 1 {
        return AugmentedState::new(vec![1.0], vec![1.0]);
    }
    let mut rng = RngState::stream(seed, streams::EVAL_START);
    let x = (0..env.n).map(|_| rng.uniform_in(0.0, 0.1)).collect();
    let u = (0..env.m).map(|_| rng.uniform_in(0.0, 0.1)).collect();
    AugmentedState::new(x, u)
}

/// Discounted cost over `[0, T]` of the greedy policy of `net` from `z0`.
pub fn greedy_cost(
    net: &QNetwork,
    env: &EnvironmentSpec,
    z0: &AugmentedState,
    t_eval: f64,
    cfg: &IntegratorConfig,
    grad_zero_tol: f64,
    seed: u64,
) -> Result<f64, OdeError> {
    let mut policy = GreedyPolicy::new(net, env, grad_zero_tol, RngState::stream(seed, streams::EVAL_TIES));
    odeint::evaluate_policy(env, z0, &mut policy, t_eval, cfg)
}

/// Training state of the Q-learner, advanced one iteration at a time.
pub struct Trainer {
    pub env: EnvironmentSpec,
    pub cfg: TrainConfig,
    pub network: QNetwork,
    pub target: TargetParams,
    pub adam: AdamState,
    /// Completed iterations.
    pub iteration: usize,
    pub eval_start: AugmentedState,
    probes: Vec<AugmentedState>,
    samples: RngState,
    ties: RngState,
    last_loss: f64,
}

impl Trainer {
    pub fn new(env: &EnvironmentSpec, cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        env.validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        let eval_start = cfg
            .eval_start
            .clone()
            .unwrap_or_else(|| default_eval_start(env, cfg.seed));
        env.check_state(&eval_start)
            .map_err(|e| TrainError::InvalidConfig(format!("eval start: {e}")))?;
        let (network, target, adam) =
            qnet::init_params_scheme(env.n + env.m, &cfg.hidden, cfg.init, cfg.seed, cfg.learning_rate);
        let mut probe_rng = RngState::stream(cfg.seed, streams::PROBES);
        let probes = env
            .sample_domain(cfg.probe_count, &mut probe_rng)
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(Self {
            env: env.clone(),
            cfg: cfg.clone(),
            network,
            target,
            adam,
            iteration: 0,
            eval_start,
            probes,
            samples: RngState::stream(cfg.seed, streams::DOMAIN_SAMPLES),
            ties: RngState::stream(cfg.seed, streams::POLICY_TIES),
            last_loss: f64::NAN,
        })
    }

    /// Rolls out one batch and returns `(z_i, y_i)` pairs.
    pub fn build_batch(&mut self) -> Result<Vec<(Vec<f64>, f64)>, TrainError> {
        let iteration = self.iteration;
        let integ = self.cfg.integrator();
        let starts = self
            .env
            .sample_domain(self.cfg.batch, &mut self.samples)
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        let mut batch = Vec::with_capacity(starts.len());
        for z0 in starts {
            let greedy = GreedyPolicy::new(
                &self.network,
                &self.env,
                self.cfg.grad_zero_tol,
                self.ties.clone(),
            );
            let (roll, ties) = match self.cfg.policy_hold {
                PolicyHold::Feedback => {
                    let mut p = greedy;
                    let r = odeint::rollout_step(&self.env, &z0, &mut p, &integ);
                    (r, p.rng)
                }
                PolicyHold::IterationStart => {
                    let mut p = HeldPolicy { inner: greedy, held: None };
                    let r = odeint::rollout_step(&self.env, &z0, &mut p, &integ);
                    (r, p.inner.rng)
                }
            };
            self.ties = ties;
            let roll = roll.map_err(|source| TrainError::Rollout { iteration, source })?;
            let y = build_target(
                roll.discounted_cost,
                &roll.z_end,
                &self.target,
                self.env.gamma,
                self.cfg.h,
            )
            .map_err(|source| TrainError::Network { iteration, source })?;
            batch.push((z0.to_flat(), y));
        }
        Ok(batch)
    }

    /// One training iteration. With `optimize = false` the Adam step
    /// is skipped (the loss is still computed) and only the target moves.
    pub fn iteration(&mut self, optimize: bool) -> Result<f64, TrainError> {
        let iteration = self.iteration;
        let net_err = |source| TrainError::Network { iteration, source };
        let batch = self.build_batch()?;
        let loss = if optimize {
            qnet::mse_train_step(&mut self.network, &mut self.adam, &batch).map_err(net_err)?
        } else {
            self.network.mse_loss(&batch).map_err(net_err)?
        };
        qnet::soft_update(&self.network, &mut self.target, self.cfg.tau).map_err(net_err)?;
        self.iteration += 1;
        self.last_loss = loss;
        Ok(loss)
    }

    /// Greedy cost from the evaluation start over `eval_T`; `inf` on divergence.
    pub fn eval_cost(&self) -> f64 {
        greedy_cost(
            &self.network,
            &self.env,
            &self.eval_start,
            self.cfg.eval_t,
            &self.cfg.integrator(),
            self.cfg.grad_zero_tol,
            self.cfg.seed,
        )
        .unwrap_or(f64::INFINITY)
    }

    /// Bellman residual over the run's probe set with `t_span = h`; `inf` on divergence.
    pub fn bellman_residual(&self) -> f64 {
        bellman_residual(
            &self.network,
            &self.env,
            &self.probes,
            self.cfg.h,
            &self.cfg.integrator(),
            self.cfg.grad_zero_tol,
            RngState::stream(self.cfg.seed, streams::EVAL_TIES),
        )
        .unwrap_or(f64::INFINITY)
    }

    pub fn curve_row(&self) -> CurveRow {
        CurveRow {
            iteration: self.iteration,
            loss: if self.iteration == 0 { f64::NAN } else { self.last_loss },
            eval_cost: self.eval_cost(),
            bellman_residual: self.bellman_residual(),
        }
    }

    fn wants_row(&self) -> bool {
        self.iteration == self.cfg.iterations
            || (self.cfg.eval_every > 0 && self.iteration % self.cfg.eval_every == 0)
    }

    /// Runs the remaining iterations. `after_iteration` is called after each
    /// one (e.g. to write periodic checkpoints). On error `self` holds the
    /// state reached so far and `curve` the rows recorded up to then.
    pub fn run(
        &mut self,
        curve: &mut LearningCurve,
        after_iteration: &mut dyn FnMut(&Trainer),
    ) -> Result<(), TrainError> {
        if self.iteration == 0 && curve.rows.is_empty() {
            curve.rows.push(self.curve_row());
        }
        while self.iteration < self.cfg.iterations {
            self.iteration(true)?;
            if self.wants_row() {
                let row = self.curve_row();
                log::debug!(
                    "iter {} loss {:.4e} eval_cost {:.6}",
                    row.iteration,
                    row.loss,
                    row.eval_cost
                );
                curve.rows.push(row);
            }
            after_iteration(self);
        }
        Ok(())
    }
}

/// Trains from scratch and returns the final network with its learning curve.
pub fn train(env: &EnvironmentSpec, cfg: &TrainConfig) -> Result<(QNetwork, LearningCurve), TrainError> {
    let mut trainer = Trainer::new(env, cfg)?;
    let mut curve = LearningCurve::default();
    trainer.run(&mut curve, &mut |_| {})?;
    Ok((trainer.network, curve))
}
