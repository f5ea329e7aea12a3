//! Fixed-step RK4 integration of the augmented system
//! `dx/dt = A x + B u`, `du/dt = a(x, u)` together with the discounted cost
//! accumulator `dc/dt = exp(-gamma t) r(x, u)`.
//!
//! The feedback law is queried at every RK4 stage, so a learned policy acts as
//! a genuine state feedback rather than being held constant over a substep.

use std::io::Write;

use thiserror::Error;

use crate::env::{AugmentedState, EnvError, EnvironmentSpec};
use crate::io::fmt_f64;

/// Integration aborts once `|z|` exceeds this bound.
pub const DIVERGENCE_BOUND: f64 = 1e6;
/// Slack allowed on `|a| <= M`.
pub const RATE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum OdeError {
    #[error("policy returned |a| = {norm} exceeding the rate bound {bound}")]
    RateBoundViolated { norm: f64, bound: f64 },
    #[error("trajectory diverged at integration step {step}")]
    Divergence { step: usize },
    #[error("invalid integrator setting: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// A feedback law `a = policy(z)` for the control rate, `z = [x; u]` flat.
pub trait Policy {
    fn control_rate(&mut self, z: &[f64], a: &mut [f64]);
}

impl<F: FnMut(&[f64], &mut [f64])> Policy for F {
    fn control_rate(&mut self, z: &[f64], a: &mut [f64]) {
        self(z, a)
    }
}

/// Policy that applies a fixed control rate everywhere.
#[derive(Clone, Debug)]
pub struct ConstantRate(pub Vec<f64>);

impl Policy for ConstantRate {
    fn control_rate(&mut self, _z: &[f64], a: &mut [f64]) {
        a.copy_from_slice(&self.0);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegratorConfig {
    /// RK4 steps per rollout horizon.
    pub substeps: usize,
    /// Rollout horizon.
    pub h: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            substeps: 5,
            h: 0.05,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<(), OdeError> {
        if self.substeps == 0 {
            return Err(OdeError::InvalidConfig("substeps must be >= 1".into()));
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(OdeError::InvalidConfig(format!("h must be > 0, got {}", self.h)));
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.h / self.substeps as f64
    }

    /// Substep count for a window of length `len` at (at most) this config's step size.
    fn substeps_for(&self, len: f64) -> usize {
        ((len / self.step_size()) - 1e-9).ceil().max(1.0) as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    /// `int_0^h exp(-gamma t) r(z(t)) dt`
    pub discounted_cost: f64,
    pub z_end: AugmentedState,
}

/// Integrator with preallocated stage buffers.
struct Rk4<'e> {
    env: &'e EnvironmentSpec,
    dim: usize,
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
    rate: Vec<f64>,
    steps_taken: usize,
}

impl<'e> Rk4<'e> {
    fn new(env: &'e EnvironmentSpec) -> Self {
        let dim = env.n + env.m + 1;
        Self {
            env,
            dim,
            k: std::array::from_fn(|_| vec![0.0; dim]),
            tmp: vec![0.0; dim],
            rate: vec![0.0; env.m],
            steps_taken: 0,
        }
    }

    /// Right-hand side at local time `t`; `s = [x; u; c]`.
    fn rhs(
        env: &EnvironmentSpec,
        rate: &mut [f64],
        policy: &mut dyn Policy,
        s: &[f64],
        t: f64,
        out: &mut [f64],
    ) -> Result<(), OdeError> {
        let (n, m) = (env.n, env.m);
        let z = &s[..n + m];
        env.dynamics_into(&z[..n], &z[n..], &mut out[..n]);
        policy.control_rate(z, rate);
        let norm = rate.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > env.rate_bound + RATE_TOLERANCE {
            return Err(OdeError::RateBoundViolated {
                norm,
                bound: env.rate_bound,
            });
        }
        out[n..n + m].copy_from_slice(rate);
        out[n + m] = (-env.gamma * t).exp() * env.cost_flat(z);
        Ok(())
    }

    /// Advances `s` by `steps` RK4 steps of size `dt` starting at local time 0.
    fn integrate(
        &mut self,
        s: &mut [f64],
        policy: &mut dyn Policy,
        dt: f64,
        steps: usize,
    ) -> Result<(), OdeError> {
        let env = self.env;
        let d = self.dim;
        for i in 0..steps {
            let t = i as f64 * dt;
            let [k1, k2, k3, k4] = &mut self.k;
            Self::rhs(env, &mut self.rate, policy, s, t, k1)?;
            for j in 0..d {
                self.tmp[j] = s[j] + 0.5 * dt * k1[j];
            }
            Self::rhs(env, &mut self.rate, policy, &self.tmp, t + 0.5 * dt, k2)?;
            for j in 0..d {
                self.tmp[j] = s[j] + 0.5 * dt * k2[j];
            }
            Self::rhs(env, &mut self.rate, policy, &self.tmp, t + 0.5 * dt, k3)?;
            for j in 0..d {
                self.tmp[j] = s[j] + dt * k3[j];
            }
            Self::rhs(env, &mut self.rate, policy, &self.tmp, t + dt, k4)?;
            for j in 0..d {
                s[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
            }
            let step = self.steps_taken;
            self.steps_taken += 1;
            let zn = s[..d - 1].iter().map(|v| v * v).sum::<f64>().sqrt();
            if !zn.is_finite() || zn > DIVERGENCE_BOUND || !s[d - 1].is_finite() {
                return Err(OdeError::Divergence { step });
            }
        }
        Ok(())
    }

    /// Integrates one window of length `len` from flat state `z`, returning
    /// the window's cost discounted from the window start.
    fn window(
        &mut self,
        z: &mut [f64],
        policy: &mut dyn Policy,
        len: f64,
        steps: usize,
    ) -> Result<f64, OdeError> {
        let d = self.dim;
        let mut s = vec![0.0; d];
        s[..d - 1].copy_from_slice(z);
        self.integrate(&mut s, policy, len / steps as f64, steps)?;
        z.copy_from_slice(&s[..d - 1]);
        Ok(s[d - 1])
    }
}

/// Rolls `z0` forward for `cfg.h` under `policy`.
pub fn rollout_step(
    env: &EnvironmentSpec,
    z0: &AugmentedState,
    policy: &mut dyn Policy,
    cfg: &IntegratorConfig,
) -> Result<RolloutResult, OdeError> {
    cfg.validate()?;
    env.check_state(z0)?;
    let mut z = z0.to_flat();
    let cost = Rk4::new(env).window(&mut z, policy, cfg.h, cfg.substeps)?;
    Ok(RolloutResult {
        discounted_cost: cost,
        z_end: AugmentedState::from_flat(&z, env.n),
    })
}

/// `int_0^T exp(-gamma t) r dt` along the closed loop, chaining windows of
/// length `cfg.h`; the last window is shortened to end exactly at `T`.
pub fn evaluate_policy(
    env: &EnvironmentSpec,
    z0: &AugmentedState,
    policy: &mut dyn Policy,
    t_eval: f64,
    cfg: &IntegratorConfig,
) -> Result<f64, OdeError> {
    cfg.validate()?;
    env.check_state(z0)?;
    if !(t_eval > 0.0) {
        return Err(OdeError::InvalidConfig(format!("T_eval must be > 0, got {t_eval}")));
    }
    let windows = ((t_eval / cfg.h) - 1e-9).ceil().max(1.0) as usize;
    let mut rk = Rk4::new(env);
    let mut z = z0.to_flat();
    let mut total = 0.0;
    for k in 0..windows {
        let start = k as f64 * cfg.h;
        let len = if k + 1 == windows { t_eval - start } else { cfg.h };
        let steps = if k + 1 == windows { cfg.substeps_for(len) } else { cfg.substeps };
        let cost = rk.window(&mut z, policy, len, steps)?;
        total += (-env.gamma * start).exp() * cost;
    }
    Ok(total)
}

/// One sample of a closed-loop trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledPoint {
    pub t: f64,
    /// Flat `[x; u]`.
    pub z: Vec<f64>,
    /// Control rate applied at `z`.
    pub a: Vec<f64>,
    /// `int_0^t exp(-gamma s) r ds` so far.
    pub cost: f64,
}

/// Closed-loop trajectory sampled every `sample_dt` on `[0, T]`. Between
/// samples the integrator uses the step size of `cfg` (rounded down to fit).
pub fn simulate_sampled(
    env: &EnvironmentSpec,
    z0: &AugmentedState,
    policy: &mut dyn Policy,
    t_eval: f64,
    cfg: &IntegratorConfig,
    sample_dt: f64,
) -> Result<Vec<SampledPoint>, OdeError> {
    cfg.validate()?;
    env.check_state(z0)?;
    if !(sample_dt > 0.0) {
        return Err(OdeError::InvalidConfig(format!("sample_dt must be > 0, got {sample_dt}")));
    }
    if !(t_eval >= 0.0) {
        return Err(OdeError::InvalidConfig(format!("T_eval must be >= 0, got {t_eval}")));
    }
    let intervals = (t_eval / sample_dt + 1e-9).floor() as usize;
    let steps = cfg.substeps_for(sample_dt);
    let mut rk = Rk4::new(env);
    let mut z = z0.to_flat();
    let mut cost = 0.0;
    let mut out = Vec::with_capacity(intervals + 1);
    for k in 0..=intervals {
        let t = k as f64 * sample_dt;
        let mut a = vec![0.0; env.m];
        policy.control_rate(&z, &mut a);
        out.push(SampledPoint {
            t,
            z: z.clone(),
            a,
            cost,
        });
        if k < intervals {
            let w = rk.window(&mut z, policy, sample_dt, steps)?;
            cost += (-env.gamma * t).exp() * w;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub a: Vec<f64>,
}

pub fn trajectory_record(
    env: &EnvironmentSpec,
    z0: &AugmentedState,
    policy: &mut dyn Policy,
    t_eval: f64,
    cfg: &IntegratorConfig,
    sample_dt: f64,
) -> Result<Vec<TrajectoryRow>, OdeError> {
    Ok(simulate_sampled(env, z0, policy, t_eval, cfg, sample_dt)?
        .into_iter()
        .map(|p| TrajectoryRow {
            t: p.t,
            x: p.z[..env.n].to_vec(),
            u: p.z[env.n..].to_vec(),
            a: p.a,
        })
        .collect())
}

/// Writes `t,x_0..,u_0..,a_0..` rows.
pub fn write_trajectory_csv<W: Write>(
    rows: &[TrajectoryRow],
    n: usize,
    m: usize,
    mut w: W,
) -> std::io::Result<()> {
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x_{i}")));
    header.extend((0..m).map(|i| format!("u_{i}")));
    header.extend((0..m).map(|i| format!("a_{i}")));
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        let fields: Vec<String> = std::iter::once(r.t)
            .chain(r.x.iter().copied())
            .chain(r.u.iter().copied())
            .chain(r.a.iter().copied())
            .map(fmt_f64)
            .collect();
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{CostKind, Matrix};

    fn static_env() -> EnvironmentSpec {
        EnvironmentSpec::linear(Matrix::zeros(1, 1), Matrix::zeros(1, 1), 0.1, 1.0).unwrap()
    }

    fn z11() -> AugmentedState {
        AugmentedState::new(vec![1.0], vec![1.0])
    }

    fn zero_rate() -> ConstantRate {
        ConstantRate(vec![0.0])
    }

    #[test]
    fn constant_integrand_rollout() {
        let env = static_env();
        let cfg = IntegratorConfig::default();
        let res = rollout_step(&env, &z11(), &mut zero_rate(), &cfg).unwrap();
        let expected = 2.0 * (1.0 - (-0.005f64).exp()) / 0.1;
        assert!((res.discounted_cost - expected).abs() < 1e-14);
        assert!((expected - 0.0997504).abs() < 1e-7);
        assert_eq!(res.z_end, z11());
    }

    #[test]
    fn zero_cost_rollout() {
        let env = EnvironmentSpec::lqr1d().with_cost(CostKind::Zero);
        let mut p = ConstantRate(vec![1.0]);
        let res = rollout_step(&env, &z11(), &mut p, &IntegratorConfig::default()).unwrap();
        assert_eq!(res.discounted_cost, 0.0);
        let total = evaluate_policy(&env, &z11(), &mut p, 3.0, &IntegratorConfig::default()).unwrap();
        assert_eq!(total, 0.0);
    }

    #[test]
    fn constant_control_moves_state_linearly() {
        let env = EnvironmentSpec::lqr1d();
        let z0 = AugmentedState::new(vec![0.0], vec![1.0]);
        let res = rollout_step(&env, &z0, &mut zero_rate(), &IntegratorConfig::default()).unwrap();
        assert!((res.z_end.x[0] - 0.05).abs() < 1e-15);
        assert_eq!(res.z_end.u[0], 1.0);
    }

    #[test]
    fn evaluate_constant_integrand() {
        let env = static_env();
        let cost = evaluate_policy(&env, &z11(), &mut zero_rate(), 10.0, &IntegratorConfig::default())
            .unwrap();
        let expected = 2.0 * (1.0 - (-1.0f64).exp()) / 0.1;
        assert!((cost - expected).abs() < 1e-10, "{cost} vs {expected}");
        assert!((expected - 12.642411).abs() < 1e-6);
    }

    #[test]
    fn partial_last_window() {
        let env = static_env();
        let cfg = IntegratorConfig::default();
        let cost = evaluate_policy(&env, &z11(), &mut zero_rate(), 0.123, &cfg).unwrap();
        let expected = 2.0 * (1.0 - (-0.0123f64).exp()) / 0.1;
        assert!((cost - expected).abs() < 1e-12);
    }

    #[test]
    fn rate_bound_violation_is_an_error() {
        let env = EnvironmentSpec::lqr1d();
        let mut p = ConstantRate(vec![1.5]);
        let err = rollout_step(&env, &z11(), &mut p, &IntegratorConfig::default()).unwrap_err();
        assert!(matches!(err, OdeError::RateBoundViolated { .. }));
        // within tolerance is fine
        let mut p = ConstantRate(vec![1.0 + 1e-10]);
        assert!(rollout_step(&env, &z11(), &mut p, &IntegratorConfig::default()).is_ok());
    }

    #[test]
    fn divergence_reports_step() {
        let env = EnvironmentSpec::linear(Matrix::scaled_identity(1, 50.0), Matrix::zeros(1, 1), 0.1, 1.0)
            .unwrap();
        let err = evaluate_policy(&env, &z11(), &mut zero_rate(), 10.0, &IntegratorConfig::default())
            .unwrap_err();
        match err {
            OdeError::Divergence { step } => assert!(step > 0 && step < 2000),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_configs() {
        let env = EnvironmentSpec::lqr1d();
        let bad = IntegratorConfig { substeps: 0, h: 0.05 };
        assert!(rollout_step(&env, &z11(), &mut zero_rate(), &bad).is_err());
        let bad = IntegratorConfig { substeps: 5, h: 0.0 };
        assert!(rollout_step(&env, &z11(), &mut zero_rate(), &bad).is_err());
        let good = IntegratorConfig::default();
        assert!(evaluate_policy(&env, &z11(), &mut zero_rate(), 0.0, &good).is_err());
        assert!(trajectory_record(&env, &z11(), &mut zero_rate(), 1.0, &good, 0.0).is_err());
        let wrong_dims = AugmentedState::new(vec![1.0, 2.0], vec![1.0]);
        assert!(matches!(
            rollout_step(&env, &wrong_dims, &mut zero_rate(), &good),
            Err(OdeError::Env(_))
        ));
    }

    #[test]
    fn trajectory_sampling() {
        let env = EnvironmentSpec::lqr1d();
        let cfg = IntegratorConfig::default();
        let rows = trajectory_record(&env, &z11(), &mut zero_rate(), 10.0, &cfg, 0.05).unwrap();
        assert_eq!(rows.len(), 201);
        assert_eq!(rows[0].t, 0.0);
        assert!((rows[200].t - 10.0).abs() < 1e-12);
        assert!(rows.iter().all(|r| r.u[0] == 1.0));
        // x = 1 + t for u = 1
        assert!((rows[200].x[0] - 11.0).abs() < 1e-9);
    }

    #[test]
    fn csv_has_header_and_round_trip_precision() {
        let rows = vec![TrajectoryRow {
            t: 0.1,
            x: vec![1.0 / 3.0],
            u: vec![-2.0],
            a: vec![1.0],
        }];
        let mut buf = Vec::new();
        write_trajectory_csv(&rows, 1, 1, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,x_0,u_0,a_0"));
        let vals: Vec<f64> = lines
            .next()
            .unwrap()
            .split(',')
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(vals, vec![0.1, 1.0 / 3.0, -2.0, 1.0]);
    }
}
