//! Training-level properties of the Q-learner.

use ctql::cli::{compare, QFunction};
use ctql::env::CostKind;
use ctql::hjb_oracle::{self, ControlRateSet, GridSolution, GridSpec, IterationControl};
use ctql::learner::{self, LearningCurve, TrainConfig, Trainer};
use ctql::odeint::IntegratorConfig;
use ctql::rng::{streams, RngState};
use ctql::EnvironmentSpec;

#[test]
fn zero_cost_values_shrink_toward_zero() {
    let mut env = EnvironmentSpec::lqr1d().with_cost(CostKind::Zero);
    env.gamma = 2.0;
    let cfg = TrainConfig {
        iterations: 0,
        hidden: vec![32, 32],
        tau: 0.2,
        eval_every: 0,
        eval_t: 0.1,
        probe_count: 1,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&env, &cfg).unwrap();
    let probes = env
        .sample_domain(100, &mut RngState::stream(99, streams::PROBES))
        .unwrap();
    let sup = |t: &Trainer| {
        probes
            .iter()
            .map(|z| t.network.value(&z.to_flat()).abs())
            .fold(0.0, f64::max)
    };
    let mut history = vec![sup(&trainer)];
    for _ in 0..4 {
        for _ in 0..150 {
            trainer.iteration(true).unwrap();
        }
        history.push(sup(&trainer));
    }
    // single Adam steps are noisy, so check the trend rather than each step
    assert!(history[1..].iter().all(|v| *v < 0.5 * history[0]), "{history:?}");
    assert!(history[4] < 0.25 * history[0], "{history:?}");
}

#[test]
fn trained_model_has_smaller_bellman_residual() {
    let env = EnvironmentSpec::lqr1d();
    let cfg = TrainConfig {
        eval_every: 0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&env, &cfg).unwrap();
    let before = trainer.bellman_residual();
    let mut curve = LearningCurve::default();
    trainer.run(&mut curve, &mut |_| {}).unwrap();
    let after = trainer.bellman_residual();
    assert!(after < before, "{after} vs {before}");
    assert!(curve.last().unwrap().eval_cost < curve.first().unwrap().eval_cost);
}

#[test]
fn greedy_cost_matches_curve_row() {
    let env = EnvironmentSpec::lqr1d();
    let cfg = TrainConfig {
        iterations: 4,
        hidden: vec![8, 8],
        eval_every: 2,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&env, &cfg).unwrap();
    let mut curve = LearningCurve::default();
    trainer.run(&mut curve, &mut |_| {}).unwrap();
    let direct = learner::greedy_cost(
        &trainer.network,
        &env,
        &trainer.eval_start,
        cfg.eval_t,
        &IntegratorConfig::default(),
        cfg.grad_zero_tol,
        cfg.seed,
    )
    .unwrap();
    assert_eq!(curve.last().unwrap().eval_cost, direct);
}

/// The oracle itself, seen through the learned-Q interface.
struct OracleDouble<'a>(&'a GridSolution);

impl QFunction for OracleDouble<'_> {
    fn input_dim(&self) -> usize {
        self.0.spec.dim()
    }

    fn value(&self, z: &[f64]) -> f64 {
        self.0.interpolate(z)
    }

    fn rate_direction(&self, z: &[f64]) -> Vec<f64> {
        let greedy = hjb_oracle::greedy_policy(self.0, &self.0.meta.rates).unwrap();
        greedy.rate(z).to_vec()
    }
}

#[test]
fn comparing_the_oracle_with_itself() {
    let env = EnvironmentSpec::lqr1d();
    let grid = GridSpec::uniform(1, 1, (-2.0, 2.0), (-2.0, 2.0), 41);
    let rates = ControlRateSet::standard(1, 1.0, hjb_oracle::DEFAULT_DIRECTIONS);
    let delta = hjb_oracle::default_delta(&env, &grid, &rates);
    let sol = hjb_oracle::solve_infinite(&env, &grid, delta, &rates, IterationControl::default())
        .unwrap();
    let report = compare(&OracleDouble(&sol), &sol, 0.6, 15).unwrap();
    assert_eq!(report.max_abs_err, 0.0);
    assert_eq!(report.mean_abs_err, 0.0);
    let zero_rate = report
        .rows
        .iter()
        .filter(|r| hjb_oracle::greedy_policy(&sol, &rates).unwrap().rate(&r.z)[0] == 0.0)
        .count();
    let expected = (report.rows.len() - zero_rate) as f64 / report.rows.len() as f64;
    assert_eq!(report.policy_agreement, expected);
}
