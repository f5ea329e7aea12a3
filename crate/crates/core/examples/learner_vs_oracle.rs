//! Trains on the scalar problem and compares the learned Q-function and its
//! greedy direction with the grid reference over the central 60% of the box.
//!
//!     cargo run --release --example learner_vs_oracle -- [seed]

use ctql::cli::{compare, LearnedQ};
use ctql::hjb_oracle::{self, ControlRateSet, GridSpec, IterationControl};
use ctql::learner::{LearningCurve, TrainConfig, Trainer};
use ctql::EnvironmentSpec;

fn main() {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let env = EnvironmentSpec::lqr1d();
    let cfg = TrainConfig {
        seed,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&env, &cfg).expect("valid config");
    let untrained = trainer.network.clone();
    trainer
        .run(&mut LearningCurve::default(), &mut |_| {})
        .expect("training");

    let grid = GridSpec::uniform(1, 1, (-2.0, 2.0), (-2.0, 2.0), 101);
    let rates = ControlRateSet::standard(1, env.rate_bound, hjb_oracle::DEFAULT_DIRECTIONS);
    let delta = hjb_oracle::default_delta(&env, &grid, &rates);
    let sol = hjb_oracle::solve_infinite(&env, &grid, delta, &rates, IterationControl::default())
        .expect("converges");

    for (name, net) in [("untrained", &untrained), ("trained", &trainer.network)] {
        let learned = LearnedQ {
            net,
            n: env.n,
            grad_zero_tol: cfg.grad_zero_tol,
        };
        let r = compare(&learned, &sol, 0.6, 21).expect("dimensions match");
        println!(
            "{name:>9}: max |dQ| {:.3}, mean |dQ| {:.3}, sign agreement {:.1}%",
            r.max_abs_err,
            r.mean_abs_err,
            100.0 * r.policy_agreement
        );
    }
}
