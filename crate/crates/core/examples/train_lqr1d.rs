//! Q-learning on the scalar integrator `dx/dt = u`, `|du/dt| <= 1`.
//!
//! Prints the learning curve and the greedy trajectory from `(1, 1)`.
//!
//!     cargo run --release --example train_lqr1d -- [seed] [iterations]

use ctql::learner::{GreedyPolicy, LearningCurve, TrainConfig, Trainer};
use ctql::odeint;
use ctql::rng::{streams, RngState};
use ctql::EnvironmentSpec;

fn main() {
    let mut args = std::env::args().skip(1);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let iterations = args.next().and_then(|s| s.parse().ok()).unwrap_or(1000);

    let env = EnvironmentSpec::lqr1d();
    let cfg = TrainConfig {
        seed,
        iterations,
        eval_every: 100,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&env, &cfg).expect("valid config");
    let mut curve = LearningCurve::default();
    trainer.run(&mut curve, &mut |_| {}).expect("training");

    println!("{:>6} {:>12} {:>12} {:>12}", "iter", "loss", "eval_cost", "residual");
    for r in &curve.rows {
        println!(
            "{:>6} {:>12.4e} {:>12.4} {:>12.4e}",
            r.iteration, r.loss, r.eval_cost, r.bellman_residual
        );
    }

    let mut policy = GreedyPolicy::new(
        &trainer.network,
        &env,
        cfg.grad_zero_tol,
        RngState::stream(seed, streams::EVAL_TIES),
    );
    let rows = odeint::trajectory_record(
        &env,
        &trainer.eval_start,
        &mut policy,
        cfg.eval_t,
        &cfg.integrator(),
        1.0,
    )
    .expect("rollout");
    println!("\n{:>5} {:>9} {:>9} {:>6}", "t", "x", "u", "a");
    for r in rows {
        println!("{:>5.1} {:>9.4} {:>9.4} {:>6.2}", r.t, r.x[0], r.u[0], r.a[0]);
    }
}
