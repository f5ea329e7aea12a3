//! Q-learning on a random `n = m = 10` (or 20) LQR instance with
//! `A_ij = 0.1 U[0,1]`, `B_ij = 5 U[0,1]`.
//!
//!     cargo run --release --example high_dim_lqr -- [dim] [seed] [iterations]

use ctql::learner::{LearningCurve, TrainConfig, Trainer};
use ctql::EnvironmentSpec;

fn main() {
    let mut args = std::env::args().skip(1);
    let dim = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let iterations = args.next().and_then(|s| s.parse().ok()).unwrap_or(1000);

    let env = EnvironmentSpec::random_lqr(dim, dim, seed).expect("valid dimensions");
    let cfg = TrainConfig {
        seed,
        iterations,
        eval_every: 100,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&env, &cfg).expect("valid config");
    let mut curve = LearningCurve::default();
    trainer.run(&mut curve, &mut |_| {}).expect("training");
    println!("n = m = {dim}, seed {seed}");
    for r in &curve.rows {
        println!("{:>6} {:>14.6e}", r.iteration, r.eval_cost);
    }
}
