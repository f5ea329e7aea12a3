//! Semi-Lagrangian reference solution of the scalar problem.
//!
//! With unbounded control rates the value is `V(x) = P x^2`, the Riccati
//! solution; the rate bound can only raise `Q(x, u)` above it.
//!
//!     cargo run --release --example solve_hjb -- [points]

use ctql::hjb_oracle::{self, ControlRateSet, GridSpec, IterationControl};
use ctql::EnvironmentSpec;

fn main() {
    let points = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(101);
    let env = EnvironmentSpec::lqr1d();
    let grid = GridSpec::uniform(1, 1, (-2.0, 2.0), (-2.0, 2.0), points);
    let rates = ControlRateSet::standard(1, env.rate_bound, hjb_oracle::DEFAULT_DIRECTIONS);
    let delta = hjb_oracle::default_delta(&env, &grid, &rates);

    let start = std::time::Instant::now();
    let sol = hjb_oracle::solve_infinite(&env, &grid, delta, &rates, IterationControl::default())
        .expect("converges");
    println!(
        "{points}x{points} grid, delta {delta:.4e}: {} sweeps in {:.2?}",
        sol.meta.iterations,
        start.elapsed()
    );

    let p = (-env.gamma + (env.gamma * env.gamma + 4.0).sqrt()) / 2.0;
    println!("\n{:>6} {:>6} {:>10} {:>10}", "x", "u", "Q", "P x^2");
    for (x, u) in [(1.0, 1.0), (1.0, 0.0), (1.0, -p), (0.5, -0.5), (-1.0, 1.0), (0.0, 0.0)] {
        println!("{x:>6.2} {u:>6.2} {:>10.4} {:>10.4}", sol.interpolate(&[x, u]), p * x * x);
    }

    let greedy = hjb_oracle::greedy_policy(&sol, &rates).expect("infinite horizon");
    println!("\ngreedy rate along u = 0:");
    for x in [-1.0, -0.5, -0.1, 0.1, 0.5, 1.0] {
        println!("  x = {x:>5.2}: a = {:>4.1}", greedy.rate(&[x, 0.0])[0]);
    }
}
