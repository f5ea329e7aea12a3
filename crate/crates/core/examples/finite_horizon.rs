//! Backward time marching for `Q(x, u, t)` on `[0, T]` with `Q(., T) = |x|^2`.
//!
//!     cargo run --release --example finite_horizon

use ctql::hjb_oracle::{self, ControlRateSet, FiniteHorizonProblem, GridSpec, TerminalCost};
use ctql::EnvironmentSpec;

fn main() {
    let env = EnvironmentSpec::lqr1d();
    let steps = 40;
    let grid = GridSpec::uniform(1, 1, (-2.0, 2.0), (-2.0, 2.0), 81).with_time(2.0, steps);
    let rates = ControlRateSet::standard(1, env.rate_bound, hjb_oracle::DEFAULT_DIRECTIONS);
    let problem = FiniteHorizonProblem {
        env,
        terminal: TerminalCost::Quadratic,
    };
    let sol = hjb_oracle::solve_finite(&problem, &grid, &rates).expect("valid grid");
    let dt = grid.time.unwrap().dt();

    println!("{:>6} {:>12} {:>12} {:>12}", "t", "Q(1,1,t)", "Q(1,-1,t)", "Q(0,0,t)");
    for k in (0..=steps).rev().step_by(5) {
        println!(
            "{:>6.2} {:>12.5} {:>12.5} {:>12.5}",
            k as f64 * dt,
            sol.interpolate_slice(k, &[1.0, 1.0]),
            sol.interpolate_slice(k, &[1.0, -1.0]),
            sol.interpolate_slice(k, &[0.0, 0.0]),
        );
    }
}
