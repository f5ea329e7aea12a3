//! `g(s) = int_0^s e^{-gamma t} r dt + e^{-gamma s} Q(z(s))` with the grid
//! Q-function: flat along the greedy trajectory, increasing under a
//! suboptimal constant rate.
//!
//!     cargo run --release --example optimality_monitor

use ctql::hjb_oracle::{self, ControlRateSet, GridSpec, IterationControl};
use ctql::learner::optimality_monitor;
use ctql::odeint::{ConstantRate, IntegratorConfig};
use ctql::{AugmentedState, EnvironmentSpec};

fn main() {
    let env = EnvironmentSpec::lqr1d();
    let grid = GridSpec::uniform(1, 1, (-2.0, 2.0), (-2.0, 2.0), 101);
    let rates = ControlRateSet::standard(1, env.rate_bound, hjb_oracle::DEFAULT_DIRECTIONS);
    let delta = hjb_oracle::default_delta(&env, &grid, &rates);
    let sol = hjb_oracle::solve_infinite(&env, &grid, delta, &rates, IterationControl::default())
        .expect("converges");
    let q = |z: &[f64]| sol.interpolate(z);
    let cfg = IntegratorConfig::default();
    let z0 = AugmentedState::new(vec![1.0], vec![0.5]);

    let mut greedy = hjb_oracle::greedy_policy(&sol, &rates).expect("infinite horizon");
    let g_opt = optimality_monitor(&q, &env, &z0, &mut greedy, 2.0, &cfg, 0.25).expect("rollout");
    let mut up = ConstantRate(vec![env.rate_bound]);
    let g_up = optimality_monitor(&q, &env, &z0, &mut up, 2.0, &cfg, 0.25).expect("rollout");

    println!("{:>5} {:>10} {:>10}", "s", "greedy", "a = +M");
    for ((s, a), (_, b)) in g_opt.iter().zip(&g_up) {
        println!("{s:>5.2} {a:>10.5} {b:>10.5}");
    }
}
