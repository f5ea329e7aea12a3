//! Larger rate bounds can only help: `Q^M` is non-increasing in `M` and
//! approaches the Riccati value `P x^2` on the line `u = -P x`.
//!
//!     cargo run --release --example monotonicity_in_m

use ctql::hjb_oracle::{self, ControlRateSet, GridSpec, IterationControl};
use ctql::EnvironmentSpec;

fn main() {
    let env = EnvironmentSpec::lqr1d();
    let bounds = [0.5, 1.0, 2.0, 4.0];
    let sets: Vec<ControlRateSet> = (0..bounds.len())
        .map(|k| ControlRateSet::nested_scalar(&bounds[..=k]))
        .collect();
    let grid = GridSpec::uniform(1, 1, (-2.0, 2.0), (-2.0, 2.0), 101);
    let mut widest = env.clone();
    widest.rate_bound = 4.0;
    let delta = hjb_oracle::default_delta(&widest, &grid, &sets[3]);
    let control = IterationControl {
        tol: 1e-8,
        ..IterationControl::default()
    };
    let sols = hjb_oracle::monotonicity_in_m(&env, &grid, &bounds, delta, &sets, control)
        .expect("converges");

    let p = (-env.gamma + (env.gamma * env.gamma + 4.0).sqrt()) / 2.0;
    print!("{:>6}", "x");
    for m in bounds {
        print!(" {:>9}", format!("M={m}"));
    }
    println!(" {:>9}", "P x^2");
    for x in [0.25, 0.5, 0.75, 1.0] {
        print!("{x:>6.2}");
        for s in &sols {
            print!(" {:>9.5}", s.interpolate(&[x, -p * x]));
        }
        println!(" {:>9.5}", p * x * x);
    }
}
