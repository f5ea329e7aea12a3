//! Reference-solver checks against closed forms.

use ctql::hjb_oracle::{self, Axis, ControlRateSet, GridSpec, IterationControl};
use ctql::EnvironmentSpec;

/// With `M = 0` the control is frozen: `x(t) = x + u t` and
/// `Q = int_0^inf e^{-gamma t} ((x + u t)^2 + u^2) dt`.
fn frozen_control_value(x: f64, u: f64, g: f64) -> f64 {
    x * x / g + 2.0 * x * u / (g * g) + 2.0 * u * u / (g * g * g) + u * u / g
}

fn frozen_control_error(x_points: usize) -> f64 {
    let mut env = EnvironmentSpec::lqr1d();
    env.rate_bound = 0.0;
    let grid = GridSpec {
        axes: vec![Axis::new(-30.0, 30.0, x_points), Axis::new(-0.3, 0.3, 7)],
        time: None,
    };
    let rates = ControlRateSet::standard(1, 0.0, hjb_oracle::DEFAULT_DIRECTIONS);
    let delta = hjb_oracle::default_delta(&env, &grid, &rates);
    let sol = hjb_oracle::solve_infinite(
        &env,
        &grid,
        delta,
        &rates,
        IterationControl {
            tol: 1e-10,
            max_iter: 10_000_000,
        },
    )
    .unwrap();
    let mut worst = 0.0f64;
    for x in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        for u in [-0.2, -0.1, 0.0, 0.1, 0.2] {
            let exact = frozen_control_value(x, u, env.gamma);
            let got = sol.interpolate(&[x, u]);
            worst = worst.max((got - exact).abs() / exact.max(1.0));
        }
    }
    worst
}

#[test]
fn frozen_control_converges_to_closed_form() {
    let coarse = frozen_control_error(1501);
    let fine = frozen_control_error(3001);
    eprintln!("relative error {coarse:.4e} -> {fine:.4e}");
    assert!(fine < 0.75 * coarse, "{coarse} -> {fine}");
    assert!(fine < 0.02, "{fine}");
}

#[test]
fn refinement_reduces_error_against_static_closed_form() {
    let env = EnvironmentSpec::linear(
        ctql::Matrix::zeros(1, 1),
        ctql::Matrix::zeros(1, 1),
        0.5,
        1.0,
    )
    .unwrap();
    // x frozen, u driven to zero at full rate
    let exact = |x: f64, u: f64| {
        let (g, a) = (0.5f64, u.abs());
        let t1 = a;
        // int_0^{t1} e^{-g t} (a - t)^2 dt
        let e = (-g * t1).exp();
        let i0 = (1.0 - e) / g;
        let i1 = (1.0 - e * (1.0 + g * t1)) / (g * g);
        let i2 = (2.0 - e * (2.0 + 2.0 * g * t1 + g * g * t1 * t1)) / (g * g * g);
        x * x / g + a * a * i0 - 2.0 * a * i1 + i2
    };
    let rates = ControlRateSet::standard(1, 1.0, hjb_oracle::DEFAULT_DIRECTIONS);
    let mut errors = Vec::new();
    for points in [41, 81, 161] {
        let grid = GridSpec::uniform(1, 1, (-2.0, 2.0), (-2.0, 2.0), points);
        let delta = hjb_oracle::default_delta(&env, &grid, &rates);
        let sol = hjb_oracle::solve_infinite(&env, &grid, delta, &rates, IterationControl::default())
            .unwrap();
        let err = grid
            .inner_probes(0.6, 13)
            .iter()
            .map(|p| (sol.interpolate(p) - exact(p[0], p[1])).abs())
            .fold(0.0, f64::max);
        errors.push(err);
    }
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
}

#[test]
fn planar_grid_solution_is_symmetric() {
    let env = EnvironmentSpec::random_lqr(1, 1, 3).unwrap();
    let grid = GridSpec::uniform(1, 1, (-1.5, 1.5), (-1.5, 1.5), 41);
    let rates = ControlRateSet::standard(1, 1.0, hjb_oracle::DEFAULT_DIRECTIONS);
    let delta = hjb_oracle::default_delta(&env, &grid, &rates);
    let sol = hjb_oracle::solve_infinite(
        &env,
        &grid,
        delta,
        &rates,
        IterationControl {
            tol: 1e-10,
            max_iter: 10_000_000,
        },
    )
    .unwrap();
    for node in 0..grid.node_count() {
        let mirror = grid.mirror_node(node);
        assert!((sol.values[node] - sol.values[mirror]).abs() < 1e-6);
    }
}
