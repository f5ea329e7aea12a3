//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line
//! with the measured numbers, then asserts.
//!
//! Expensive artifacts (the 1D reference grid, the five 1D training runs)
//! are computed once and shared between criteria.

use std::path::Path;
use std::sync::OnceLock;

use ctql::cli::{self, Common};
use ctql::hjb_oracle::{
    self, ControlRateSet, FiniteHorizonProblem, GridSolution, GridSpec, IterationControl,
    SemiLagrangianOperator, TerminalCost, ValueFormat,
};
use ctql::learner::{self, GreedyPolicy, LearningCurve, TrainConfig, Trainer};
use ctql::odeint::{self, ConstantRate, IntegratorConfig};
use ctql::qnet::{Checkpoint, QNetwork};
use ctql::rng::{streams, RngState};
use ctql::{AugmentedState, EnvironmentSpec, Matrix};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {id}: {} - {name} - {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn riccati_p(gamma: f64) -> f64 {
    (-gamma + (gamma * gamma + 4.0).sqrt()) / 2.0
}

const SOLVE: IterationControl = IterationControl {
    tol: 1e-9,
    max_iter: 10_000_000,
};

/// 201 x 201 reference solution of the scalar problem on `[-2, 2]^2`, its
/// 101 x 101 coarsening, and the refinement gap over the inner probes.
struct Reference {
    fine: GridSolution,
    coarse: GridSolution,
    scheme_error: f64,
}

fn reference() -> &'static Reference {
    static REF: OnceLock<Reference> = OnceLock::new();
    REF.get_or_init(|| {
        let env = EnvironmentSpec::lqr1d();
        let grid = GridSpec::uniform(1, 1, (-2.0, 2.0), (-2.0, 2.0), 201);
        let rates = ControlRateSet::standard(1, 1.0, hjb_oracle::DEFAULT_DIRECTIONS);
        let delta = hjb_oracle::default_delta(&env, &grid, &rates);
        let fine = hjb_oracle::solve_infinite(&env, &grid, delta, &rates, SOLVE).unwrap();
        let coarse_grid = grid.coarsened().unwrap();
        let coarse =
            hjb_oracle::solve_infinite(&env, &coarse_grid, 2.0 * delta, &rates, SOLVE).unwrap();
        let probes = grid.inner_probes(0.6, 41);
        let scheme_error = hjb_oracle::refinement_gap(&fine, &coarse, &probes);
        Reference {
            fine,
            coarse,
            scheme_error,
        }
    })
}

struct TrainedRun {
    initial: QNetwork,
    trainer: Trainer,
    curve: LearningCurve,
}

fn reference_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        eval_every: 0,
        ..TrainConfig::default()
    }
}

fn train_run(env: &EnvironmentSpec, cfg: &TrainConfig) -> TrainedRun {
    let mut trainer = Trainer::new(env, cfg).unwrap();
    let initial = trainer.network.clone();
    let mut curve = LearningCurve::default();
    trainer.run(&mut curve, &mut |_| {}).unwrap();
    TrainedRun {
        initial,
        trainer,
        curve,
    }
}

fn scalar_runs() -> &'static Vec<TrainedRun> {
    static RUNS: OnceLock<Vec<TrainedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let env = EnvironmentSpec::lqr1d();
        (0..5).map(|seed| train_run(&env, &reference_config(seed))).collect()
    })
}

/// Largest pre-activation magnitude threshold under which a point counts as
/// near a rectifier kink.
fn min_abs_preactivation(net: &QNetwork, z: &[f64]) -> f64 {
    let mut act = z.to_vec();
    let mut smallest = f64::INFINITY;
    let depth = net.layers.len();
    for (l, layer) in net.layers.iter().enumerate() {
        let mut next = layer.bias.clone();
        for (o, row) in next.iter_mut().zip(layer.weights.chunks_exact(layer.inputs)) {
            *o += row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>();
        }
        if l + 1 < depth {
            smallest = next.iter().fold(smallest, |s, v| s.min(v.abs()));
            next.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        act = next;
    }
    smallest
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn criterion_01_gradient_correctness() {
    let step = 1e-5;
    let mut rng = RngState::from_seed(2024);
    let mut worst_input = 0.0f64;
    let mut worst_param = 0.0f64;
    let mut worst_dir = 0.0f64;
    let mut instances = 0;
    let mut attempt = 0u64;
    while instances < 100 {
        attempt += 1;
        let dim = 2 + (attempt % 3) as usize;
        let (net, _, _) = ctql::qnet::init_params_with(dim, &[12, 9], attempt, 1e-3);
        let z: Vec<f64> = (0..dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let batch: Vec<(Vec<f64>, f64)> = (0..3)
            .map(|_| {
                let p: Vec<f64> = (0..dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
                (p, rng.uniform_in(-1.0, 1.0))
            })
            .collect();
        let margin = std::iter::once(&z)
            .chain(batch.iter().map(|(p, _)| p))
            .map(|p| min_abs_preactivation(&net, p))
            .fold(f64::INFINITY, f64::min);
        if margin < 1e-2 {
            continue;
        }
        instances += 1;

        let (_, grad) = net.value_and_input_gradient(&z);
        for k in 0..dim {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[k] += step;
            zm[k] -= step;
            let fd = (net.value(&zp) - net.value(&zm)) / (2.0 * step);
            worst_input = worst_input.max(rel_err(grad[k], fd));
        }

        let (_, pgrad) = net.loss_and_gradient(&batch).unwrap();
        let grads: Vec<f64> = pgrad.params().copied().collect();
        let count = grads.len();
        for _ in 0..10 {
            let idx = (rng.next_u64() % count as u64) as usize;
            let mut plus = net.clone();
            let mut minus = net.clone();
            *plus.params_mut().nth(idx).unwrap() += step;
            *minus.params_mut().nth(idx).unwrap() -= step;
            let fd = (plus.mse_loss(&batch).unwrap() - minus.mse_loss(&batch).unwrap()) / (2.0 * step);
            worst_param = worst_param.max(rel_err(grads[idx], fd));
        }

        let dir: Vec<f64> = (0..count).map(|_| rng.standard_normal()).collect();
        let mut plus = net.clone();
        let mut minus = net.clone();
        for ((p, m), d) in plus.params_mut().zip(minus.params_mut()).zip(&dir) {
            *p += step * d;
            *m -= step * d;
        }
        let fd = (plus.mse_loss(&batch).unwrap() - minus.mse_loss(&batch).unwrap()) / (2.0 * step);
        let analytic: f64 = grads.iter().zip(&dir).map(|(g, d)| g * d).sum();
        worst_dir = worst_dir.max(rel_err(analytic, fd));
    }
    let pass = worst_input <= 1e-4 && worst_param <= 1e-4 && worst_dir <= 1e-4;
    report(
        1,
        "gradient correctness",
        pass,
        &format!(
            "100 instances; worst rel err input {worst_input:.2e}, parameter {worst_param:.2e}, directional {worst_dir:.2e} (bound 1e-4)"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_02_integrator_order() {
    let env = EnvironmentSpec::lqr1d();
    let z0 = AugmentedState::new(vec![1.0], vec![0.5]);
    let solve = |substeps: usize| {
        let cfg = IntegratorConfig { h: 2.0, substeps };
        let mut policy = |z: &[f64], a: &mut [f64]| a[0] = -(z[0] + z[1]).tanh();
        let r = odeint::rollout_step(&env, &z0, &mut policy, &cfg).unwrap();
        [r.z_end.x[0], r.z_end.u[0], r.discounted_cost]
    };
    let (a, b, c) = (solve(10), solve(20), solve(40));
    let ratios: Vec<f64> = (0..3)
        .map(|k| (a[k] - b[k]).abs() / (b[k] - c[k]).abs())
        .collect();
    let worst = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let pass = worst >= 8.0;
    report(
        2,
        "integrator order",
        pass,
        &format!("error ratios x/u/cost {ratios:.2?} (bound >= 8)"),
    );
    assert!(pass);
}

/// `x^2 / gamma + int_0^{|u|/M} e^{-gamma t} (|u| - M t)^2 dt` by composite Simpson.
fn static_closed_form(x: f64, u: f64, gamma: f64, m: f64) -> f64 {
    let t1 = u.abs() / m;
    let n = 2000;
    let h = t1 / n as f64;
    let f = |t: f64| (-gamma * t).exp() * (u.abs() - m * t).powi(2);
    let mut s = f(0.0) + f(t1);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    x * x / gamma + s * h / 3.0
}

#[test]
fn criterion_03_oracle_matches_closed_form() {
    let start = std::time::Instant::now();
    let env =
        EnvironmentSpec::linear(Matrix::zeros(1, 1), Matrix::zeros(1, 1), 0.1, 1.0).unwrap();
    let grid = GridSpec::uniform(1, 1, (-2.0, 2.0), (-2.0, 2.0), 201);
    let rates = ControlRateSet::standard(1, 1.0, hjb_oracle::DEFAULT_DIRECTIONS);
    let delta = hjb_oracle::default_delta(&env, &grid, &rates);
    let fine = hjb_oracle::solve_infinite(&env, &grid, delta, &rates, SOLVE).unwrap();
    let coarse =
        hjb_oracle::solve_infinite(&env, &grid.coarsened().unwrap(), 2.0 * delta, &rates, SOLVE)
            .unwrap();
    let probes = grid.inner_probes(0.6, 41);
    let scheme_error = hjb_oracle::refinement_gap(&fine, &coarse, &probes);
    let err = probes
        .iter()
        .map(|p| (fine.interpolate(p) - static_closed_form(p[0], p[1], 0.1, 1.0)).abs())
        .fold(0.0, f64::max);
    let elapsed = start.elapsed().as_secs_f64();
    let pass = err <= 2.0 * scheme_error && elapsed <= 60.0;
    report(
        3,
        "oracle vs closed form",
        pass,
        &format!(
            "max err {err:.3e}, estimated scheme error {scheme_error:.3e}, bound {:.3e}, {elapsed:.1}s",
            2.0 * scheme_error
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_contraction() {
    let r = reference();
    let env = EnvironmentSpec::lqr1d();
    let op = SemiLagrangianOperator::infinite(&env, &r.fine.spec, &r.fine.meta.rates, r.fine.meta.delta)
        .unwrap();
    let mut rng = RngState::from_seed(77);
    let nodes = r.fine.spec.node_count();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let q1: Vec<f64> = (0..nodes).map(|_| rng.uniform_in(-50.0, 50.0)).collect();
        let q2: Vec<f64> = (0..nodes).map(|_| rng.uniform_in(-50.0, 50.0)).collect();
        let (mut t1, mut t2) = (vec![0.0; nodes], vec![0.0; nodes]);
        op.apply(&q1, &mut t1);
        op.apply(&q2, &mut t2);
        let sup = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        };
        worst = worst.max(sup(&t1, &t2) / sup(&q1, &q2));
    }
    let bound = op.discount() * (1.0 + 1e-10);
    let pass = worst <= bound;
    report(
        4,
        "contraction",
        pass,
        &format!("worst gap ratio {worst:.12} vs e^(-gamma delta)(1+1e-10) = {bound:.12}"),
    );
    assert!(pass);
}

#[test]
fn criterion_05_monotonicity_in_m() {
    let env = EnvironmentSpec::lqr1d();
    let bounds = [0.5, 1.0, 2.0, 4.0];
    let sets: Vec<ControlRateSet> = (0..bounds.len())
        .map(|k| ControlRateSet::nested_scalar(&bounds[..=k]))
        .collect();
    let mut widest = env.clone();
    widest.rate_bound = 4.0;
    let control = IterationControl {
        tol: 1e-8,
        max_iter: 10_000_000,
    };
    let solve = |points: usize| {
        let grid = GridSpec::uniform(1, 1, (-2.0, 2.0), (-2.0, 2.0), points);
        let delta = hjb_oracle::default_delta(&widest, &grid, &sets[3]);
        hjb_oracle::monotonicity_in_m(&env, &grid, &bounds, delta, &sets, control).unwrap()
    };
    let fine = solve(201);
    let coarse = solve(101);

    let grid = &fine[0].spec;
    let probes = grid.inner_probes(0.6, 41);
    let mut tolerance = 0.0f64;
    for (f, c) in fine.iter().zip(&coarse) {
        tolerance = tolerance.max(hjb_oracle::refinement_gap(f, c, &probes));
    }
    let inner = grid.inner_nodes(0.6);
    let mut worst_increase = f64::NEG_INFINITY;
    for w in fine.windows(2) {
        for &i in &inner {
            worst_increase = worst_increase.max(w[1].values[i] - w[0].values[i]);
        }
    }
    let p = riccati_p(env.gamma);
    let mut approach_ok = true;
    let mut lines = Vec::new();
    for x in [-1.0, -0.5, 0.25, 0.5, 1.0] {
        let z = [x, -p * x];
        let vals: Vec<f64> = fine.iter().map(|s| s.interpolate(&z)).collect();
        let target = p * x * x;
        let gaps: Vec<f64> = vals.iter().map(|v| v - target).collect();
        let from_above = gaps.iter().all(|g| *g >= -tolerance);
        let shrinking = gaps.windows(2).all(|g| g[1] <= g[0] + 1e-12);
        let last = *gaps.last().unwrap();
        let close = last.abs() <= 2.0 * hjb_oracle::refinement_gap(&fine[3], &coarse[3], &[z.to_vec()]).max(1e-12)
            || last.abs() <= tolerance;
        approach_ok &= from_above && shrinking && close;
        lines.push(format!("x={x}: gap {:.4} -> {:.4}", gaps[0], last));
    }
    let pass = worst_increase <= tolerance && approach_ok;
    report(
        5,
        "monotonicity in M",
        pass,
        &format!(
            "max node increase {worst_increase:.2e} (tolerance {tolerance:.2e}); Q(x,-Px) - Px^2: {}",
            lines.join(", ")
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_06_terminal_condition() {
    let env = EnvironmentSpec::lqr1d();
    let grid = GridSpec::uniform(1, 1, (-2.0, 2.0), (-2.0, 2.0), 101).with_time(1.0, 50);
    let rates = ControlRateSet::standard(1, 1.0, hjb_oracle::DEFAULT_DIRECTIONS);
    let mut mismatches = 0;
    for terminal in [TerminalCost::Quadratic, TerminalCost::Zero, TerminalCost::Constant(1.5)] {
        let problem = FiniteHorizonProblem {
            env: env.clone(),
            terminal,
        };
        let sol = hjb_oracle::solve_finite(&problem, &grid, &rates).unwrap();
        let last = sol.slice(50);
        for node in 0..grid.node_count() {
            let x = grid.node_coords(node)[0];
            if last[node] != terminal.eval(&[x]) {
                mismatches += 1;
            }
        }
    }
    let pass = mismatches == 0;
    report(
        6,
        "terminal condition",
        pass,
        &format!("{mismatches} nodes differ from q on the t = T slice (3 terminal costs)"),
    );
    assert!(pass);
}

#[test]
fn criterion_07_g_function() {
    let r = reference();
    let env = EnvironmentSpec::lqr1d();
    let sol = &r.fine;
    let q = |z: &[f64]| sol.interpolate(z);
    let cfg = IntegratorConfig::default();
    let tol = r.scheme_error;

    let mut worst_variation = 0.0f64;
    for (x, u) in [(1.0, 1.0), (-0.8, 0.4), (0.5, -1.0), (0.0, 0.9)] {
        let mut greedy = hjb_oracle::greedy_policy(sol, &sol.meta.rates).unwrap();
        let z0 = AugmentedState::new(vec![x], vec![u]);
        let g = learner::optimality_monitor(&q, &env, &z0, &mut greedy, 5.0, &cfg, 0.05).unwrap();
        let (lo, hi) = g
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), (_, v)| (l.min(*v), h.max(*v)));
        worst_variation = worst_variation.max(hi - lo);
    }

    let mut worst_drop = 0.0f64;
    for (x, u) in [(-1.0, -1.0), (0.5, -0.5), (0.0, 0.0)] {
        let mut up = ConstantRate(vec![env.rate_bound]);
        let z0 = AugmentedState::new(vec![x], vec![u]);
        let g = learner::optimality_monitor(&q, &env, &z0, &mut up, 1.0, &cfg, 0.05).unwrap();
        for w in g.windows(2) {
            worst_drop = worst_drop.max(w[0].1 - w[1].1);
        }
    }
    let pass = worst_variation <= 5.0 * tol && worst_drop <= tol;
    report(
        7,
        "g-function structure",
        pass,
        &format!(
            "greedy g variation {worst_variation:.3e} (bound {:.3e}); worst decrease under a=+M {worst_drop:.3e} (bound {tol:.3e})",
            5.0 * tol
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_learning_regression_1d() {
    let env = EnvironmentSpec::lqr1d();
    let mut pass = true;
    let mut lines = Vec::new();
    for (seed, run) in scalar_runs().iter().enumerate() {
        let first = run.curve.first().unwrap().eval_cost;
        let last = run.curve.last().unwrap().eval_cost;
        let tr = &run.trainer;
        let mut policy = GreedyPolicy::new(
            &tr.network,
            &env,
            tr.cfg.grad_zero_tol,
            RngState::stream(tr.cfg.seed, streams::EVAL_TIES),
        );
        let rows = odeint::trajectory_record(
            &env,
            &tr.eval_start,
            &mut policy,
            tr.cfg.eval_t,
            &tr.cfg.integrator(),
            tr.cfg.h,
        )
        .unwrap();
        let end = rows.last().unwrap();
        let ok = first / last >= 2.0 && end.x[0].abs() < 0.2 && end.u[0].abs() < 0.2;
        pass &= ok;
        lines.push(format!(
            "seed {seed}: cost {first:.2} -> {last:.3} (x{:.1}), |x(10)| {:.3}, |u(10)| {:.3}",
            first / last,
            end.x[0].abs(),
            end.u[0].abs()
        ));
    }
    report(
        8,
        "learning regression 1D",
        pass,
        &format!("{} (bounds: ratio >= 2, |x(10)|, |u(10)| < 0.2)", lines.join("; ")),
    );
    assert!(pass);
}

fn save_checkpoint(net: &QNetwork, dir: &Path, name: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    Checkpoint::new(net, net, &ctql::AdamState::new(net, 1e-3), 0, "")
        .save(&path)
        .unwrap();
    path
}

#[test]
fn criterion_09_learner_vs_oracle() {
    let r = reference();
    let run = &scalar_runs()[0];
    let dir = tempfile::tempdir().unwrap();
    let solution = dir.path().join("solution.json");
    r.fine.save(&solution, ValueFormat::F64Le).unwrap();
    let trained = save_checkpoint(&run.trainer.network, dir.path(), "trained.json");
    let untrained = save_checkpoint(&run.initial, dir.path(), "untrained.json");
    let common = |sub: &str| Common {
        config: None,
        overrides: Vec::new(),
        seed: None,
        out_dir: dir.path().join(sub),
    };
    let t = cli::cmd_compare(&common("trained"), &trained, &solution, Some(0.6)).unwrap();
    let u = cli::cmd_compare(&common("untrained"), &untrained, &solution, Some(0.6)).unwrap();
    let pass = t.mean_abs_err < u.mean_abs_err && t.policy_agreement >= 0.8;
    report(
        9,
        "learner vs oracle",
        pass,
        &format!(
            "mean |Q_theta - Q_grid| trained {:.3} vs untrained {:.3}; sign agreement {:.1}% (bound 80%) over {} probes",
            t.mean_abs_err,
            u.mean_abs_err,
            100.0 * t.policy_agreement,
            t.rows.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_high_dimensional_smoke() {
    let mut pass = true;
    let mut lines = Vec::new();
    for dim in [10usize, 20] {
        let mut improved = 0;
        let mut pairs = Vec::new();
        for seed in 0..5u64 {
            let env = EnvironmentSpec::random_lqr(dim, dim, seed).unwrap();
            let run = train_run(&env, &reference_config(seed));
            let first = run.curve.first().unwrap().eval_cost;
            let last = run.curve.last().unwrap().eval_cost;
            if last < first {
                improved += 1;
            }
            pairs.push(format!("{first:.3e}->{last:.3e}"));
        }
        pass &= improved >= 4;
        lines.push(format!("n=m={dim}: {improved}/5 improved [{}]", pairs.join(", ")));
    }
    report(10, "high-dimensional smoke", pass, &lines.join("; "));
    assert!(pass);
}

#[test]
fn criterion_11_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let common = Common {
            config: None,
            overrides: vec!["N=25".into(), "eval_every=5".into()],
            seed: Some(3),
            out_dir: dir.path().join(sub),
        };
        cli::cmd_train(&common).unwrap();
        let curve = std::fs::read(dir.path().join(sub).join("curve.csv")).unwrap();
        let ckpt = std::fs::read(dir.path().join(sub).join("checkpoint_final.json")).unwrap();
        (curve, ckpt)
    };
    let (c1, k1) = run("a");
    let (c2, k2) = run("b");
    let pass = c1 == c2 && k1 == k2;
    report(
        11,
        "determinism",
        pass,
        &format!(
            "curve.csv identical: {}, checkpoint identical: {}",
            c1 == c2,
            k1 == k2
        ),
    );
    assert!(pass);
}

#[test]
fn reference_solution_sanity() {
    let r = reference();
    assert!(r.fine.meta.converged && r.coarse.meta.converged);
    let p = riccati_p(0.1);
    assert!(r.fine.interpolate(&[1.0, 1.0]) >= p);
}
