//! Grid reference solver for the Q-function HJB equations.
//!
//! The Q-function is computed on a tensor-product grid over the augmented
//! state `z = (x, u)` with a semi-Lagrangian discretisation of the dynamic
//! programming principle:
//!
//! ```text
//! infinite horizon:  Q(z)       = min_a { r(z) (1 - e^{-gamma delta}) / gamma + e^{-gamma delta} Q(z + delta F(z, a)) }
//! finite horizon:    Q(z, t-dt) = min_a { r(z) dt + Q(z + dt F(z, a), t) },   Q(z, T) = q(x)
//! ```
//!
//! with `F(z, a) = (A x + B u, a)`. Foot points come from one RK4 step with
//! `a` frozen and are read back by multilinear interpolation, clamped to the
//! grid box. Interpolation weights are nonnegative and sum to one, so the
//! scheme is monotone and, for the discounted problem, a contraction with
//! modulus `e^{-gamma delta}`.
//!
//! Sweeps are Jacobi iterations. The solver is meant for `n = m = 1`; larger
//! problems up to `n + m = 4` are accepted with a warning.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{AugmentedState, EnvironmentSpec};
use crate::io::fmt_f64;
use crate::odeint::Policy;

/// Hard cap on `n + m`.
pub const MAX_GRID_DIM: usize = 4;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid dimension {dim} exceeds the supported maximum of {MAX_GRID_DIM}")]
    Capacity { dim: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no convergence after {iterations} sweeps (last update {last_update:e})")]
    NotConverged {
        iterations: usize,
        last_update: f64,
        partial: Box<GridSolution>,
    },
    #[error("non-finite value encountered in sweep {0}")]
    NonFinite(usize),
    #[error("solution i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("solution format: {0}")]
    Format(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, points: usize) -> Self {
        Self { min, max, points }
    }

    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.points - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.points {
            self.max
        } else {
            self.min + i as f64 * self.spacing()
        }
    }
}

/// Time axis `t_k = k T / steps`, `k = 0..=steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeAxis {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeAxis {
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// One axis per augmented coordinate, `x` axes first.
    pub axes: Vec<Axis>,
    pub time: Option<TimeAxis>,
}

impl GridSpec {
    /// Same `x` range for all `n` state axes and same `u` range for all `m`
    /// control axes, `points` nodes each.
    pub fn uniform(n: usize, m: usize, x: (f64, f64), u: (f64, f64), points: usize) -> Self {
        let mut axes = vec![Axis::new(x.0, x.1, points); n];
        axes.extend(std::iter::repeat_n(Axis::new(u.0, u.1, points), m));
        Self { axes, time: None }
    }

    pub fn with_time(mut self, horizon: f64, steps: usize) -> Self {
        self.time = Some(TimeAxis { horizon, steps });
        self
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        if self.axes.is_empty() {
            return Err(OracleError::InvalidGrid("no axes".into()));
        }
        if self.dim() > MAX_GRID_DIM {
            return Err(OracleError::Capacity { dim: self.dim() });
        }
        for (i, a) in self.axes.iter().enumerate() {
            if a.points < 2 {
                return Err(OracleError::InvalidGrid(format!("axis {i} needs >= 2 points")));
            }
            if !(a.min < a.max) || !a.min.is_finite() || !a.max.is_finite() {
                return Err(OracleError::InvalidGrid(format!("axis {i} needs min < max")));
            }
        }
        if let Some(t) = &self.time {
            if t.steps == 0 || !(t.horizon > 0.0) {
                return Err(OracleError::InvalidGrid("time axis needs T > 0 and steps >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.axes.iter().map(|a| a.points).product()
    }

    /// Row-major strides, last axis fastest.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dim()];
        for k in (0..self.dim().saturating_sub(1)).rev() {
            s[k] = s[k + 1] * self.axes[k + 1].points;
        }
        s
    }

    pub fn multi_index(&self, mut node: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for k in (0..self.dim()).rev() {
            idx[k] = node % self.axes[k].points;
            node /= self.axes[k].points;
        }
        idx
    }

    pub fn node_coords(&self, node: usize) -> Vec<f64> {
        self.multi_index(node)
            .iter()
            .zip(&self.axes)
            .map(|(&i, a)| a.coord(i))
            .collect()
    }

    /// Node mirrored through the box centre along every axis.
    pub fn mirror_node(&self, node: usize) -> usize {
        self.multi_index(node)
            .iter()
            .zip(&self.axes)
            .zip(self.strides())
            .map(|((&i, a), s)| (a.points - 1 - i) * s)
            .sum()
    }

    pub fn min_spacing(&self) -> f64 {
        self.axes
            .iter()
            .map(Axis::spacing)
            .fold(f64::INFINITY, f64::min)
    }

    /// Every axis with `(points - 1) / 2 + 1` nodes, i.e. doubled spacing.
    pub fn coarsened(&self) -> Result<Self, OracleError> {
        let mut out = self.clone();
        for a in &mut out.axes {
            if (a.points - 1) % 2 != 0 || a.points < 3 {
                return Err(OracleError::InvalidGrid(format!(
                    "cannot coarsen an axis with {} points",
                    a.points
                )));
            }
            a.points = (a.points - 1) / 2 + 1;
        }
        if let Some(t) = &mut out.time {
            if t.steps % 2 != 0 {
                return Err(OracleError::InvalidGrid("cannot coarsen an odd time axis".into()));
            }
            t.steps /= 2;
        }
        Ok(out)
    }

    /// Box of the central `frac` of every axis.
    pub fn inner_box(&self, frac: f64) -> Vec<(f64, f64)> {
        self.axes
            .iter()
            .map(|a| {
                let mid = 0.5 * (a.min + a.max);
                let half = 0.5 * frac * (a.max - a.min);
                (mid - half, mid + half)
            })
            .collect()
    }

    /// Tensor grid of `per_axis` probe points spanning the central `frac` of the box.
    pub fn inner_probes(&self, frac: f64, per_axis: usize) -> Vec<Vec<f64>> {
        let bounds = self.inner_box(frac);
        let per_axis = per_axis.max(1);
        let total = per_axis.pow(self.dim() as u32);
        (0..total)
            .map(|mut k| {
                let mut p = vec![0.0; self.dim()];
                for d in (0..self.dim()).rev() {
                    let i = k % per_axis;
                    k /= per_axis;
                    let (lo, hi) = bounds[d];
                    p[d] = if per_axis == 1 {
                        0.5 * (lo + hi)
                    } else {
                        lo + (hi - lo) * i as f64 / (per_axis - 1) as f64
                    };
                }
                p
            })
            .collect()
    }

    /// Nodes whose coordinates lie in the central `frac` of the box.
    pub fn inner_nodes(&self, frac: f64) -> Vec<usize> {
        let bounds = self.inner_box(frac);
        (0..self.node_count())
            .filter(|&n| {
                self.node_coords(n)
                    .iter()
                    .zip(&bounds)
                    .all(|(c, (lo, hi))| *c >= lo - 1e-12 && *c <= hi + 1e-12)
            })
            .collect()
    }

    /// Interpolation corners and weights at `z` (clamped into the box).
    fn stencil_into(&self, z: &[f64], strides: &[usize], idx: &mut Vec<u32>, w: &mut Vec<f64>) {
        let d = self.dim();
        let mut base = 0usize;
        let mut frac = [0.0f64; MAX_GRID_DIM];
        for k in 0..d {
            let a = &self.axes[k];
            let c = z[k].clamp(a.min, a.max);
            let s = (c - a.min) / a.spacing();
            let i = (s.floor() as usize).min(a.points - 2);
            frac[k] = (s - i as f64).clamp(0.0, 1.0);
            base += i * strides[k];
        }
        for corner in 0..(1usize << d) {
            let mut off = base;
            let mut weight = 1.0;
            for k in 0..d {
                if corner >> (d - 1 - k) & 1 == 1 {
                    off += strides[k];
                    weight *= frac[k];
                } else {
                    weight *= 1.0 - frac[k];
                }
            }
            idx.push(off as u32);
            w.push(weight);
        }
    }
}

/// Finite list of admissible control rates, `|a| <= M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlRateSet {
    pub rates: Vec<Vec<f64>>,
}

/// Number of unit directions used for `m >= 2` unless configured otherwise.
pub const DEFAULT_DIRECTIONS: usize = 16;

impl ControlRateSet {
    /// `{-M, 0, +M}` for `m = 1`; for `m >= 2`, `M` times `directions` unit
    /// vectors (evenly spaced angles for `m = 2`, a Fibonacci spiral for
    /// `m = 3`) followed by zero.
    pub fn standard(m: usize, rate_bound: f64, directions: usize) -> Self {
        let rates = match m {
            1 => vec![vec![-rate_bound], vec![0.0], vec![rate_bound]],
            2 => {
                let mut r: Vec<Vec<f64>> = (0..directions)
                    .map(|k| {
                        let th = 2.0 * std::f64::consts::PI * k as f64 / directions as f64;
                        vec![rate_bound * th.cos(), rate_bound * th.sin()]
                    })
                    .collect();
                r.push(vec![0.0; 2]);
                r
            }
            3 => {
                let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
                let cnt = directions.max(1);
                let mut r: Vec<Vec<f64>> = (0..cnt)
                    .map(|k| {
                        let y = if cnt == 1 { 0.0 } else { 1.0 - 2.0 * k as f64 / (cnt - 1) as f64 };
                        let rad = (1.0 - y * y).max(0.0).sqrt();
                        let th = golden * k as f64;
                        vec![rate_bound * rad * th.cos(), rate_bound * y, rate_bound * rad * th.sin()]
                    })
                    .collect();
                r.push(vec![0.0; 3]);
                r
            }
            _ => {
                let mut r = Vec::new();
                for i in 0..m {
                    for s in [-1.0, 1.0] {
                        let mut v = vec![0.0; m];
                        v[i] = s * rate_bound;
                        r.push(v);
                    }
                }
                r.push(vec![0.0; m]);
                r
            }
        };
        Self { rates }
    }

    /// Scalar-control set containing `0` and `+-M_j` for every bound in
    /// `bounds`. Nested sets make the discrete problems ordered in `M`.
    pub fn nested_scalar(bounds: &[f64]) -> Self {
        let mut rates = vec![vec![0.0]];
        for &b in bounds {
            rates.push(vec![-b]);
            rates.push(vec![b]);
        }
        Self { rates }
    }

    pub fn dim(&self) -> usize {
        self.rates.first().map_or(0, Vec::len)
    }

    pub fn max_norm(&self) -> f64 {
        self.rates
            .iter()
            .map(|a| a.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn validate(&self, m: usize, rate_bound: f64) -> Result<(), OracleError> {
        if self.rates.is_empty() {
            return Err(OracleError::InvalidArgument("empty rate set".into()));
        }
        if self.rates.iter().any(|a| a.len() != m) {
            return Err(OracleError::InvalidArgument(format!("rates must have length {m}")));
        }
        if self.max_norm() > rate_bound + 1e-12 {
            return Err(OracleError::InvalidArgument(format!(
                "rate of norm {} exceeds M = {rate_bound}",
                self.max_norm()
            )));
        }
        Ok(())
    }
}

/// Terminal cost `q(x)` of the finite-horizon problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalCost {
    Zero,
    /// `|x|^2`
    Quadratic,
    Constant(f64),
}

impl TerminalCost {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TerminalCost::Zero => 0.0,
            TerminalCost::Quadratic => x.iter().map(|v| v * v).sum(),
            TerminalCost::Constant(c) => *c,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    Infinite,
    Finite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionMeta {
    pub horizon: Horizon,
    pub env: EnvironmentSpec,
    pub gamma: f64,
    pub rate_bound: f64,
    /// Scheme step: pseudo-time step for the infinite horizon, `dt` otherwise.
    pub delta: f64,
    pub rates: ControlRateSet,
    pub iterations: usize,
    pub final_update: f64,
    pub converged: bool,
    pub terminal: Option<TerminalCost>,
}

/// Grid values of the Q-function. For finite-horizon solutions `values`
/// holds `steps + 1` consecutive time slices, slice `k` at `t = k dt`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSolution {
    pub spec: GridSpec,
    pub meta: SolutionMeta,
    #[serde(skip)]
    pub values: Vec<f64>,
    /// Sup-norm update of every sweep.
    #[serde(skip)]
    pub history: Vec<f64>,
}

impl GridSolution {
    pub fn slice_count(&self) -> usize {
        self.spec.time.map_or(1, |t| t.steps + 1)
    }

    /// Values of time slice `k` (the only slice for infinite horizon).
    pub fn slice(&self, k: usize) -> &[f64] {
        let nodes = self.spec.node_count();
        &self.values[k * nodes..(k + 1) * nodes]
    }

    /// Multilinear interpolation at `z`, clamped into the grid box.
    pub fn interpolate(&self, z: &[f64]) -> f64 {
        self.interpolate_slice(0, z)
    }

    pub fn interpolate_slice(&self, k: usize, z: &[f64]) -> f64 {
        interpolate_values(&self.spec, self.slice(k), z)
    }

    pub fn interpolate_state(&self, z: &AugmentedState) -> f64 {
        self.interpolate(&z.to_flat())
    }

    /// Writes the JSON header to `path` and the values to a sibling file
    /// (`.csv` or `.f64le`).
    pub fn save(&self, path: &Path, format: ValueFormat) -> Result<(), OracleError> {
        let values_path = format.values_path(path);
        let header = SolutionHeader {
            format: SOLUTION_FORMAT.to_string(),
            value_format: format,
            values_file: values_path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            value_count: self.values.len(),
            solution: self.clone(),
        };
        crate::io::write_json(path, &header)?;
        let mut w = BufWriter::new(std::fs::File::create(&values_path)?);
        match format {
            ValueFormat::Csv => {
                writeln!(w, "value")?;
                for v in &self.values {
                    writeln!(w, "{}", fmt_f64(*v))?;
                }
            }
            ValueFormat::F64Le => {
                for v in &self.values {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, OracleError> {
        let header: SolutionHeader = crate::io::read_json(path)?;
        if header.format != SOLUTION_FORMAT {
            return Err(OracleError::Format(format!("unknown format `{}`", header.format)));
        }
        let values_path = path.with_file_name(&header.values_file);
        let mut values = Vec::with_capacity(header.value_count);
        match header.value_format {
            ValueFormat::Csv => {
                let r = BufReader::new(std::fs::File::open(&values_path)?);
                for (i, line) in r.lines().enumerate() {
                    let line = line?;
                    if i == 0 {
                        continue;
                    }
                    values.push(line.trim().parse::<f64>().map_err(|e| {
                        OracleError::Format(format!("line {}: {e}", i + 1))
                    })?);
                }
            }
            ValueFormat::F64Le => {
                let mut bytes = Vec::new();
                std::fs::File::open(&values_path)?.read_to_end(&mut bytes)?;
                if bytes.len() % 8 != 0 {
                    return Err(OracleError::Format("truncated binary value file".into()));
                }
                values.extend(
                    bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))),
                );
            }
        }
        let mut sol = header.solution;
        sol.spec.validate()?;
        let expected = sol.spec.node_count() * sol.slice_count();
        if values.len() != expected || header.value_count != expected {
            return Err(OracleError::Format(format!(
                "expected {expected} values, found {}",
                values.len()
            )));
        }
        sol.values = values;
        Ok(sol)
    }
}

pub const SOLUTION_FORMAT: &str = "ctql-grid-solution-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueFormat {
    Csv,
    /// Raw little-endian 64-bit floats.
    F64Le,
}

impl ValueFormat {
    fn values_path(&self, header: &Path) -> PathBuf {
        header.with_extension(match self {
            ValueFormat::Csv => "values.csv",
            ValueFormat::F64Le => "values.f64le",
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SolutionHeader {
    format: String,
    value_format: ValueFormat,
    values_file: String,
    value_count: usize,
    solution: GridSolution,
}

pub fn interpolate_values(spec: &GridSpec, values: &[f64], z: &[f64]) -> f64 {
    let strides = spec.strides();
    let mut idx = Vec::with_capacity(1 << spec.dim());
    let mut w = Vec::with_capacity(1 << spec.dim());
    spec.stencil_into(z, &strides, &mut idx, &mut w);
    idx.iter().zip(&w).map(|(&i, w)| w * values[i as usize]).sum()
}

/// `interpolate(sol, z)` for a flat `[x; u]` point.
pub fn interpolate(sol: &GridSolution, z: &AugmentedState) -> f64 {
    sol.interpolate_state(z)
}

/// One RK4 step of `dz/dt = (A x + B u, a)` with `a` frozen.
pub fn foot_point(env: &EnvironmentSpec, z: &[f64], a: &[f64], dt: f64) -> Vec<f64> {
    let (n, m) = (env.n, env.m);
    let d = n + m;
    let rhs = |s: &[f64], out: &mut [f64]| {
        env.dynamics_into(&s[..n], &s[n..], &mut out[..n]);
        out[n..].copy_from_slice(a);
    };
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    rhs(z, &mut k1);
    for j in 0..d {
        tmp[j] = z[j] + 0.5 * dt * k1[j];
    }
    rhs(&tmp, &mut k2);
    for j in 0..d {
        tmp[j] = z[j] + 0.5 * dt * k2[j];
    }
    rhs(&tmp, &mut k3);
    for j in 0..d {
        tmp[j] = z[j] + dt * k3[j];
    }
    rhs(&tmp, &mut k4);
    (0..d)
        .map(|j| z[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]))
        .collect()
}

/// Largest `|F(z, a)|` over the grid box (attained at a box vertex) and the rate set.
pub fn max_field_norm(env: &EnvironmentSpec, grid: &GridSpec, rates: &ControlRateSet) -> f64 {
    let d = grid.dim();
    let mut best = 0.0f64;
    let mut f = vec![0.0; env.n];
    for corner in 0..(1usize << d) {
        let z: Vec<f64> = (0..d)
            .map(|k| {
                if corner >> k & 1 == 1 {
                    grid.axes[k].max
                } else {
                    grid.axes[k].min
                }
            })
            .collect();
        env.dynamics_into(&z[..env.n], &z[env.n..], &mut f);
        best = best.max(f.iter().map(|v| v * v).sum::<f64>());
    }
    let a = rates.max_norm();
    (best + a * a).sqrt()
}

/// Half the smallest grid spacing divided by `max |F|`.
pub fn default_delta(env: &EnvironmentSpec, grid: &GridSpec, rates: &ControlRateSet) -> f64 {
    let speed = max_field_norm(env, grid, rates);
    let h = 0.5 * grid.min_spacing();
    if speed > 0.0 {
        h / speed
    } else {
        h
    }
}

/// The discrete dynamic-programming operator on a fixed grid, with the
/// interpolation stencils of every (node, rate) foot point precomputed.
pub struct SemiLagrangianOperator {
    nodes: usize,
    rate_count: usize,
    corners: usize,
    idx: Vec<u32>,
    weights: Vec<f64>,
    /// One-step running cost at each node.
    cost: Vec<f64>,
    discount: f64,
}

impl SemiLagrangianOperator {
    /// Discounted operator with pseudo-time step `delta`.
    pub fn infinite(
        env: &EnvironmentSpec,
        grid: &GridSpec,
        rates: &ControlRateSet,
        delta: f64,
    ) -> Result<Self, OracleError> {
        let beta = (-env.gamma * delta).exp();
        let scale = -(-env.gamma * delta).exp_m1() / env.gamma;
        Self::build(env, grid, rates, delta, scale, beta)
    }

    /// Undiscounted backward step of length `dt`.
    pub fn finite(
        env: &EnvironmentSpec,
        grid: &GridSpec,
        rates: &ControlRateSet,
        dt: f64,
    ) -> Result<Self, OracleError> {
        Self::build(env, grid, rates, dt, dt, 1.0)
    }

    fn build(
        env: &EnvironmentSpec,
        grid: &GridSpec,
        rates: &ControlRateSet,
        step: f64,
        cost_scale: f64,
        discount: f64,
    ) -> Result<Self, OracleError> {
        grid.validate()?;
        if grid.dim() != env.n + env.m {
            return Err(OracleError::InvalidGrid(format!(
                "grid has {} axes, environment needs n + m = {}",
                grid.dim(),
                env.n + env.m
            )));
        }
        env.validate()
            .map_err(|e| OracleError::InvalidArgument(e.to_string()))?;
        rates.validate(env.m, env.rate_bound)?;
        if !(step > 0.0 && step.is_finite()) {
            return Err(OracleError::InvalidArgument(format!("scheme step must be > 0, got {step}")));
        }
        if grid.dim() > 2 {
            log::warn!(
                "HJB grid over {} dimensions with {} nodes; intended for n = m = 1",
                grid.dim(),
                grid.node_count()
            );
        }
        let nodes = grid.node_count();
        let corners = 1usize << grid.dim();
        let strides = grid.strides();
        let rc = rates.rates.len();
        let mut idx = Vec::with_capacity(nodes * rc * corners);
        let mut weights = Vec::with_capacity(nodes * rc * corners);
        let mut cost = Vec::with_capacity(nodes);
        for node in 0..nodes {
            let z = grid.node_coords(node);
            cost.push(cost_scale * env.cost_flat(&z));
            for a in &rates.rates {
                let foot = foot_point(env, &z, a, step);
                grid.stencil_into(&foot, &strides, &mut idx, &mut weights);
            }
        }
        Ok(Self {
            nodes,
            rate_count: rc,
            corners,
            idx,
            weights,
            cost,
            discount,
        })
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    /// Continuation value of `rate` at `node` under `q`.
    #[inline]
    fn continuation(&self, q: &[f64], node: usize, rate: usize) -> f64 {
        let start = (node * self.rate_count + rate) * self.corners;
        let end = start + self.corners;
        self.idx[start..end]
            .iter()
            .zip(&self.weights[start..end])
            .map(|(&i, w)| w * q[i as usize])
            .sum()
    }

    /// `out = T q` (one Jacobi sweep).
    pub fn apply(&self, q: &[f64], out: &mut [f64]) {
        assert_eq!(q.len(), self.nodes);
        assert_eq!(out.len(), self.nodes);
        for (node, o) in out.iter_mut().enumerate() {
            let mut best = f64::INFINITY;
            for r in 0..self.rate_count {
                let c = self.continuation(q, node, r);
                if c < best {
                    best = c;
                }
            }
            *o = self.cost[node] + self.discount * best;
        }
    }

    /// Index of the rate attaining the minimum at `node` (smallest index on ties).
    pub fn argmin(&self, q: &[f64], node: usize) -> usize {
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for r in 0..self.rate_count {
            let c = self.continuation(q, node, r);
            if c < best {
                best = c;
                arg = r;
            }
        }
        arg
    }
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Value iteration settings for [`solve_infinite`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationControl {
    /// Stop once the sup-norm update falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IterationControl {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 1_000_000,
        }
    }
}

/// Fixed point of the discounted semi-Lagrangian operator, by Jacobi value
/// iteration from `Q = 0`.
pub fn solve_infinite(
    env: &EnvironmentSpec,
    grid: &GridSpec,
    delta: f64,
    rates: &ControlRateSet,
    control: IterationControl,
) -> Result<GridSolution, OracleError> {
    solve_infinite_from(env, grid, delta, rates, control, None)
}

/// As [`solve_infinite`], starting the iteration from `initial` when given.
pub fn solve_infinite_from(
    env: &EnvironmentSpec,
    grid: &GridSpec,
    delta: f64,
    rates: &ControlRateSet,
    control: IterationControl,
    initial: Option<&[f64]>,
) -> Result<GridSolution, OracleError> {
    if grid.time.is_some() {
        return Err(OracleError::InvalidGrid(
            "infinite-horizon grids must not have a time axis".into(),
        ));
    }
    if !(control.tol > 0.0) {
        return Err(OracleError::InvalidArgument("tol must be > 0".into()));
    }
    let op = SemiLagrangianOperator::infinite(env, grid, rates, delta)?;
    let nodes = grid.node_count();
    let mut q = match initial {
        Some(init) if init.len() == nodes => init.to_vec(),
        Some(init) => {
            return Err(OracleError::InvalidArgument(format!(
                "initial guess has {} values for {nodes} nodes",
                init.len()
            )))
        }
        None => vec![0.0; nodes],
    };
    let mut next = vec![0.0; nodes];
    let mut history = Vec::new();
    let mut update = f64::INFINITY;
    let mut converged = false;
    for sweep in 0..control.max_iter {
        op.apply(&q, &mut next);
        update = sup_diff(&q, &next);
        if !update.is_finite() {
            return Err(OracleError::NonFinite(sweep));
        }
        history.push(update);
        std::mem::swap(&mut q, &mut next);
        if update < control.tol {
            converged = true;
            break;
        }
    }
    let solution = GridSolution {
        spec: grid.clone(),
        meta: SolutionMeta {
            horizon: Horizon::Infinite,
            env: env.clone(),
            gamma: env.gamma,
            rate_bound: env.rate_bound,
            delta,
            rates: rates.clone(),
            iterations: history.len(),
            final_update: update,
            converged,
            terminal: None,
        },
        values: q,
        history,
    };
    if converged {
        Ok(solution)
    } else {
        Err(OracleError::NotConverged {
            iterations: solution.meta.iterations,
            last_update: update,
            partial: Box::new(solution),
        })
    }
}

/// Finite-horizon problem: the environment's running cost (undiscounted)
/// plus a terminal cost `q(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteHorizonProblem {
    pub env: EnvironmentSpec,
    pub terminal: TerminalCost,
}

/// Backward time marching from `Q(., T) = q`. The grid must carry a time axis.
pub fn solve_finite(
    problem: &FiniteHorizonProblem,
    grid: &GridSpec,
    rates: &ControlRateSet,
) -> Result<GridSolution, OracleError> {
    let env = &problem.env;
    let time = grid
        .time
        .ok_or_else(|| OracleError::InvalidGrid("finite horizon needs a time axis".into()))?;
    grid.validate()?;
    let dt = time.dt();
    let op = SemiLagrangianOperator::finite(env, grid, rates, dt)?;
    let nodes = grid.node_count();
    let slices = time.steps + 1;
    let mut values = vec![0.0; nodes * slices];
    {
        let last = &mut values[time.steps * nodes..];
        for (node, v) in last.iter_mut().enumerate() {
            let z = grid.node_coords(node);
            *v = problem.terminal.eval(&z[..env.n]);
        }
    }
    let mut history = Vec::with_capacity(time.steps);
    for k in (0..time.steps).rev() {
        let (head, tail) = values.split_at_mut((k + 1) * nodes);
        let later = &tail[..nodes];
        let now = &mut head[k * nodes..];
        op.apply(later, now);
        if now.iter().any(|v| !v.is_finite()) {
            return Err(OracleError::NonFinite(time.steps - k));
        }
        history.push(sup_diff(now, later));
    }
    Ok(GridSolution {
        spec: grid.clone(),
        meta: SolutionMeta {
            horizon: Horizon::Finite,
            env: env.clone(),
            gamma: env.gamma,
            rate_bound: env.rate_bound,
            delta: dt,
            rates: rates.clone(),
            iterations: time.steps,
            final_update: history.last().copied().unwrap_or(0.0),
            converged: true,
            terminal: Some(problem.terminal),
        },
        values,
        history,
    })
}

/// Greedy feedback from an infinite-horizon grid solution: the rate whose
/// interpolated continuation value is smallest (first listed on ties).
#[derive(Clone, Debug)]
pub struct GreedyGridPolicy<'a> {
    sol: &'a GridSolution,
    rates: &'a ControlRateSet,
}

impl GreedyGridPolicy<'_> {
    pub fn rate_index(&self, z: &[f64]) -> usize {
        let env = &self.sol.meta.env;
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for (i, a) in self.rates.rates.iter().enumerate() {
            let foot = foot_point(env, z, a, self.sol.meta.delta);
            let c = self.sol.interpolate(&foot);
            if c < best {
                best = c;
                arg = i;
            }
        }
        arg
    }

    pub fn rate(&self, z: &[f64]) -> &[f64] {
        &self.rates.rates[self.rate_index(z)]
    }
}

impl Policy for GreedyGridPolicy<'_> {
    fn control_rate(&mut self, z: &[f64], a: &mut [f64]) {
        a.copy_from_slice(self.rate(z));
    }
}

pub fn greedy_policy<'a>(
    sol: &'a GridSolution,
    rates: &'a ControlRateSet,
) -> Result<GreedyGridPolicy<'a>, OracleError> {
    if sol.meta.horizon != Horizon::Infinite {
        return Err(OracleError::InvalidArgument(
            "greedy policy needs an infinite-horizon solution".into(),
        ));
    }
    rates.validate(sol.meta.env.m, sol.meta.rate_bound)?;
    Ok(GreedyGridPolicy { sol, rates })
}

/// Solves the infinite-horizon problem for each bound in `bounds`
/// (strictly increasing), each with its own rate set and the common step
/// `delta`. Each solve is warm-started from the previous solution.
pub fn monotonicity_in_m(
    env: &EnvironmentSpec,
    grid: &GridSpec,
    bounds: &[f64],
    delta: f64,
    rates_per_bound: &[ControlRateSet],
    control: IterationControl,
) -> Result<Vec<GridSolution>, OracleError> {
    if bounds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(OracleError::InvalidArgument("M values must be strictly increasing".into()));
    }
    if bounds.len() != rates_per_bound.len() {
        return Err(OracleError::InvalidArgument("one rate set per M value required".into()));
    }
    let mut out: Vec<GridSolution> = Vec::with_capacity(bounds.len());
    for (&bound, rates) in bounds.iter().zip(rates_per_bound) {
        let mut e = env.clone();
        e.rate_bound = bound;
        let init = out.last().map(|s| s.values.as_slice());
        out.push(solve_infinite_from(&e, grid, delta, rates, control, init)?);
    }
    Ok(out)
}

/// Largest `|Q(z) - (T Q)(z)|` over `nodes`.
pub fn dpp_residual(op: &SemiLagrangianOperator, q: &[f64], nodes: &[usize]) -> f64 {
    let mut tq = vec![0.0; q.len()];
    op.apply(q, &mut tq);
    nodes
        .iter()
        .map(|&i| (q[i] - tq[i]).abs())
        .fold(0.0, f64::max)
}

/// Largest difference between two solutions over a probe set: with a
/// first-order scheme and a factor-two refinement this estimates the error
/// of the finer solution.
pub fn refinement_gap(fine: &GridSolution, coarse: &GridSolution, probes: &[Vec<f64>]) -> f64 {
    probes
        .iter()
        .map(|p| (fine.interpolate(p) - coarse.interpolate(p)).abs())
        .fold(0.0, f64::max)
}
