//! Controlled linear systems with quadratic running cost.
//!
//! The augmented state `z = (x, u)` treats the current control value as part
//! of the state; its time derivative `a = du/dt` is the actual input and is
//! bounded by the control-rate bound `M`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, FlatConfig};
use crate::rng::{streams, RngState};

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid environment: {0}")]
    Invalid(String),
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = s;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, EnvError> {
        if data.len() != rows * cols {
            return Err(EnvError::DimensionMismatch {
                what: "matrix data",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `out += self * v`
    #[inline]
    pub fn mul_add_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (row, o) in self.data.chunks_exact(self.cols).zip(out.iter_mut()) {
            *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
}

impl AugmentedState {
    pub fn new(x: Vec<f64>, u: Vec<f64>) -> Self {
        Self { x, u }
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self::new(vec![0.0; n], vec![0.0; m])
    }

    /// Splits a flat `[x; u]` vector.
    pub fn from_flat(z: &[f64], n: usize) -> Self {
        Self::new(z[..n].to_vec(), z[n..].to_vec())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.x.len() + self.u.len());
        z.extend_from_slice(&self.x);
        z.extend_from_slice(&self.u);
        z
    }

    pub fn norm(&self) -> f64 {
        self.x
            .iter()
            .chain(&self.u)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Running cost family. Only the quadratic cost is used in experiments; the
/// zero cost is a test fixture whose Q-function vanishes identically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Quadratic,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub n: usize,
    pub m: usize,
    pub a: Matrix,
    pub b: Matrix,
    pub gamma: f64,
    /// Control-rate bound `M`.
    pub rate_bound: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub cost: CostKind,
}

impl EnvironmentSpec {
    /// Builds and validates an environment with the default `[-1, 1]` sampling box.
    pub fn linear(a: Matrix, b: Matrix, gamma: f64, rate_bound: f64) -> Result<Self, EnvError> {
        let env = Self {
            n: a.rows,
            m: b.cols,
            a,
            b,
            gamma,
            rate_bound,
            x_min: -1.0,
            x_max: 1.0,
            u_min: -1.0,
            u_max: 1.0,
            cost: CostKind::Quadratic,
        };
        env.validate()?;
        Ok(env)
    }

    /// `dx/dt = u` in one dimension with `gamma = 0.1`, `M = 1`.
    pub fn lqr1d() -> Self {
        Self::linear(Matrix::zeros(1, 1), Matrix::identity(1), 0.1, 1.0)
            .expect("preset is valid")
    }

    /// Random LQR instance: `A_ij = 0.1 X_ij`, `B_ij = 5 Y_ij` with
    /// `X, Y ~ U[0, 1)` drawn from the seed's matrix stream (all of `A`
    /// row-major first, then `B`).
    pub fn random_lqr(n: usize, m: usize, seed: u64) -> Result<Self, EnvError> {
        if n == 0 || m == 0 {
            return Err(EnvError::Invalid("n and m must be positive".into()));
        }
        let mut rng = RngState::stream(seed, streams::LQR_MATRICES);
        let a: Vec<f64> = (0..n * n).map(|_| 0.1 * rng.uniform()).collect();
        let b: Vec<f64> = (0..n * m).map(|_| 5.0 * rng.uniform()).collect();
        Self::linear(
            Matrix::from_row_major(n, n, a)?,
            Matrix::from_row_major(n, m, b)?,
            0.1,
            1.0,
        )
    }

    pub fn with_cost(mut self, cost: CostKind) -> Self {
        self.cost = cost;
        self
    }

    pub fn with_box(mut self, x_min: f64, x_max: f64, u_min: f64, u_max: f64) -> Self {
        self.x_min = x_min;
        self.x_max = x_max;
        self.u_min = u_min;
        self.u_max = u_max;
        self
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.n == 0 || self.m == 0 {
            return Err(EnvError::Invalid("n and m must be positive".into()));
        }
        if self.a.rows != self.n || self.a.cols != self.n {
            return Err(EnvError::DimensionMismatch {
                what: "A",
                expected: self.n * self.n,
                got: self.a.rows * self.a.cols,
            });
        }
        if self.b.rows != self.n || self.b.cols != self.m {
            return Err(EnvError::DimensionMismatch {
                what: "B",
                expected: self.n * self.m,
                got: self.b.rows * self.b.cols,
            });
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(EnvError::Invalid(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.rate_bound >= 0.0 && self.rate_bound.is_finite()) {
            return Err(EnvError::Invalid(format!("M must be >= 0, got {}", self.rate_bound)));
        }
        if !(self.x_min < self.x_max) || !(self.u_min < self.u_max) {
            return Err(EnvError::Invalid("sampling box must satisfy min < max".into()));
        }
        if self.a.data.iter().chain(&self.b.data).any(|v| !v.is_finite()) {
            return Err(EnvError::Invalid("A and B must be finite".into()));
        }
        Ok(())
    }

    pub fn augmented_dim(&self) -> usize {
        self.n + self.m
    }

    pub fn check_state(&self, z: &AugmentedState) -> Result<(), EnvError> {
        if z.x.len() != self.n {
            return Err(EnvError::DimensionMismatch {
                what: "state x",
                expected: self.n,
                got: z.x.len(),
            });
        }
        if z.u.len() != self.m {
            return Err(EnvError::DimensionMismatch {
                what: "control u",
                expected: self.m,
                got: z.u.len(),
            });
        }
        Ok(())
    }

    /// `f(x, u) = A x + B u`.
    pub fn dynamics_eval(&self, z: &AugmentedState) -> Result<Vec<f64>, EnvError> {
        self.check_state(z)?;
        let mut out = vec![0.0; self.n];
        self.dynamics_into(&z.x, &z.u, &mut out);
        Ok(out)
    }

    /// Unchecked `out = A x + B u`.
    #[inline]
    pub fn dynamics_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        self.a.mul_add_into(x, out);
        self.b.mul_add_into(u, out);
    }

    /// `r(x, u) = |x|^2 + |u|^2`.
    pub fn running_cost(&self, z: &AugmentedState) -> Result<f64, EnvError> {
        self.check_state(z)?;
        Ok(self.cost_at(&z.x, &z.u))
    }

    #[inline]
    pub fn cost_at(&self, x: &[f64], u: &[f64]) -> f64 {
        match self.cost {
            CostKind::Quadratic => {
                x.iter().map(|v| v * v).sum::<f64>() + u.iter().map(|v| v * v).sum::<f64>()
            }
            CostKind::Zero => 0.0,
        }
    }

    /// Cost at a flat `[x; u]` vector.
    #[inline]
    pub fn cost_flat(&self, z: &[f64]) -> f64 {
        self.cost_at(&z[..self.n], &z[self.n..])
    }

    /// `count` points uniform on `[x_min, x_max]^n x [u_min, u_max]^m`.
    pub fn sample_domain(
        &self,
        count: usize,
        rng: &mut RngState,
    ) -> Result<Vec<AugmentedState>, EnvError> {
        self.validate()?;
        Ok((0..count)
            .map(|_| {
                let x = (0..self.n)
                    .map(|_| rng.uniform_in(self.x_min, self.x_max))
                    .collect();
                let u = (0..self.m)
                    .map(|_| rng.uniform_in(self.u_min, self.u_max))
                    .collect();
                AugmentedState::new(x, u)
            })
            .collect())
    }

    pub fn in_domain(&self, z: &AugmentedState) -> bool {
        z.x.iter().all(|v| (self.x_min..=self.x_max).contains(v))
            && z.u.iter().all(|v| (self.u_min..=self.u_max).contains(v))
    }

    /// Config keys understood by [`EnvironmentSpec::from_config`].
    pub const CONFIG_KEYS: &'static [&'static str] = &[
        "preset", "n", "m", "seed", "gamma", "M", "x_min", "x_max", "u_min", "u_max", "A", "B",
        "cost",
    ];

    /// Builds an environment from a flat config.
    ///
    /// `preset=lqr1d` (the default) gives the one-dimensional integrator,
    /// `preset=lqr_random` draws `A`, `B` from `seed`. Scalar keys override the
    /// preset values, and `A` / `B` may be given inline as row-major lists.
    pub fn from_config(cfg: &FlatConfig) -> Result<Self, ConfigError> {
        let preset = cfg.get("preset").unwrap_or("lqr1d");
        let mut env = match preset {
            "lqr1d" => {
                let n = cfg.parsed_or("n", 1usize)?;
                let m = cfg.parsed_or("m", 1usize)?;
                if n != 1 || m != 1 {
                    return Err(ConfigError::invalid("preset", preset, "lqr1d requires n=m=1"));
                }
                Self::lqr1d()
            }
            "lqr_random" => {
                let n: usize = cfg.required("n")?;
                let m: usize = cfg.required("m")?;
                let seed = cfg.parsed_or("seed", 0u64)?;
                Self::random_lqr(n, m, seed)
                    .map_err(|e| ConfigError::invalid("preset", preset, e.to_string()))?
            }
            "custom" => {
                let n: usize = cfg.required("n")?;
                let m: usize = cfg.required("m")?;
                let mut env = Self::lqr1d();
                env.n = n;
                env.m = m;
                env.a = Matrix::zeros(n, n);
                env.b = Matrix::zeros(n, m);
                env
            }
            other => {
                return Err(ConfigError::invalid(
                    "preset",
                    other,
                    "expected lqr1d, lqr_random or custom",
                ))
            }
        };
        if let Some(a) = cfg.float_list("A")? {
            let raw = cfg.get("A").unwrap_or_default();
            env.a = Matrix::from_row_major(env.n, env.n, a)
                .map_err(|e| ConfigError::invalid("A", raw, e.to_string()))?;
        }
        if let Some(b) = cfg.float_list("B")? {
            let raw = cfg.get("B").unwrap_or_default();
            env.b = Matrix::from_row_major(env.n, env.m, b)
                .map_err(|e| ConfigError::invalid("B", raw, e.to_string()))?;
        }
        env.gamma = cfg.parsed_or("gamma", env.gamma)?;
        env.rate_bound = cfg.parsed_or("M", env.rate_bound)?;
        env.x_min = cfg.parsed_or("x_min", env.x_min)?;
        env.x_max = cfg.parsed_or("x_max", env.x_max)?;
        env.u_min = cfg.parsed_or("u_min", env.u_min)?;
        env.u_max = cfg.parsed_or("u_max", env.u_max)?;
        if let Some(cost) = cfg.get("cost") {
            env.cost = match cost {
                "quadratic" => CostKind::Quadratic,
                "zero" => CostKind::Zero,
                other => {
                    return Err(ConfigError::invalid("cost", other, "expected quadratic or zero"))
                }
            };
        }
        env.validate()
            .map_err(|e| ConfigError::invalid("preset", preset, e.to_string()))?;
        Ok(env)
    }
}
