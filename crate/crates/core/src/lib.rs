//! Continuous-time Q-learning for control-rate-constrained systems.
//!
//! The controller treats its current control value `u` as part of the state
//! and chooses the rate `a = du/dt` with `|a| <= M`. The Q-function `Q(x, u)`
//! is learned from short rollouts with a target network ([`learner`]), and a
//! semi-Lagrangian grid solver of the corresponding HJB equation
//! ([`hjb_oracle`]) provides a reference solution in low dimension.
//!
//! Runnable walkthroughs live in `examples/`; the `ctql` binary wraps the
//! same functionality in `train`, `eval`, `solve-hjb` and `compare`
//! subcommands (see [`cli`]).

pub mod cli;
pub mod config;
pub mod env;
pub mod hjb_oracle;
pub mod io;
pub mod learner;
pub mod odeint;
pub mod qnet;
pub mod rng;

pub use env::{AugmentedState, CostKind, EnvironmentSpec, Matrix};
pub use odeint::{IntegratorConfig, Policy, RolloutResult};
pub use qnet::{AdamState, Checkpoint, QNetwork, TargetParams};
pub use rng::RngState;
