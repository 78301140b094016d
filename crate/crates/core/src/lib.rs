//! Numerical laboratory for closed-loop optimality of predictive control.
//!
//! Builds small stochastic control problems, solves them exactly by tabular
//! dynamic programming or Riccati recursions, runs model-based and data-driven
//! predictive controllers against the exact solution, and quantifies when the
//! receding-horizon policies are (or fail to be) closed-loop optimal.

pub mod analyzer;
pub mod cost;
pub mod ddpc;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod mdp;
pub mod model;
pub mod mpc;
pub mod noise;
pub mod quad;
pub mod solver;
pub mod table;
pub mod window;

pub use cost::{AffineRow, Constraint, StageCost};
pub use dynamics::{Drift, KernelEntry, KernelSpec, Transition};
pub use error::{Error, Result};
pub use grid::{Axis, AxisSpec, Grid};
pub use mdp::{
    estimate_performance, estimate_steady_state, rollout, stream_rng, FnPolicy, LinearFeedback,
    MdpSpec, PerformanceEstimate, Policy, SteadyStateReport, StochasticLinearSystem, TabularMdp,
    Trajectory, ZeroPolicy,
};
pub use noise::TruncatedGaussian;
pub use table::{GreedyQPolicy, PolicyTable, QTable, ValueTable};
