#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

//! Simulation and large-deviation analysis of multidimensional
//! state-dependent Poisson shot noise.
//!
//! * [`model`]: shot-noise models on finite atomic mark spaces.
//! * [`simulate`]: Poisson random measures, scaled paths and likelihood weights.
//! * [`fluid`]: controls, the entropy cost and the controlled fluid limit.
//! * [`ratefn`]: the sample-path rate function by constrained optimization.
//! * [`mc`]: naive and importance-sampled rare-event estimation.
//! * [`verify`]: end-to-end oracle checks used by the CLI.

pub mod error;
pub mod fluid;
pub mod io;
mod linalg;
pub mod mc;
pub mod model;
mod optim;
pub mod ratefn;
pub mod simulate;
pub mod verify;

pub use error::{Error, Result};
pub use fluid::{cost_lt, ell, solve_controlled_ode, Control, FluidOptions, FluidSolution};
pub use mc::{
    estimate_is, estimate_naive, ldp_decay_table, poisson_tail_exact, DecayMethod, DecayTable, McOptions, McReport,
    ThresholdSet,
};
pub use model::{validate_model, Atom, CheckGrid, MarkSpace, ModelConfig, ShotNoiseModel};
pub use ratefn::{export_tilt, legendre_oracle, minimize_rate, RateConstraint, RateOptions, RateResult};
pub use simulate::{evolve_scaled_path, likelihood_weight, simulate_prm, EventSet, Path};
