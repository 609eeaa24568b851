//! Power-maximizing search over two-stage adaptive seamless clinical
//! trial designs.
//!
//! The toolkit couples a Monte Carlo simulator of two-stage designs with
//! interim treatment selection and closed testing to three optimization
//! strategies over the hierarchical design space: exhaustive grid search,
//! Bayesian optimization with a Gaussian-process surrogate and the
//! augmented expected improvement, and a variant that snaps the BO result
//! onto the grid. Everything is deterministic given a master seed.
//!
//! See the `examples/` directory for one runnable example per capability,
//! from estimating the power of a single design up to full method
//! comparisons, and the `trialopt` binary for the scenario runner.

pub mod acquisition;
pub mod allocation;
pub mod cli;
pub mod design_space;
pub mod error;
pub mod optimizer;
pub mod seed;
pub mod stats;
pub mod surrogate;
pub mod trial_sim;

pub use error::{Error, Result};
