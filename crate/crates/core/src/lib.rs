//! Numerical laboratory for gradient interface models on the periodic lattice.
//!
//! The crate samples the Gibbs measure `exp(-Σ_e V(∇φ(e)))` on mean-zero
//! height functions of the torus `(Z/(2L+1)Z)^d`, runs the associated
//! Langevin dynamics, solves the parabolic equation in the resulting dynamic
//! environment, and checks the identities and inequalities that connect the
//! two.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dynamics;
pub mod error;
pub mod estimators;
pub mod heat_kernel;
pub mod inequalities;
pub mod lattice;
pub mod moderation;
pub mod potential;
pub mod quad;
pub mod rng;
pub mod spectral_oracle;
pub mod stats;

pub use dynamics::{Correction, DtPolicy, EnvironmentTrajectory, EvolveParams, LangevinConfig};
pub use error::{Error, Result};
pub use estimators::EstimateReport;
pub use inequalities::ExponentTable;
pub use lattice::{EdgeField, LatticeField, Torus};
pub use moderation::{MaximalDiagnostics, ModerationWeights};
pub use potential::{PotentialConfig, PotentialSpec};
