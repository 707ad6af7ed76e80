//! Numerical laboratory for information-conserving dynamics.
//!
//! The information content of a probability density ρ is measured against a density of
//! states μ as 𝔍nf[ρ] = ∫ ρ log(ρ/μ). The crate checks, on finite grids and ensembles,
//! that a law conserves 𝔍nf exactly when it moves states along μ-incompressible
//! trajectories (∇·(μẋ) = 0), and that coarse-grained information still decays:
//!
//! - [`statespace`]: boxes, grids, cell masks, μ and grid densities.
//! - [`entropy`]: the information functional and Boltzmann's |log N_ω|.
//! - [`discrete`]: column-stochastic propagators; conservation ⇔ μ-preserving permutation.
//! - [`flow`]: trajectories, μ-divergence, stream-function laws, density transport,
//!   volume checks.
//! - [`coarse`]: cell averaging and the coarse-grained H-theorem diagnostics.
//! - [`quantum`]: box eigenmode superpositions, guidance trajectories, relaxation to |ψ|².
//! - [`cli`]: scenario files and batch runs behind the `infoflow` binary.
//!
//! Kernels are generic over [`Scalar`] (`f32`/`f64`); the aliases below fix `f64`.

pub mod cli;
pub mod coarse;
pub mod discrete;
pub mod entropy;
pub mod error;
pub mod flow;
pub mod quantum;
pub mod rng;
pub mod scalar;
pub mod statespace;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type StateSpace64 = statespace::StateSpace<f64>;
pub type Grid64 = statespace::Grid<f64>;
pub type GridDensity64 = statespace::GridDensity<f64>;
pub type DensityOfStates64 = statespace::DensityOfStates<f64>;
pub type InfoValue64 = entropy::InfoValue<f64>;
pub type DiscretePropagator64 = discrete::DiscretePropagator<f64>;
pub type DiscreteStateSpace64 = discrete::DiscreteStateSpace<f64>;
pub type VelocityField64 = flow::VelocityField<f64>;
pub type Trajectory64 = flow::Trajectory<f64>;
pub type ModeSet2D64 = quantum::ModeSet2D<f64>;
