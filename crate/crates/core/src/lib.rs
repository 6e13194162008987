//! Preference learning under heterogeneous annotators.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix the scalar for application code.

pub mod datasets;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod optim;
pub mod preference;
pub mod scalar;
pub mod survey;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
pub use preference::{Link, PairwiseMatrix, Policy, RewardTable, SamplingDistribution, Scope, UserPopulation};
pub use scalar::Real;

pub type Link64 = Link<f64>;
pub type RewardTable64 = RewardTable<f64>;
pub type Policy64 = Policy<f64>;
pub type UserPopulation64 = UserPopulation<f64>;
pub type PairwiseMatrix64 = PairwiseMatrix<f64>;
pub type SamplingDistribution64 = SamplingDistribution<f64>;
pub type RewardTable32 = RewardTable<f32>;
pub type Policy32 = Policy<f32>;
