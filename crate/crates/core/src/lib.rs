//! Deep polynomial chaos expansion.
//!
//! A [`CircuitModel`] is a layered circuit whose leaves are polynomial chaos
//! expansions over small, disjoint input scopes. Leaves are merged pairwise
//! by Hadamard products followed by affine sum layers, so the model can be
//! trained like an ordinary neural regressor ([`training`]) while keeping
//! the structure that makes means, covariances, conditional moments and
//! first-order Sobol indices computable in closed form ([`inference`]).
//!
//! The crate also contains the classical single-level expansion
//! ([`shallow`]), Monte Carlo validation tooling ([`montecarlo`]) and
//! benchmark data generators and file formats ([`data`]).

// `!(x > 0.0)` is used on purpose so NaN fails validation too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod circuit;
pub mod data;
pub mod error;
pub mod inference;
pub mod montecarlo;
pub mod orthopoly;
pub mod rng;
pub mod shallow;
pub mod training;

pub use basis::{MultiIndex, MultiIndexSet};
pub use circuit::{CircuitModel, ModelConfig, RegionGraph};
pub use data::Dataset;
pub use error::{Error, Result};
pub use inference::{ConditionSpec, ExactInference, MomentState};
pub use orthopoly::{FamilyKind, PolyFamily, QuadratureRule};
pub use shallow::{ShallowPce, SobolIndices};
pub use training::{TrainConfig, TrainReport};
