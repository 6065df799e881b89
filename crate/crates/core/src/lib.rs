//! Lifelong-learning engine built around one mechanism: per-weight
//! consolidation on a dynamically expanding columnar network.
//!
//! Every weight `θ_i` carries a consolidation strength `b_i ≥ 0` and a target
//! value. Training minimizes the data loss plus `Σ b_i (θ_i − θ_i_target)²`,
//! so a large `b_i` pins a weight near its target ("frozen") while `b_i = 0`
//! leaves it free ("unfrozen"). A weight can also be masked, which excludes
//! it from updates entirely. All higher-level behaviours — learning new tasks
//! without forgetting, forward/backward transfer, drift adaptation, confusion
//! reduction, graceful forgetting, curricula, frozen random features — are
//! policies that edit consolidation state and grow the network.
//!
//! The numeric core is generic over the scalar type (any [`Scalar`], i.e.
//! `f32` or `f64`); the crate root exports `f64` aliases which the policy and
//! task layers use throughout so that bit-identity contracts are meaningful.

pub mod consolidation;
pub mod error;
pub mod expansion;
pub mod matrix;
pub mod metrics;
pub mod net;
pub mod persist;
pub mod policies;
pub mod scalar;
pub(crate) mod seed;
pub mod tasks;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Network with the default 64-bit scalar.
pub type Network = net::ColumnarNetwork<f64>;
/// Consolidation state with the default 64-bit scalar.
pub type Consolidation = consolidation::ConsolidationState<f64>;
/// Gradient with the default 64-bit scalar.
pub type Gradient = net::Gradient<f64>;
/// Forward trace with the default 64-bit scalar.
pub type Trace = net::ForwardTrace<f64>;
/// Sample batch with the default 64-bit scalar.
pub type Batch = matrix::Matrix<f64>;
