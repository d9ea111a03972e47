//! Two-player zero-sum Markov games played in context.
//!
//! The crate has three layers:
//!
//! * classical learners for finite-horizon zero-sum games: exponential
//!   weights on matrix games ([`no_regret`]), optimistic value iteration
//!   with a coarse-correlated-equilibrium subroutine ([`vi_ulcb`]), and
//!   decentralized V-learning ([`v_learning`]);
//! * a masked ReLU-attention transformer ([`transformer`]) with hand-written
//!   reverse-mode gradients and maximum-likelihood pretraining ([`pretrain`])
//!   on trajectories collected from those learners ([`dataset`]);
//! * hand-constructed transformer weights that reproduce the exponential
//!   weights subroutine, value aggregation, and policy lookup exactly
//!   ([`realization`]), verified against the direct implementations.
//!
//! Numeric code is generic over [`Scalar`]; everything game-facing uses the
//! [`Real`] alias.

pub mod dataset;
pub mod equilibrium;
pub mod error;
pub mod game;
pub mod no_regret;
pub mod pretrain;
pub mod realization;
pub mod scalar;
pub mod transformer;
pub mod util;
pub mod v_learning;
pub mod vi_ulcb;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete scalar used by the game-facing layers. All tolerances in the
/// test suite are stated for this type.
pub type Real = f64;

/// Token matrix over [`Real`].
pub type TokenMatrixR = transformer::TokenMatrix<Real>;

/// Transformer parameters over [`Real`].
pub type TransformerParamsR = transformer::TransformerParams<Real>;
