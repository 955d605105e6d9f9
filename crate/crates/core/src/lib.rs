//! Desk-scale laboratory for safety-constrained reinforcement learning.
//!
//! The crate trains deterministic-policy agents on toy constrained MDPs and
//! studies how a *conservative* safety critic behaves when its conservatism is
//! modulated by a per-sample epistemic-uncertainty estimate instead of being
//! applied uniformly. Everything runs in `f64` on a single thread per run so
//! results are bit-for-bit reproducible from a 64-bit seed.
//!
//! Module map:
//!
//! * [`diffnet`] — dense feed-forward networks with exact reverse-mode
//!   gradients, Adam, soft target updates, and text checkpoints.
//! * [`envs`] — kinematic point-mass tasks with hazard-contact and
//!   velocity-threshold costs, plus ground-truth cost fields.
//! * [`replay`] — FIFO replay buffer, uniform minibatch sampling, and exact
//!   k-nearest-neighbour search under running feature standardization.
//! * [`critics`] — temporal-difference losses for reward and safety critics,
//!   including the weighted conservative (log-sum-exp) penalty.
//! * [`uncertainty`] — damped Gauss–Newton influence scores, uncertainty-
//!   adjusted conservatism weights, and trust-region refinement targets.
//! * [`agent`] — Ornstein–Uhlenbeck exploration, safety screening of actions,
//!   the Lagrangian actor loss, dual updates, and the training loop.
//! * [`eval`] — cost-map prediction and comparison metrics, calibration
//!   curves, risk–coverage sweeps, a Monte-Carlo check of the conservatism
//!   lower bound, and deployment rollouts.
//! * [`config`] / [`harness`] — JSON run configuration and the command-level
//!   entry points that write run directories (manifest, CSVs, checkpoints).

pub mod agent;
pub mod config;
pub mod critics;
pub mod diffnet;
pub mod envs;
pub mod error;
pub mod eval;
pub mod harness;
pub mod replay;
pub mod rng;
pub mod uncertainty;

pub use error::{Error, Result};
