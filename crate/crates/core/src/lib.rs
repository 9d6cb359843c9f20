//! Stochastic resource-sharing model of EV charging on radial distribution
//! grids.
//!
//! EVs arrive at charging stations on a radial feeder, each with a random
//! energy requirement and a random parking time. Uncharged vehicles share
//! the deliverable power of the grid through a utility-maximizing control
//! (weighted proportional fairness and relatives), subject to node load
//! limits and voltage-drop constraints under either a linearized Distflow
//! or a simplified AC load-flow model.
//!
//! The crate provides:
//! - [`grid`]: radial network topology, parameters, path/subtree queries,
//!   CSV ingestion.
//! - [`stochastics`]: joint (charge, parking) distribution families, the
//!   effective arrival rates, and the throughput transform `g` with its
//!   inverse.
//! - [`loadflow`]: linearized Distflow voltages and the simplified AC model
//!   with losses, plus the domination check between them.
//! - [`allocator`]: the instantaneous power allocation, solved by a
//!   log-barrier interior method for both load-flow models, with closed
//!   forms for log utilities on line networks.
//! - [`fluid`]: transient fluid dynamics (Picard iteration), the invariant
//!   point via a concave program in node powers, the explicit Markovian
//!   solution, and diagnostics.
//! - [`simulator`]: discrete-event simulation of the stochastic model with
//!   blocking and deadlines.
//! - [`productform`]: the explicit stationary distribution for unweighted
//!   proportional fairness on a line.
//! - [`weights`]: optimal weight selection in overload (knapsack,
//!   Pareto-ratio convex program, Markov-inequality lower bound).

pub mod allocator;
pub mod error;
pub mod fluid;
pub mod grid;
pub mod loadflow;
pub mod productform;
pub mod simulator;
pub mod stochastics;
pub mod weights;

mod acsys;
mod solver;

pub use error::{Error, Result};
