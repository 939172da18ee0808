//! Distributed estimation over adaptive networks.
//!
//! A network of nodes cooperates to minimize an aggregate cost
//! `J(w) = sum_l J_l(w)` where each node only ever evaluates its own local
//! cost, exchanges intermediate estimates with its neighbors, and keeps
//! adapting from streaming data. The crate provides:
//!
//! - [`graph`]: network topologies and the combination weights that govern
//!   how nodes blend neighbor information,
//! - [`costs`]: the local cost models (regression with and without a sparsity
//!   penalty, range-based localization) together with their exact and
//!   stochastic gradients,
//! - [`strategies`]: the synchronous update rules themselves (adapt-then-combine,
//!   combine-then-adapt, consensus, incremental, non-cooperative),
//! - [`theory`]: closed-form mean-square performance predictions and stability
//!   bounds for small constant step-sizes,
//! - [`harness`]: trial-averaged experiments, parameter sweeps, moving-target
//!   tracking, and CSV/JSON artifact output.

pub mod costs;
pub mod graph;
pub mod harness;
pub mod rng;
pub mod strategies;
pub mod theory;
