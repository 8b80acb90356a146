//! Solver library for the multi-hop relay pricing game.
//!
//! Relays announce pricing functions to their predecessors, every node routes
//! the flow it receives at minimum cost, and a pricing profile is an
//! equilibrium when no relay gains by changing its announcement. The crate
//! computes socially optimal routings, constructs and verifies equilibria and
//! measures how far equilibria are from the optimum.
//!
//! The function algebra in [`marginals`] is generic over the float type; the
//! game layers above it work in `f64` through the aliases below.

// `!(x > 0.0)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod flow;
pub mod game;
pub mod io;
pub mod marginals;
pub mod network;
pub mod scalar;

pub use error::{Error, Result};
pub use network::{EdgeId, NodeId, Network};
pub use scalar::Scalar;

/// Piecewise-linear marginal over `f64`.
pub type MarginalFn = marginals::Marginal<f64>;
/// Integral of a [`MarginalFn`].
pub type CostFn = marginals::CostIntegral<f64>;
/// Infimal convolution over `f64`.
pub type Convolution = marginals::InfConvolution<f64>;
/// Linear piece over `f64`.
pub type Segment = marginals::Segment<f64>;

/// Numeric settings shared by the solvers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Settings {
    /// Number of grid steps across a flow range (infimal convolution fallback and verification).
    pub grid: usize,
    /// Absolute tolerance on costs.
    pub tol: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings { grid: 2000, tol: 1e-5 }
    }
}

impl Settings {
    pub fn step(&self, range: f64) -> f64 {
        range / self.grid.max(1) as f64
    }
}
