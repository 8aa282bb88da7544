//! Numerical toolkit for stochastic exit-time optimal control.
//!
//! The value function of an exit-time control problem, defined through a
//! BSDE with random terminal time, is computed two independent ways:
//!
//! * regression Monte Carlo on simulated controlled paths ([`bsde`]), and
//! * a monotone finite-difference solve of the associated
//!   Hamilton-Jacobi-Bellman Dirichlet problem with policy iteration
//!   ([`hjb`]).
//!
//! A verification harness ([`verify`]) property-checks the structural
//! identities connecting the two: the dynamic programming principle, the
//! comparison and stability properties of the backward equation, exit-time
//! moment bounds via an exterior-sphere barrier, Hölder regularity of the
//! value function, and the small-horizon expansion chain used in the
//! viscosity-solution characterization.

pub mod bsde;
pub mod error;
pub mod expr;
pub mod hjb;
pub mod paths;
pub mod problem;
pub mod regression;
pub mod report;
pub mod rng;
pub mod verify;

pub use error::{Error, Result};
