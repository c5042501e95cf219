//! Synthesis and verification toolkit for boundary stabilization of a cascade
//! of a finite-dimensional linear ODE driven by a linearized Korteweg-de Vries
//! equation on a bounded interval, actuated through the left Dirichlet value.
//!
//! The pipeline has three stages:
//!
//! 1. **Synthesis** ([`gains`], [`kernels`]): integral-transform kernels and
//!    boundary gain functions are computed exactly as bivariate polynomials
//!    via a fixed-point iteration in coefficient space.
//! 2. **Simulation** ([`transform`], [`sim`]): the closed loop and its target
//!    system are advanced by an implicit method-of-lines scheme, connected by
//!    the forward/inverse state transforms.
//! 3. **Certification** ([`certify`]): a Lyapunov functional built from an
//!    algebraic Lyapunov solve certifies an explicit exponential decay rate,
//!    checked pointwise along simulated trajectories.
//!
//! The [`scenario`] and [`commands`] modules back the `kdvctl` binary.

pub mod certify;
pub mod commands;
pub mod gains;
pub mod kernels;
pub mod linops;
pub mod parallel;
pub mod poly2;
pub mod quad;
pub mod scenario;
pub mod sim;
pub mod transform;
