//! Numerical core for systems of parabolic variational inequalities
//! `du/dt + L_t u + f in d phi(u)`, `u(T) = h`, solved through their
//! backward stochastic variational inequality representation.
//!
//! The crate is `no_std` (with `alloc`): every routine is a pure function of
//! its inputs plus explicitly seeded random streams.

#![no_std]

extern crate alloc;

pub mod bsvi;
pub mod convex;
pub mod ext;
pub mod field;
pub mod rng;
pub mod sde;
pub mod vecops;
pub mod viscosity;

pub use convex::{ConvexError, ConvexFunction, ConvexKind, Side};
pub use ext::ExtendedReal;
