//! Minimum-attention control laws `u(x, t) = K(t) x + v(t)` for nonlinear
//! systems.
//!
//! The solver treats the closed-loop system through its Liouville (density
//! transport) representation: a Monte Carlo estimate of the state density
//! drives a terminal cost, the adjoint is carried along characteristics, and
//! an outer gradient loop with a halving line search updates the gain and
//! feedforward schedules. Initialization comes from a finite-horizon LQR
//! design around a reference motion.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, configuration
//! parsing, threading and the command-line front end live in the companion
//! `minattn-cli` crate.
#![no_std]
#![warn(missing_debug_implementations, rust_2018_idioms)]

extern crate alloc;

pub mod adjoint;
pub mod cost;
pub mod density;
pub mod dynamics;
pub mod error;
pub mod gradient;
pub mod lqr;
pub mod optimizer;
pub mod rollout;
pub mod schedules;

pub use error::{Error, Result};

pub use nalgebra::{DMatrix, DVector};
