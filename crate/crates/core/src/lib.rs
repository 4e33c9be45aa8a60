//! Markov-modulated ODEs in the fast-switching regime.
//!
//! The environment σ is a finite continuous-time chain (or the i.i.d.
//! resampling kernel), accelerated by 1/ε. Between environment jumps the
//! state follows the vector field of the current environment.

// NaN-rejecting guards are written as !(x > 0.0)
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod env_chain;
pub mod error;
pub mod expansion;
pub mod flows;
pub mod linalg;
pub mod lotka;
pub mod lyapunov;
pub mod model_file;
pub mod observable;
pub mod ode;
pub mod pdmp_sim;
pub mod rng;
pub mod splitting;
pub mod stats;
pub mod validation;

pub use error::{Error, Result};
