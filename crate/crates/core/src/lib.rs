//! Stochastic prey-predator model with a Holling type IV response and
//! additional food for the predator, driven by Brownian and Poisson noise.
//!
//! The crate simulates the jump-diffusion system by Euler-Maruyama, runs
//! reproducible Monte Carlo ensembles, and optimises the quality or the
//! quantity of the additional food for the expected time to reach a target
//! state with a forward-backward sweep on the stochastic Hamiltonian.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod model;
pub mod montecarlo;
pub mod noise;
pub mod optctl;
pub mod sim;

pub use error::{Error, Result};
pub use model::{ModelParams, State};
pub use noise::NoiseParams;
pub use sim::{Path, SimConfig};
