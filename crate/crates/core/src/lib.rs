//! θ-EM and split-step θ-EM schemes for neutral stochastic delay
//! differential equations driven by Brownian motion or compensated Poisson
//! jumps, with a Monte Carlo harness for strong, moment and pathwise
//! convergence studies.

pub mod drivers;
pub mod model;
pub mod poly;
pub mod scheme;
pub mod harness;
pub mod cli;
