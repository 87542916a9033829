//! Knudsen self-diffusivity enhancement η = 𝒟/𝒟_K for straight circular
//! channels with explicitly modeled surface microgeometry.
//!
//! Three mutually validating pipelines are provided:
//!
//! * Monte Carlo random flight in the channel ([`channel_flight`]),
//! * spectral analysis of the discretized surface scattering operator
//!   ([`cell_scatter`], [`estimation`]),
//! * the analytic factorization ϑ = λh/C through the generalized Legendre
//!   eigenbasis on the disc ([`legendre_spectral`]).
//!
//! Surface microgeometries are periodic billiard cells described by a height
//! field over a rectangular opening ([`microgeometry`]).

pub mod cell_scatter;
pub mod channel_flight;
pub mod estimation;
pub mod legendre_spectral;
pub mod microgeometry;
pub mod quadrature;
pub mod seeding;
pub mod stats;
pub mod transition;

pub use cell_scatter::{DiscVelocity, ScatterError, ScatterOutcome};
pub use channel_flight::{ChannelSpec, FlightStats, ScatterSource};
pub use microgeometry::{CellFamily, MicroParams, SurfaceCell};
pub use transition::{DiscPartition, TransitionMatrix};
