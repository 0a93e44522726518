//! Steady states and their stabilisation for McKean-Vlasov equations on the
//! one- and two-dimensional torus.
//!
//! The density is expanded in a real orthonormal Fourier basis
//! ([`spectral`]); the stationary Galerkin system is solved for all of its
//! roots by deflated Newton iteration ([`deflation`]); roots are checked and
//! classified in [`analysis`]; [`dynamics`] integrates the evolution in
//! coefficient space and [`control`] steers it with adjoint-based optimal
//! control inside a receding-horizon loop.

pub mod analysis;
pub mod control;
pub mod deflation;
pub mod dynamics;
pub mod error;
pub mod models;
pub mod spectral;

pub use error::{Error, Result};
