//! Fourier basis, Gauss-Legendre quadrature and Galerkin operator assembly on the torus.

mod basis;
pub mod cache;
mod domain;
mod operators;
mod quadrature;

pub use basis::{Mode1d, SpectralBasis};
pub use domain::{Point, TorusDomain};
pub use operators::{assemble_operators, GalerkinOperators};
pub(crate) use operators::NodalBasis;
pub use quadrature::{gauss_legendre, recommended_points, QuadratureRule};
