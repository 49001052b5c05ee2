//! Homogeneous Fokker-Planck-Landau toolkit: velocity grids and quadrature,
//! direct collision-operator evaluation, analytic reference solutions,
//! surrogate training data, convolutional operator surrogates, explicit
//! time integration and a physics-informed solver built on the surrogates.

pub mod collision;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod integrator;
pub mod pinn;
pub mod reference;
pub mod surrogate;

pub use error::{FplError, Result};
