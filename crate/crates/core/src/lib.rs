//! Parametric data-driven closure reduced-order modelling: snapshot
//! generation, POD-Galerkin operators with eddy-viscosity tensors, exact
//! closure extraction, operator networks and Newton-based online solvers.

pub mod archive;
pub mod closure;
pub mod error;
pub mod fom;
pub mod grid;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod operators;
pub mod pipeline;
pub mod pod;
pub mod solver;
pub mod stencil;

pub use error::{Result, RomError};
