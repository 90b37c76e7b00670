//! Adaptive P1 finite-element solver for the regularized nonlinear
//! Poisson-Boltzmann interface problem on 2D disk-in-square geometries,
//! with guaranteed functional upper and lower bounds (majorants and
//! minorants) on energy-norm and combined-energy-norm errors.
//!
//! The potential is split into a singular Coulombic part, carried
//! analytically, plus regular components solved by FEM: either a
//! two-term split (linear interface correction + nonlinear component)
//! or a three-term split that first removes a harmonic extension of
//! the singularity from the molecular region. Error control is fully
//! computable: fluxes are reconstructed in lowest-order Raviart-Thomas
//! spaces by patchwise equilibration or global minimization, and the
//! resulting majorants drive the adaptive loop.

pub mod driver;
pub mod estimate;
pub mod fem;
pub mod flux;
pub mod mesh;
pub mod problem;
pub mod quad;
pub mod sparse;

pub use mesh::TriMesh;
pub use problem::ProblemSpec;
