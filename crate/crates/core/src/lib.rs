//! Finite-element discretization of the coupled Stokes / multiple-network
//! poroelasticity problem on a two-subdomain geometry, with implicit-Euler
//! time stepping, residual a posteriori error estimators and a
//! manufactured-solution convergence harness.

pub mod assembly;
pub mod config;
pub mod estimators;
pub mod fem;
pub mod mesh;
pub mod mms;
pub mod report;
pub mod solver;
pub mod sparse;
pub mod study;
pub mod timeloop;
