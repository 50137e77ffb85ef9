//! Nonintrusive reduced-basis toolkit: empirical interpolation, nonintrusive
//! affine decompositions of black-box assemblers, and certified reduced-basis
//! solvers built on top of them.

pub mod config;
pub mod eim;
pub mod error;
pub mod linalg;
pub mod model_file;
pub mod nonintrusive;
pub mod pipeline;
pub mod problems;
pub mod rbm;

pub use error::{Error, Result, Stage};
pub use linalg::{ComplexMatrix, ComplexVector, C64};
pub use problems::{ParameterDomain, ParameterPoint, ProblemProvider};
