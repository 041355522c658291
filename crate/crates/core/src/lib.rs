//! Contour-FFT analysis of large arrays of identical printed antennas.
//!
//! Each element is meshed with rooftop basis functions and compressed to a
//! handful of macro basis functions (MBFs). Reactions between MBFs through the
//! grounded slab are split into a layered part, computed in the spectral
//! domain on a deformed contour, and an effective homogeneous medium part with
//! its ground-plane image, computed in the space domain.
//!
//! The layered part can be obtained two ways:
//!
//! * [`mbf::DirectIntegrator`] integrates each block by nested polar
//!   quadrature along the deformed contour (the reference path);
//! * [`cfft`] tabulates all relative positions at once with Taylor-factorized
//!   2D FFTs and answers queries by second-order interpolation.
//!
//! [`array`] assembles and solves the reduced system for a layout and derives
//! port currents and radiation patterns.

pub mod array;
pub mod cfft;
pub mod config;
pub mod consts;
pub mod error;
pub mod geometry;
pub mod homog;
pub mod io;
pub mod mbf;
pub mod quadrature;
pub mod spectral;

pub use error::{Error, Result};
pub use faer::{c64, Mat};
pub use geometry::{ArrayLayout, Direction, ElementMesh, MeshDensity, PatchSpec, RooftopBasis};
pub use spectral::{ContourSpec, Extraction, SpectralGreens, SubstrateSpec};
