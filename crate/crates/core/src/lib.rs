//! Refraction-corrected tomographic volumetric printing with optical
//! scattering tomography (OST) feedback.
//!
//! The crate is organised along the print loop:
//!
//! * [`tomo`]: parallel-beam Radon transform, ramp filter, back-projection.
//! * [`optics`]: closed-form maps between refracted physical projector/camera
//!   coordinates and virtual parallel-beam coordinates.
//! * [`projgen`]: mesh to refraction- and absorption-corrected projector patterns.
//! * [`printsim`]: independent Snell ray-traced printer and darkfield camera.
//! * [`ostrecon`]: camera frames to reconstructed scattering volumes, masks,
//!   isosurfaces and overhead projections.
//! * [`metrology`]: circle fits, I_p calibration, signed-distance comparison
//!   and line profiles.
//! * [`io`]: volume, STL, PGM and manifest formats.

pub mod error;
pub mod grid;
pub mod io;
pub mod isosurface;
pub mod mesh;
pub mod metrology;
pub mod optics;
pub mod ostrecon;
pub mod phantoms;
pub mod printsim;
pub mod projgen;
pub mod tomo;

pub use error::{Error, Result};
pub use grid::{ImageStack, SliceGrid, VoxelGrid};
pub use optics::OpticalConfig;
pub use tomo::{Sinogram, Space};
