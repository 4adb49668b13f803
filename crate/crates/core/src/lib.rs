//! Virtual focused-beam X-ray luminescence computed tomography (XLCT) scanner.
//!
//! A pencil X-ray beam is swept continuously across a turbid object on a
//! rotary gantry. Nanophosphors in the beam emit light that diffuses to surface
//! photodetectors, which count photons in gated time bins. The same sweep
//! yields a pencil-beam CT sinogram. This crate simulates both measurements and
//! reconstructs the nanophosphor concentration (MLEM, FISTA-L1) and the
//! attenuation image (filtered backprojection).
//!
//! Modules, bottom-up:
//!
//! - [`phantom`]: voxel phantoms with capillary targets
//! - [`geometry`]: scan protocol, fly-scan bins, beam rays, detector rings
//! - [`transport`]: Siddon traversal, beam fluence, diffusion Green's function
//! - [`forward`]: sparse system matrix and measurement synthesis
//! - [`recon`]: MLEM, FISTA-L1, FBP
//! - [`metrics`]: FWHM, CNR, Dice, scan timing
//! - [`io`], [`pipeline`]: file formats and configuration-driven runs

pub mod error;
pub mod forward;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod recon;
pub mod transport;

pub use error::{Error, Result};
