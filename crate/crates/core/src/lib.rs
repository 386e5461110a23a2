//! Structured illumination microscopy reconstruction without training data.
//!
//! An untrained U-Net maps the measured sub-frame stack to an object
//! estimate; the estimate is pushed through a differentiable SIM forward
//! model (pattern multiply, PSF convolution, camera binning) and the network
//! weights are optimised so the simulated sub-frames match the measured ones.
//!
//! Modules:
//! - [`imgcore`]: rasters, stacks, seeded RNG, RAW32 files
//! - [`optics`]: Airy PSF/OTF, FFT convolution, binning, noise
//! - [`patterns`]: linear SIM, nonlinear SIM and plasmonic-lattice patterns
//! - [`forward`]: the acquisition operator and synthetic phantoms
//! - [`diffcore`]: reverse-mode differentiation over 4-D arrays, Adam
//! - [`network`]: the U-Net
//! - [`reconstruct`]: the physics-informed optimisation loop
//! - [`metrics`]: PSNR/SSIM/NRMSE, two-line resolvability, spectral support

pub mod diffcore;
pub mod error;
pub mod fft;
pub mod imgcore;
pub mod metrics;
pub mod network;
pub mod forward;
pub mod optics;
pub mod patterns;
pub mod reconstruct;

pub use error::{Error, Result};
