//! Weakly nonlinear Rayleigh-wave pulses on an isotropic elastic half-space.
//!
//! The crate is organized around one pipeline:
//!
//! 1. [`material`]: Lamé constants, the Rayleigh speed, surface-wave mode
//!    profiles and the modal frame used by the boundary-layer analysis.
//! 2. [`expsum`]: exact arithmetic on finite sums of exponentials in the
//!    depth variable; every depth integral in the crate is closed-form.
//! 3. [`kernels`]: the bilinear Fourier multiplier kernel of the amplitude
//!    equation, its canonical rational decomposition, and on-disk tables.
//! 4. [`spectral`]: 2-D real FFT grids, the periodic Hilbert transform,
//!    dealiasing and weighted (singular) Sobolev norms.
//! 5. [`solver`]: the nonlocal amplitude equation integrated with an
//!    integrating-factor RK4 scheme.
//! 6. [`svk`]: exact polynomial differentiation of the stored elastic energy,
//!    giving interior/boundary operators and their linear/quadratic parts.
//! 7. [`corrector`]: first and second order boundary-layer profiles driven by
//!    a solved amplitude, including the low-frequency cutoff.
//! 8. [`residual`]: plugs the approximate solution back into the exact
//!    equations and measures the residual in weighted norms over a range of
//!    wavelength parameters.

pub mod corrector;
pub mod expsum;
pub mod kernels;
pub mod material;
pub mod residual;
pub mod solver;
pub mod spectral;
pub mod svk;

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
