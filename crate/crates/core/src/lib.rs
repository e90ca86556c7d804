//! Simulation and analysis toolkit for multi-RIS-enabled 3D sidelink positioning.
//!
//! Two unsynchronized single-antenna UEs exchange SISO-OFDM pilots while
//! `L >= 2` reconfigurable intelligent surfaces (RIS) with known states act as
//! passive anchors. The crate provides:
//!
//! - [`geometry`]: rotations, angles, direction vectors, spatial frequencies,
//!   propagation delays.
//! - [`scenario`]: experiment description, path-gain models, file persistence.
//! - [`channel`]: noise-free and noisy received-signal synthesis.
//! - [`codebook`]: time-orthogonal RIS profiles (random / directional /
//!   directional+derivative) and power-control optimization.
//! - [`crb`]: Fisher information, Cramér–Rao error bounds, PEB heatmaps.
//! - [`estimator`]: path separation plus coarse and ML channel-parameter
//!   estimation.
//! - [`locator`]: 3D-search coarse positioning and ML refinement.
//!
//! Internally all delay-like quantities are carried in meters (delay times the
//! speed of light) so that Fisher information matrices and least-squares
//! residuals are well conditioned; seconds are available through explicit
//! conversions.

pub mod channel;
pub mod codebook;
pub mod crb;
pub mod estimator;
pub mod geometry;
pub mod locator;
pub mod optim;
pub mod scenario;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Complex scalar used throughout the crate.
pub type C64 = num_complex::Complex<f64>;
