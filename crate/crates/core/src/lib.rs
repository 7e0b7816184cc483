//! Link-level simulation of multi-user full-duplex massive-MIMO base stations.
//!
//! The pipeline runs in a fixed order:
//!
//! 1. [`patterns`] loads or synthesizes per-element far-field patterns.
//! 2. [`geometry`] lays out the planar array and locates users.
//! 3. [`channel`] turns patterns and positions into LOS or Rayleigh channel
//!    matrices.
//! 4. [`coupling`] ingests S-parameters and extracts the self-interference
//!    matrix between the uplink and downlink element sets.
//! 5. [`precoder`] designs the SVD-based antenna-partition precoders.
//! 6. [`linkbudget`] applies the dynamic-range noise model and reports SINR
//!    and capacity for every duplex mode.
//!
//! [`scenario`] ties the stages together behind a TOML configuration and
//! backs the `fdmimo` command-line tool.

pub mod channel;
pub mod coupling;
pub mod geometry;
pub mod linalg;
pub mod linkbudget;
pub mod patterns;
pub mod precoder;
pub mod scenario;

pub use num_complex::Complex64;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
