//! Embedded-CRF segmentation laboratory.
//!
//! SLIC superpixels, exact dense-CRF mean-field inference, a feature-space
//! CRF layer with hand-written backward pass, class-weight gradient geometry,
//! a small trainable segmentation network and the metrics used to compare
//! them.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod densecrf;
pub mod ecrf;
pub mod error;
pub mod gradtheory;
pub mod gridcore;
pub mod metrics;
pub mod oracle;
pub mod real;
pub mod superpixel;
pub mod toynet;
pub mod verify;

pub use error::{Error, Result};
pub use real::Real;
