//! Acoustic gunshot localization from consumer video recordings.
//!
//! Everything here is `no_std` + `alloc`: geodesy, the shockwave/muzzle
//! distance solver, the time-difference-of-arrival hyperbola band, heatmap
//! fusion, audio analysis and multi-video synchronization. A forward
//! simulator in [`oracle`] produces ground-truth scenes for testing.

#![no_std]
extern crate alloc;

pub mod audio;
pub mod ballistics;
pub mod fft;
pub mod fusion;
pub mod geo;
pub mod interval;
pub mod oracle;
pub mod sync;
pub mod tdoa;

pub use interval::Interval;
