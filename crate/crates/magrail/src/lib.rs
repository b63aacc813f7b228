//! Rail vehicle localisation from magnetic field measurements.
//!
//! The engine matches a live magnetometer stream against a pre-recorded
//! magnetic map of the track. Two complementary methods are provided:
//!
//! * a particle filter over along-track position and velocity, reweighted
//!   by magnetic similarity ([`pf`]), suited to continuous tracking;
//! * a stateless sequence alignment that transforms the recent signal into
//!   the spatial domain ([`spacify`]) and locates it on the map by sliding
//!   window distance search ([`align`]), suited to cold starts.
//!
//! The [`hybrid`] module combines the two: alignment proposes the top three
//! start positions, one short-lived particle filter is burned in per
//! candidate, and the surviving filter tracks until divergence.
//!
//! [`synth`] generates maps and sensor replays with exact ground truth, and
//! [`eval`] computes the localisation-error metrics used throughout.

pub mod align;
pub mod config;
pub mod eval;
pub mod hybrid;
pub mod pf;
pub mod rng;
pub mod signal;
pub mod spacify;
pub mod synth;
pub mod track;

pub(crate) mod vec3;

/// A single 3-axis magnetic field sample, in whatever units the map uses.
pub type FieldSample = [f64; 3];
