//! Angular misalignment registration for networks of 2D (azimuth/elevation)
//! and 3D (range/azimuth/elevation) sensors observing shared targets of
//! opportunity.

pub mod batch_io;
pub mod calibration;
pub mod geometry;
pub mod harness;
pub mod scenario;
pub mod triangulation;
pub mod wahba;
