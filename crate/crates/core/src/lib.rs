//! CAD-free 6-DoF rigid-object tracking and reconstruction from masked
//! RGB-D sequences.

pub mod coarse;
pub mod exec;
pub mod frame;
pub mod geometry;
pub mod graph;
pub mod memory;
pub mod sdf;
pub mod spatial;
pub mod synth;
