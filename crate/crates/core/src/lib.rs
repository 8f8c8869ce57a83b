//! Radar-anchored metric depth: sparse supervision labels, a toy radar
//! refinement network, screening and displacement refinement of radar
//! anchors, and closed-form affine alignment of monocular inverse depth.

pub mod geometry;
pub mod labelgen;
pub mod refiner;
pub mod align;
pub mod metrics;
pub mod io;
pub mod synth;
