//! Camera relocalization against maps made only of planar primitives.
//!
//! The pipeline fits planes to a query depth map, matches them to map
//! primitives, solves a pose from the plane correspondences and optionally
//! polishes it by direct depth alignment.

pub mod extraction;
pub mod geometry;
pub mod matching;
pub mod raster;
pub mod render;
pub mod solver;
pub mod refine;
pub mod eval;
pub mod sim;
pub mod io;
