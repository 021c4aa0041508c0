//! LiDAR point cloud semantic segmentation pipeline.
//!
//! Rasterizes raw LiDAR scans into bird-eye-view (BEV) or spherical-front-view
//! (SFV) grid images, transfers camera-space road/vehicle labels onto the
//! points, and trains the SalsaNet encoder-decoder network on the projected
//! grids with a class-balanced cross-entropy loss. The tensor engine is
//! self-contained (no BLAS, no autograd framework) and every backward pass is
//! covered by finite-difference checks in the test suite.

pub mod autolabel;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pointcloud;
pub mod projection;
pub mod training;

pub use autolabel::ClassId;
pub use pointcloud::{Point, PointCloud, RoiSpec};
