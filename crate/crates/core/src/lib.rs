//! Tightly-coupled 2D LiDAR + IMU + wheel-odometry SLAM.
//!
//! The front-end tracks a sliding window of IMU states against line features
//! accumulated in a reference frame, fusing preintegrated IMU, wheel
//! odometry increments and a planar ground constraint. Keyframes feed a
//! corner-descriptor loop detector and a planar pose graph, and the optimized
//! keyframes are rasterized into a probability grid map.

pub mod backend;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod factors;
pub mod features;
pub mod frontend;
pub mod geometry;
pub mod loopdetect;
pub mod mapping;
pub mod preintegration;
pub mod simgen;
pub mod solver;

pub use error::{Error, Result};
