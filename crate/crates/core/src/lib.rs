//! Structured-light scanning, reconstruction and grasp planning for sorting
//! packaged goods with a robot arm, plus a deterministic simulator that
//! closes the loop.
//!
//! Pipeline: [`stripe_codec`] patterns are projected and decoded into
//! projector-column correspondences, [`reconstruction`] triangulates them
//! into an indexed point cloud, [`perception`] turns detections into grasp
//! points, and [`geometry`] maps those into the robot frame.

pub mod cli;
pub mod geometry;
pub mod perception;
pub mod raster;
pub mod reconstruction;
pub mod simulator;
pub mod stripe_codec;
