//! Stockpile volume estimation from a drone carrying a 2D LiDAR and a camera.
//!
//! The pipeline: camera localization against a known feature map, LiDAR hit
//! points with propagated covariance, a Kalman-updated height grid read
//! through a sparse Matérn GP, and a greedy planner that picks the next
//! waypoint by predicted volume uncertainty.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod campaign;
pub mod error;
pub mod frames;
pub mod kernel;
pub mod lidar;
pub mod lm;
pub mod localization;
pub mod planner;
pub mod surface;
pub mod terrain;

pub use error::{Error, Result};
