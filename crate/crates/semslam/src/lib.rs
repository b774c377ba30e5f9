//! Semantic LiDAR odometry and SLAM.
//!
//! The odometry front end is a point-to-point ICP with a Geman-McClure robust
//! kernel whose per-correspondence weights are additionally scaled by a label
//! fitness term computed from semantic segmentation confidences. The back end
//! accumulates scans into 2D multi-layer semantic occupancy submaps, detects
//! loop closures with a semantic branch-and-bound scan matcher, and optimizes
//! an SE(2) pose graph. Map export supports class filtering (e.g. dropping
//! parked vehicles), and the evaluation module provides Umeyama-aligned ATE
//! and KITTI segment-based RTE metrics.

pub mod error;
pub mod evaluation;
pub mod io_kitti;
pub mod local_map;
pub mod loop_closure;
pub mod map_post;
pub mod pipeline;
pub mod pose_graph;
pub mod preprocessing;
pub mod registration;
pub mod se2;
pub mod se3;
pub mod simgen;
pub mod submaps;
pub mod types;

pub use error::Error;
pub use se3::{Pose3, Twist6};
pub use types::{LabeledPoint, Scan, SemanticConfig};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
