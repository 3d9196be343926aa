//! Virtual multi-view orientation estimation for 3D detections.
//!
//! The pipeline densifies and colorizes a LiDAR point cloud, renders a set of
//! canonical virtual views around each detected object, estimates a per-view
//! orientation behind a pluggable interface, fuses the estimates with a
//! circular mean, and suppresses false positives against a 2D detector.
//! KITTI-format I/O, synthetic ground-truth scenes and detection-style
//! metrics (AP / AOS / OS / AAE, BEV and 3D IoU, centroid recall) round out
//! the toolbox.

pub mod depth_completion;
pub mod evaluation;
pub mod geometry;
pub mod kitti;
pub mod orientation;
pub mod pipeline;
pub mod synth;
pub mod view_synthesis;
