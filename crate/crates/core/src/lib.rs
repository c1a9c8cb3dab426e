//! LiDAR–camera fusion with feature-level supervision from a densified-data
//! assistant, at desk scale.
//!
//! The pipeline: bin training objects by (class, bearing, heading) into a
//! database of dense canonical objects ([`sampling_db`]), paste them onto
//! sparse objects ([`pasting`]), train a LiDAR-only assistant on the densified
//! scenes, then train a fusion detector whose fused BEV features are pulled
//! toward the frozen assistant's features ([`training`]).

pub mod config;
pub mod dataset;
pub mod fingerprint;
pub mod geometry;
pub mod gradcheck;
pub mod kitti;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pasting;
pub mod sampling_db;
pub mod scene;
pub mod simulator;
pub mod tensor;
pub mod training;

pub use geometry::{Box3D, ClassLabel, Point3, PolarIndex};
pub use scene::{AddedPoints, ObjectPoints, Scene, SourceId};
