//! Encoders, fusion modules and the detection head.

mod bev;
mod head;
mod net;

pub use bev::{bev_encode, load_camera_grid, save_camera_grid, BevConfig, PILLAR_CHANNELS};
pub use head::{
    build_targets, class_prior, decode, detection_loss, DetectionLoss, DetectionTarget, HeadConfig, HEAD_CLASSES, REG_CHANNELS,
};
pub use net::{Conv, EncoderConfig, Forward, Fusion, FusionConfig, FusionKind, LidarEncoder, NetConfig, Network, Trunk};

use crate::tensor::{ContainerError, TensorError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint does not match this network: {0}")]
    Checkpoint(String),
}
