//! Modality encoders: each maps one raw input (robot state, force
//! window, camera view, instruction text) to a token of the common
//! width `D`, so nothing downstream ever branches on modality-specific
//! widths.

pub mod force;
pub mod state;
pub mod text;
pub mod vision;

pub use force::{stft_magnitudes, ForceEncoder, ForceWindow};
pub use state::StateEncoder;
pub use text::{fnv1a, TextEncoder};
pub use vision::VisionEncoder;

use crate::numerics::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    State,
    Force,
    Vision,
    Text,
    Intent,
}

/// One encoder output: a width-`D` vector node plus its modality tag.
#[derive(Debug, Clone, Copy)]
pub struct ModalityToken {
    pub node: NodeId,
    pub modality: Modality,
}
