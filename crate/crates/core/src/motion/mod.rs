//! Joint models, movable-part classification, and motion fitting.

mod chamfer;
mod classify;
mod params;

pub use chamfer::{chamfer_distance, ChamferValue};
pub use classify::{classify_movable, detect_motion_type, normalized_displacement, MaskConfig};
pub(crate) use params::transform_cloud_unchecked;
pub use params::{
    transform_cloud, transform_prismatic, transform_revolute, JointTransform, MotionParams, MotionRecord, MotionType,
};
