//! Anchor-free dense detector: pyramid geometry, parameters, forward pass,
//! target assignment and decoding.

mod decode;
mod geometry;
mod model;
mod params;
mod targets;

pub use decode::{decode, nms, DecodeConfig, Detection};
pub use geometry::{Level, PyramidGeometry, DEFAULT_RANGES, DEFAULT_STRIDES};
pub use model::{
    backbone, forward, init_params, rla_block, DetectorConfig, HeadMaps, HeadOutput, HiddenPath, LevelMaps,
    LevelOutput, Residual, CLS_PRIOR, GN_EPS,
};
pub use params::{Bound, ParamSet};
pub use targets::{assign_targets, assigned_box, centerness, ltrb, DenseTargets, LevelTargets, IGNORE};
pub(crate) use targets::write_positive;
