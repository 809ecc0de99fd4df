//! Dense semi-supervised training of an anchor-free detector on synthetic scenes.

pub mod augment;
pub mod boxes;
pub mod checkpoint;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod metanet;
pub mod optim;
pub mod pseudo_labels;
pub mod teacher;
pub mod trainer;

pub use boxes::{iou, BBox};
pub use error::{CoreError, Result};
