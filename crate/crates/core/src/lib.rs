//! Hierarchical polymorphic multitask learning for partially labeled lung CT
//! segmentation, at desk scale: the label algebra, loss stack, balanced
//! sampler, dual-head network, volumetric inference, tubular-tree metrics,
//! and DICOM series curation, verified on synthetic phantoms.

pub mod checkpoint;
pub mod engine;
pub mod error;
pub mod hierarchy;
pub mod inference;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod pipeline;
pub mod rvol;
pub mod trainer;

pub use error::{Error, Result};
