//! Single-network segmentation of partially labeled tissue classes.
//!
//! A residual U-Net backbone feeds a class-aware controller that emits the 162
//! weights of a small dynamic head, so one network segments every registered
//! class on demand. The crate also carries the training loop, metrics, the
//! test-time aggregation of per-class maps and a synthetic corpus generator.

pub mod aggregator;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod dynamic_mapping;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod registry;
pub mod trainer;

pub use backbone::{backbone_forward, BackboneConfig, BackboneFeatures};
pub use dynamic_mapping::{
    apply_dynamic_head, fuse_and_control, global_average_pool, partition_head_params, ControllerConfig,
    DynamicHeadParams, Prediction, HEAD_PARAM_COUNT,
};
pub use error::{Error, Result};
pub use losses::LossConfig;
pub use model::{count_parameters, OmniSeg, ParameterBreakdown};
pub use registry::{encode_class, ClassVector, Registry, TissueClass};
