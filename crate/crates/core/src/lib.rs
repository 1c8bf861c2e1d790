//! Multi-scale saliency detection.
//!
//! Each image is expanded into a Gaussian scale space. A nested region
//! hierarchy is built over the levels, and every region is scored by a
//! random-forest regressor on contrast, backgroundness and property
//! descriptors. The resulting per-scale maps are fused patch-wise by a
//! multimodal dictionary model whose joint sparse codes feed a linear
//! decoder trained end to end by stochastic projected gradient.
//!
//! The sparse coding and dictionary learning code is generic over [`Real`];
//! the aliases at the crate root pin it to `f64` (default) or `f32`.

// `!(x > 0.0)` deliberately rejects NaN; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod eval;
pub mod features;
pub mod forest;
pub mod fusion;
pub mod imaging;
pub mod jsc;
pub mod linalg;
pub mod pipeline;
pub mod scalar;
pub mod segmentation;
pub mod tddl;

pub use scalar::Real;

pub type Dictionary = jsc::Dictionary<f64>;
pub type JointCode = jsc::JointCode<f64>;
pub type JscParams = jsc::JscParams<f64>;
pub type FusionModel = tddl::FusionModel<f64>;
pub type TrainConfig = tddl::TrainConfig<f64>;

pub type DictionaryF32 = jsc::Dictionary<f32>;
pub type JointCodeF32 = jsc::JointCode<f32>;
pub type JscParamsF32 = jsc::JscParams<f32>;
pub type FusionModelF32 = tddl::FusionModel<f32>;
pub type TrainConfigF32 = tddl::TrainConfig<f32>;
