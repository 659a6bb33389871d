//! Detection numerics: box-regression losses with verified gradients,
//! bi-level routing attention, detection metrics, and YOLO-format dataset
//! tooling.
//!
//! The numerical modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the double-precision instantiation used by the CLI and
//! the verification suites.

pub mod bbr_loss;
pub mod bench;
pub mod bra;
pub mod dataset;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod scalar;
pub mod tensor;

mod error;

pub use error::{Error, LoadReport, ParseError, Result};
pub use scalar::Scalar;

pub type Box64 = geometry::BBox<f64>;
pub type Box32 = geometry::BBox<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type WiouConfig64 = bbr_loss::WiouConfig<f64>;
pub type LossState64 = bbr_loss::LossState<f64>;
pub type LossResult64 = bbr_loss::LossResult<f64>;
pub type FeatureMap64 = bra::FeatureMap<f64>;
pub type BraConfig64 = bra::BraConfig<f64>;
pub type BraParams64 = bra::BraParams<f64>;
pub type Detection64 = metrics::Detection<f64>;
pub type GroundTruth64 = metrics::GroundTruth<f64>;
