//! Depth completion from RGB plus raw depth with any mix of sparsity and
//! holes: a reverse-mode autodiff engine, the training losses, metrics,
//! degradation pipeline, a ReZero U-Net, a synthetic scene generator and
//! the train/evaluate/infer harness.
//!
//! The math is generic over [`scalar::Real`]; the aliases below fix the
//! scalar for common use.

pub mod augment;
pub mod autodiff;
pub mod error;
pub mod field;
pub mod harness;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod scalar;
pub mod seed;
pub mod selftest;
pub mod synth;

pub use error::{Error, Result};
pub use field::{DepthField, RgbField};
pub use losses::{GradientOperator, LossConfig, Standardization};
pub use metrics::{MetricConfig, MetricReport};
pub use net::{NetConfig, Network};

pub type DepthMap = DepthField<f64>;
pub type RgbImage = RgbField<f64>;
pub type Tape = autodiff::Graph<f64>;
pub type UNet = Network<f64>;

pub type DepthMap32 = DepthField<f32>;
pub type RgbImage32 = RgbField<f32>;
pub type Tape32 = autodiff::Graph<f32>;
pub type UNet32 = Network<f32>;
