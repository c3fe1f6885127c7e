//! Higher-order feature-statistics mixing (MixStyle and its skewness/kurtosis
//! extensions) together with a small volumetric classifier, a synthetic
//! multi-cohort data generator and the training/evaluation loop used to
//! measure single-source domain generalization.

pub mod config;
pub mod data;
pub mod em;
pub mod error;
pub mod eval;
pub mod moments;
pub mod net;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{FeatureBatch, Shape5};
