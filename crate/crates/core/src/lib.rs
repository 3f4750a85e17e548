//! Gaussian Isolation Machines: a feature trunk trained so that each class
//! forms a tight, well-separated cluster, with per-class diagonal Gaussians
//! fitted on top for classification and out-of-distribution detection.

pub mod cli;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod trunk;

pub use data::Dataset;
pub use error::{GimError, IdxError, Result};
pub use gaussian::{Calibration, ClassGaussian, GimModel, Prediction};
pub use losses::{LossConfig, LossKind};
pub use model::{Model, SoftmaxModel};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainHistory, TrainOutcome};
pub use trunk::{Activation, TrunkParams, TrunkSpec};
