//! Debiased learning for recommendation under missing-not-at-random
//! feedback: the multiple-robust estimator and its baselines (naive, EIB,
//! IPS, SNIPS, DR), alternating training with ridge stabilization and
//! sample splitting, semi-synthetic data generation with a controllable
//! exposure-bias knob, and Monte-Carlo oracles for estimator bias.

pub mod backbones;
pub mod data;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod imputation;
pub mod learning;
pub mod propensity;
pub mod rng;

pub use backbones::{Backbone, BackboneKind, Optimizer, OptimizerKind};
pub use data::{BiasLevelSpec, ObservationMask, RatingDataset, RatingFormat};
pub use error::{CoreError, Result};
pub use estimators::{
    BiasReport, CellData, EstimatorSpec, EtaSolution, FeatureVector, LinearWeights, ModelEnsemble,
};
pub use eval::EvalResult;
pub use imputation::{ErrorConvention, ImputationModel};
pub use learning::{TrainConfig, TrainingTrace, ValidationSet};
pub use propensity::{PropensityKind, PropensityModel};
