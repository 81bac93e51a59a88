//! Post-hoc confidence calibration for top-k answer rankers.
//!
//! The crate covers the whole path from a ranker's raw outputs to calibrated
//! probabilities:
//!
//! - [`data`]: record types, the labeling rule and the NDJSON loader.
//! - [`features`]: attention-flow entropy/delta features and the full
//!   feature vector fed to calibrators.
//! - [`classical`]: Platt scaling, temperature scaling, isotonic regression.
//! - [`gbm`]: a second-order gradient-boosted tree ensemble with a logistic
//!   objective and split-count importances.
//! - [`metrics`]: ACE, MCE, ROC/AUC, NLL, Brier and reliability binning.
//! - [`synth`]: seeded synthetic generators for miscalibrated rankers and
//!   for attention flows that carry label signal.
//! - [`model`]: the serialized calibrator union.

pub mod classical;
pub mod data;
pub mod error;
pub mod features;
pub mod gbm;
pub mod math;
pub mod metrics;
pub mod model;
pub mod split;
pub mod synth;

pub use classical::{Isotonic, Platt, Temperature};
pub use data::{AttentionRecord, CandidateAnswer, FeatureVector, RankedQueryRecord};
pub use error::{Error, Result};
pub use features::{AttentionFlow, FeatureConfig, FeatureSet, HeadMode};
pub use gbm::{DecisionTree, GbmConfig, GbmEnsemble};
pub use metrics::{BinnedReliability, EvalReport, RocCurve};
pub use model::CalibratorModel;

/// Default number of ranked candidates per query.
pub const DEFAULT_TOP_K: usize = 3;
