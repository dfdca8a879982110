//! Linear-chain conditional random fields with dynamically weighted training.
//!
//! The crate trains first-order chain CRFs under three weighting regimes:
//!
//! - plain CRF: every position carries the same weight `q = 2/K`;
//! - fWCRF: fixed inverse-class-frequency weights;
//! - dWCRF: per-position weights `p(gold | x) * dF/dTP_gold` recomputed during
//!   optimization, which steers maximum likelihood towards the expected
//!   macro F-score on imbalanced data.
//!
//! Around the model sit exact chain inference ([`inference`]), a streaming
//! forward-only decoder for real-time labeling, sliding-window sensor feature
//! extraction ([`features`]), dataset IO with an imbalance-injection
//! subsampler and a synthetic generator ([`data`]), and an evaluation harness
//! with cross-validation and t-tests ([`metrics`]).

pub mod data;
pub mod error;
pub mod features;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
pub use inference::{PotentialTables, PositionMarginals, PairwiseMarginals, StreamState};
pub use model::{
    CrfParameters, FeatureVector, LabelAlphabet, LabeledSequence, Method, Standardizer,
    TrainingConfig,
};
pub use objective::{ObjectiveValue, WeightVector};
pub use trainer::{TrainedModel, TrainingTrace};
pub use weights::{SoftCounts, WeightSchedule};
