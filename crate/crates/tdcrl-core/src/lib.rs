//! Embedding-space engine for text-driven causal representation learning.
//!
//! The pipeline simulates visual training data with style-augmented text
//! embeddings, trains a causal intervention network against a confounder
//! dictionary, and evaluates whether the learned features are
//! domain-invariant. A deterministic synthetic encoder and a discrete causal
//! oracle make every numerical claim checkable without any pretrained
//! vision-language model.

pub mod augment;
pub mod causal;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod matrix;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod scenario;
pub mod tdeb;
pub mod trainer;

pub use augment::{AugmentConfig, StyleBasis, StyleWordVector};
pub use causal::{Classifier, ConfounderDictionary, InterventionNet, LossGKind, TargetMatrix};
pub use config::RunConfig;
pub use encoder::{Encoder, SyntheticEncoder};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use matrix::DenseMatrix;
pub use nn::{BatchNormLayer, LinearLayer, LrSchedule, Mode};
pub use oracle::DiscreteScm;
pub use tdeb::{EmbeddingRecord, EmbeddingTable};
pub use trainer::{ModelState, TrainConfig, TrainMode};
