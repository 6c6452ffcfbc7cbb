//! Interpretable embeddings of disease and procedure codes.
//!
//! Admissions pair a set of disease codes with a set of procedure codes. The
//! model fuses disease embeddings with a two-layer self-attention network,
//! scores every procedure through a sigmoid of an inner product, and is
//! trained jointly with an optimal-transport regularizer whose plan couples
//! each admission's diseases to its procedures. Both the attention weights and
//! the transport plans are exported as explanations of a recommendation.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

pub mod attention;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod model;
pub mod persist;
pub mod scalar;
pub mod trainer;
pub mod transport;

pub use attention::{fuse, fuse_backward, head_weights, AttentionParams, Fusion, FusionMode};
pub use data::{Admission, CodeKind, CodeVocabulary, DatasetStats, RawAdmission};
pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;
pub use transport::{cost_matrix, ot_objective, solve_ot, CostMatrix, OtConfig, OtDiagnostics, TransportPlan};
pub use model::{init_model, predict_prob, predictive_loss, recommend_top_l, score_all, GradBundle, ModelParams};
pub use trainer::{batch_step, train, train_with, AdamState, TrainConfig, TrainReport};
pub use eval::{admission_metrics, cross_validate, evaluate, sweep, EvalReport, MetricRow, SweepAxis};
pub use explain::{explain, load_descriptions, Explanation};
pub use persist::{ModelMetadata, TrainedModel};
pub use data::{build_vocabulary, compute_stats, index_and_filter, parse_admissions, sample_negatives, split_train_test, write_admissions};

pub type ModelParams32 = ModelParams<f32>;
pub type ModelParams64 = ModelParams<f64>;
pub type TrainedModel32 = TrainedModel<f32>;
pub type TrainedModel64 = TrainedModel<f64>;
pub type AttentionParams32 = AttentionParams<f32>;
pub type AttentionParams64 = AttentionParams<f64>;
pub type TransportPlan32 = TransportPlan<f32>;
pub type TransportPlan64 = TransportPlan<f64>;
pub type CostMatrix32 = CostMatrix<f32>;
pub type CostMatrix64 = CostMatrix<f64>;
