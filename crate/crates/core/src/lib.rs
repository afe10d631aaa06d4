//! Representation neutralization for fairness (RNF).
//!
//! Debiases the classification head of a small MLP classifier:
//!
//! 1. train a cross-entropy teacher and a bias-amplified (GCE) model;
//! 2. derive proxy sensitive-attribute annotations from the bias-amplified
//!    model's confidence within each label slice;
//! 3. freeze the teacher's encoder and retrain its head on midpoints of
//!    same-label, different-group representation pairs, supervised by the
//!    averaged temperature-softened teacher probabilities plus an
//!    interpolation smoothing penalty.
//!
//! Module map:
//!
//! - [`nn`]: MLP forward/backward, Adam, encoder/head split.
//! - [`losses`]: CE, GCE, neutralization MSE, smoothing and their gradients.
//! - [`data`]: CSV ingestion, splits, batching, pair sampling, synthetic data.
//! - [`metrics`]: accuracy, demographic parity, equalized odds, confidence gaps.
//! - [`pipeline`]: stage-one training, proxy annotation, head retraining,
//!   adversarial / EOR baselines, sweeps.
//! - [`analysis`]: kernel PCA, linear probes, cosine diagnostic, bound checker.
//! - [`checkpoint`] and [`report`]: on-disk formats.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod rng;

pub use data::{Dataset, Partition, Sample};
pub use error::{Error, Result};
pub use losses::{GceConfig, RnfLossConfig, SoftTarget};
pub use metrics::{Measure, MetricsRecord};
pub use nn::{AdamState, ForwardTrace, Gradients, Mode, Model, Scope};
