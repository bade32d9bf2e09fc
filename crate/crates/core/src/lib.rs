//! Out-of-distribution detection with an ensemble of leave-out classifiers.
//!
//! The training data's classes are split into K disjoint parts. Classifier
//! `i` is trained on the other K−1 parts with a cross-entropy plus
//! margin-entropy objective, using part `i` as self-supervised OOD data. At
//! test time each classifier perturbs the input along the negative entropy
//! gradient, scores it with temperature-scaled max-softmax and negative
//! entropy, and the scores are summed; class predictions average the
//! remapped softmax vectors.
//!
//! Modules, bottom up:
//!
//! - [`tensor`], [`autodiff`]: dense `f64` tensors and a reverse-mode tape.
//! - [`data`]: datasets, class partitions, leave-out views and data sources.
//! - [`model`]: MLP classifiers, global remapping and checkpoints.
//! - [`training`]: losses, SGD and the leave-out training loop.
//! - [`detection`]: input perturbation, OOD scores and the ensemble.
//! - [`metrics`]: FPR at 95% TPR, detection error, AUROC, AUPR, accuracy.
//! - [`harness`]: experiment configuration, runs, ablations and reports.

pub mod autodiff;
pub mod data;
pub mod detection;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use data::{ClassPartition, ImageShape, LabeledDataset, LeaveOutView};
pub use detection::{detect, DetectionResult, DetectorConfig, Ensemble, ScoreVariant};
pub use error::{Error, Result};
pub use metrics::{AggregateReport, EvalReport};
pub use model::{Checkpoint, MlpClassifier};
pub use tensor::Tensor;
pub use training::{LossVariant, TrainConfig, TrainedClassifier};
