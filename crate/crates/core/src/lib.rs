//! Domain-expert training and evaluation for long-tailed camera-trap
//! sequence recognition.
//!
//! A shared residual backbone feeds three expert heads (full, day, night).
//! Training routes each sequence to the full expert and to the expert of its
//! domain, regularises class activation maps to follow the optical flow
//! between frames, and scales each expert's learning rate by its share of the
//! data. Inference fuses the full expert with the detected domain's expert.

pub mod data_model;
pub mod error;
pub mod flow;
pub mod imaging;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod network;
mod norm;
pub mod synthgen;
pub mod trainer;
mod unfold;
pub mod viz;

pub use data_model::{DatasetManifest, Domain, DomainCounts, DomainStats, SequenceSample, Split};
pub use error::{Error, Result};
pub use flow::{FlowField, FlowPair};
pub use inference::{Prediction, PredictionRecord};
pub use losses::LossConfig;
pub use metrics::EvalReport;
pub use network::{ExpertId, ExpertModel, ModelConfig};
pub use synthgen::SynthSpec;
pub use trainer::{LrTable, TrainConfig};
