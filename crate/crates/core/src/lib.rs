//! Joint personalized aspect extraction and aspect-based rating prediction.
//!
//! A small causal transformer is pre-trained and fine-tuned on review text,
//! then frozen. Per-user and per-item embedding rows are concatenated into a
//! soft prompt that is prepended to the review embedding, and the final hidden
//! state is classified into aspect terms. The extracted aspects are embedded,
//! modulated by user/item attention and fed with the user/item embeddings to a
//! rating regressor. Both objectives share the embedding tables and are
//! optimized by alternating SGD.
//!
//! Module map:
//!
//! - [`corpus`]: records, ingestion, vocabularies, splitting, statistics and
//!   the synthetic generator with planted personalized aspects.
//! - [`autodiff`]: tensors, parameter stores, a reverse-mode tape, SGD and a
//!   finite-difference gradient checker.
//! - [`lm`]: the causal transformer and its fine-tuning layer.
//! - [`prompt`]: soft prompts, aspect logits, the extraction loss and top-K
//!   decoding.
//! - [`recommender`]: aspect attention, modulation and the rating head.
//! - [`training`]: configuration, initialization, alternating epochs and the
//!   ablation wiring.
//! - [`eval`]: extraction and rating metrics, run aggregation and reports.
//! - [`checkpoint`]: the binary checkpoint container.
//! - [`bench`]: training-time scalability over nested subsets.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod lm;
pub mod prompt;
pub mod recommender;
pub mod rng;
pub mod training;

pub use bench::BenchReport;
pub use autodiff::{Gradients, Graph, ParamStore, Tensor, Var};
pub use corpus::{AspectVocabulary, Dataset, DatasetStats, ReviewRecord, SyntheticSpec, Vocabulary};
pub use error::{Error, Result};
pub use eval::{ExtractionMetrics, RecMetrics, RunAggregate};
pub use lm::{LanguageModel, LmConfig};
pub use prompt::AspectPrediction;
pub use recommender::RatingPrediction;
pub use training::{Ablation, Model, TrainConfig, TrainHistory, Trainer};
