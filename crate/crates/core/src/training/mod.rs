//! Alternating two-phase training, its configuration and the ablation
//! variants.
//!
//! Per batch, the extraction step updates the embedding tables and the
//! aspect head from the extraction loss; the recommendation step then feeds
//! the predicted aspects to the recommender and updates its parameters and
//! the embedding tables from the rating loss. The language model stays
//! frozen throughout.

mod config;
mod model;
mod trainer;

pub use config::{Ablation, Alternation, TrainConfig};
pub use model::{Encoded, Evaluation, Model, REC_ITEM_TABLE, REC_USER_TABLE};
pub use trainer::{
    build_language_model, in_extraction_phase, in_recommendation_phase, init_params, prepare, train, EpochLosses, EpochRecord, LmStages, Prepared, TrainHistory,
    TrainOutcome, Trainer,
};
