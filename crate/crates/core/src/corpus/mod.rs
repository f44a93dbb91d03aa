//! Review records, ingestion, vocabularies, splitting and statistics.

mod io;
mod split;
mod stats;
mod synthetic;
mod text;
mod vocab;

pub use io::{load_dataset, parse_dataset, write_dataset, DatasetFormat};
pub use split::{split_dataset, SplitRatios};
pub use stats::{dataset_stats, DatasetStats};
pub use synthetic::{generate_synthetic, generate_synthetic_with_truth, SyntheticCorpus, SyntheticSpec};
pub use text::{normalize_aspect, normalize_text, tokenize};
pub use vocab::{build_vocab, AspectVocabulary, Vocabulary, BOS, EOS, PAD, UNK};

use serde::{Deserialize, Serialize};

/// One `(user, item, rating, review, aspects)` observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub review: String,
    pub aspects: Vec<String>,
}

impl ReviewRecord {
    /// Rating mapped from `[1, 5]` onto `[0, 1]`.
    pub fn normalized_rating(&self) -> f64 {
        (self.rating - 1.0) / 4.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Ingested,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<ReviewRecord>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(records: Vec<ReviewRecord>, provenance: Provenance) -> Self {
        Dataset {
            records,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ReviewRecord> {
        self.records.iter()
    }

    /// Distinct user ids in first-seen order.
    pub fn users(&self) -> Vec<String> {
        distinct(self.records.iter().map(|r| r.user_id.as_str()))
    }

    /// Distinct item ids in first-seen order.
    pub fn items(&self) -> Vec<String> {
        distinct(self.records.iter().map(|r| r.item_id.as_str()))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            provenance: self.provenance,
        }
    }
}

fn distinct<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    ids.filter(|id| seen.insert(*id)).map(str::to_owned).collect()
}
