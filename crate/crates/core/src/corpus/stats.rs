use crate::error::{Error, Result};

use super::Dataset;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub n_ratings: usize,
    pub n_users: usize,
    pub n_items: usize,
    /// Observed ratings over all user-item pairs.
    pub sparsity: f64,
}

impl DatasetStats {
    pub fn from_counts(n_ratings: usize, n_users: usize, n_items: usize) -> Self {
        DatasetStats {
            n_ratings,
            n_users,
            n_items,
            sparsity: n_ratings as f64 / (n_users as f64 * n_items as f64),
        }
    }

    /// Sparsity as a percentage with three decimals, e.g. `0.522%`.
    pub fn sparsity_percent(&self) -> String {
        format!("{:.3}%", self.sparsity * 100.0)
    }
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "ratings={} users={} items={} sparsity={}",
            self.n_ratings,
            self.n_users,
            self.n_items,
            self.sparsity_percent()
        )
    }
}

pub fn dataset_stats(d: &Dataset) -> Result<DatasetStats> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(DatasetStats::from_counts(d.len(), d.users().len(), d.items().len()))
}
