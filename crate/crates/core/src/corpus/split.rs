use crate::error::{Error, Result};
use crate::rng::{Purpose, Stream};

use super::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Seeded shuffle followed by contiguous slicing into train/val/test.
pub fn split_dataset(d: &Dataset, ratios: SplitRatios, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let SplitRatios { train, val, test } = ratios;
    if [train, val, test].iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::InvalidSplit(format!("negative ratio in {ratios:?}")));
    }
    if ((train + val + test) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSplit(format!("ratios {ratios:?} do not sum to 1")));
    }
    let n = d.len();
    let n_train = (n as f64 * train).round() as usize;
    let n_val = ((n as f64 * val).round() as usize).min(n.saturating_sub(n_train));
    let n_test = n - n_train - n_val;
    for (name, size) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if size == 0 {
            return Err(Error::InvalidSplit(format!("{name} split of {n} records is empty")));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    Stream::new(seed, Purpose::Split).shuffle(&mut order);
    Ok((
        d.subset(&order[..n_train]),
        d.subset(&order[n_train..n_train + n_val]),
        d.subset(&order[n_train + n_val..]),
    ))
}
