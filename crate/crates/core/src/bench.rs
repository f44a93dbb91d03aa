//! Training-time scalability: wall clock for a fixed number of epochs over
//! nested random subsets of one corpus, with a least-squares line through
//! the timings.

use std::io::Write;

use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_synthetic, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::rng::{Purpose, Stream};
use crate::training::{build_language_model, prepare, TrainConfig, Trainer};

pub const BENCH_EPOCHS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub records: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub fit: LinearFit,
}

impl BenchReport {
    /// `seconds[i + 1] / seconds[i]` for each adjacent pair of sizes.
    pub fn adjacent_ratios(&self) -> Vec<f64> {
        self.rows.windows(2).map(|w| w[1].seconds / w[0].seconds).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Ordinary least squares of `y` on `x`. R² is 1 when `y` is constant.
pub fn linear_fit(points: &[(f64, f64)]) -> Result<LinearFit> {
    if points.len() < 2 {
        return Err(Error::Config("a linear fit needs at least two points".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("a linear fit needs two distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Nested subsets: the first `n` records of one seeded permutation.
pub fn nested_subset(pool: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > pool.len() {
        return Err(Error::Config(format!("subset size {n} outside 1..={}", pool.len())));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    Stream::new(seed, Purpose::Subsample).shuffle(&mut order);
    order.truncate(n);
    order.sort_unstable();
    Ok(pool.subset(&order))
}

/// Trains `BENCH_EPOCHS` epochs (early stopping off) on a subset of each
/// size drawn from one corpus generated from `spec` at the largest size.
/// Only the epochs are timed; language-model preparation is excluded.
pub fn scalability(cfg: &TrainConfig, spec: &SyntheticSpec, sizes: &[usize]) -> Result<BenchReport> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("bench sizes must be non-empty and strictly increasing".into()));
    }
    let largest = *sizes.last().unwrap();
    let pool = generate_synthetic(&SyntheticSpec {
        n_records: largest,
        ..spec.clone()
    })?;
    bench_on(cfg, &pool, sizes)
}

/// [`scalability`] over subsets of an existing corpus.
pub fn bench_on(cfg: &TrainConfig, pool: &Dataset, sizes: &[usize]) -> Result<BenchReport> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("bench sizes must be non-empty and strictly increasing".into()));
    }
    let cfg = TrainConfig {
        epochs: BENCH_EPOCHS,
        patience: 0,
        ..cfg.clone()
    };
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let data = nested_subset(pool, n, cfg.seed)?;
        let prep = prepare(&cfg, &data)?;
        let lm = build_language_model(&cfg, &prep, None)?;
        let out = Trainer::new(&cfg, &prep, lm.model)?.run()?;
        let seconds = out.history.total_seconds();
        info!("bench {n} records: {seconds:.2}s");
        rows.push(BenchRow { records: n, seconds });
    }
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.records as f64, r.seconds)).collect();
    let fit = if points.len() >= 2 {
        linear_fit(&points)?
    } else {
        LinearFit {
            slope: 0.0,
            intercept: points[0].1,
            r_squared: 1.0,
        }
    };
    Ok(BenchReport { rows, fit })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_fits_perfectly() {
        let f = linear_fit(&[(1.0, 3.0), (2.0, 5.0), (4.0, 9.0)]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn known_residuals() {
        // y = x + noise (+1, -1, +1, -1) on x = 0..4: slope 0.6, intercept 0.6.
        let f = linear_fit(&[(0.0, 1.0), (1.0, 0.0), (2.0, 3.0), (3.0, 2.0)]).unwrap();
        assert!((f.slope - 0.6).abs() < 1e-12);
        assert!((f.intercept - 0.6).abs() < 1e-12);
        // syy = 5, sse = 3.2
        assert!((f.r_squared - 0.36).abs() < 1e-12);
    }

    #[test]
    fn subsets_nest() {
        let pool = generate_synthetic(&SyntheticSpec {
            n_records: 50,
            ..Default::default()
        })
        .unwrap();
        let a = nested_subset(&pool, 10, 3).unwrap();
        let b = nested_subset(&pool, 20, 3).unwrap();
        assert!(a.records.iter().all(|r| b.records.contains(r)));
        assert!(nested_subset(&pool, 51, 3).is_err());
    }

    #[test]
    fn sizes_must_increase() {
        let cfg = TrainConfig::default();
        let spec = SyntheticSpec::default();
        assert!(scalability(&cfg, &spec, &[2, 1]).is_err());
        assert!(scalability(&cfg, &spec, &[]).is_err());
    }
}
