//! Extraction and rating metrics, multi-run aggregation and reports.

use std::fmt::Write as _;
use std::io::Write;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Precision, recall and F1 at K.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ExtractionMetrics {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ExtractionMetrics { precision, recall, f1 }
    }
}

/// Metrics for one record: `|pred ∩ truth| / |pred|` and
/// `|pred ∩ truth| / |truth|`, matching on exact (normalized) strings.
pub fn precision_recall_f1<S: AsRef<str>, T: AsRef<str>>(pred: &[S], truth: &[T]) -> Result<ExtractionMetrics> {
    if pred.is_empty() || truth.is_empty() {
        return Err(Error::Config("precision/recall need non-empty predictions and truth".into()));
    }
    let mut truth_set: Vec<&str> = truth.iter().map(AsRef::as_ref).collect();
    truth_set.sort_unstable();
    truth_set.dedup();
    let mut pred_set: Vec<&str> = pred.iter().map(AsRef::as_ref).collect();
    pred_set.sort_unstable();
    pred_set.dedup();
    let hits = pred_set.iter().filter(|p| truth_set.binary_search(p).is_ok()).count() as f64;
    Ok(ExtractionMetrics::from_pr(
        hits / pred.len() as f64,
        hits / truth_set.len() as f64,
    ))
}

/// Corpus-level metrics: mean precision, mean recall, and their harmonic
/// mean.
pub fn aggregate_extraction(per_record: &[ExtractionMetrics]) -> Result<ExtractionMetrics> {
    if per_record.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = per_record.len() as f64;
    let p = per_record.iter().map(|m| m.precision).sum::<f64>() / n;
    let r = per_record.iter().map(|m| m.recall).sum::<f64>() / n;
    Ok(ExtractionMetrics::from_pr(p, r))
}

/// RMSE, MAE and AUC on the normalized rating scale. AUC is `None` when the
/// sample holds a single class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub auc: Option<f64>,
}

/// `(sqrt(mean (y - ŷ)²), mean |y - ŷ|)` over `(y, ŷ)` pairs.
pub fn rmse_mae(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = pairs.len() as f64;
    let se = pairs.iter().map(|(y, p)| (y - p).powi(2)).sum::<f64>();
    let ae = pairs.iter().map(|(y, p)| (y - p).abs()).sum::<f64>();
    Ok(((se / n).sqrt(), ae / n))
}

/// Raw star ratings at or above this count as positives for AUC.
pub const AUC_POSITIVE_THRESHOLD: f64 = 4.0;

/// Mann–Whitney AUC over `(raw rating, score)` pairs, ties counting half.
pub fn auc(pairs: &[(f64, f64)]) -> Result<f64> {
    let n_pos = pairs.iter().filter(|(y, _)| *y >= AUC_POSITIVE_THRESHOLD).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined(if n_pos == 0 { "no positives" } else { "no negatives" }));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[a].1.total_cmp(&pairs[b].1));
    // Sum of 1-based mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && pairs[order[end]].1 == pairs[order[start]].1 {
            end += 1;
        }
        let mid = (start + end + 1) as f64 / 2.0;
        let pos_in_tie = order[start..end]
            .iter()
            .filter(|&&i| pairs[i].0 >= AUC_POSITIVE_THRESHOLD)
            .count();
        rank_sum += mid * pos_in_tie as f64;
        start = end;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// `rating_pairs` holds `(raw rating, normalized prediction)`.
pub fn rec_metrics(rating_pairs: &[(f64, f64)]) -> Result<RecMetrics> {
    let normalized: Vec<(f64, f64)> = rating_pairs.iter().map(|&(r, p)| ((r - 1.0) / 4.0, p)).collect();
    let (rmse, mae) = rmse_mae(&normalized)?;
    let auc = match auc(rating_pairs) {
        Ok(a) => Some(a),
        Err(Error::AucUndefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(RecMetrics { rmse, mae, auc })
}

/// Named metric values of one run, in report order.
pub type MetricSet = IndexMap<String, f64>;

/// Metric set for one evaluation, in the order they are reported.
pub fn metric_set(ext: &ExtractionMetrics, rec: &RecMetrics) -> MetricSet {
    let mut m = MetricSet::new();
    m.insert("precision@k".into(), ext.precision);
    m.insert("recall@k".into(), ext.recall);
    m.insert("f1".into(), ext.f1);
    m.insert("rmse".into(), rec.rmse);
    m.insert("mae".into(), rec.mae);
    if let Some(a) = rec.auc {
        m.insert("auc".into(), a);
    }
    m
}

/// Whether larger values of `metric` are better.
pub fn higher_is_better(metric: &str) -> bool {
    !matches!(metric, "rmse" | "mae")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Per-metric mean and sample standard deviation over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub runs: usize,
    pub metrics: IndexMap<String, MeanStd>,
}

impl RunAggregate {
    pub fn get(&self, metric: &str) -> Option<MeanStd> {
        self.metrics.get(metric).copied()
    }
}

pub fn aggregate_runs(runs: &[MetricSet]) -> Result<RunAggregate> {
    if runs.len() < 2 {
        return Err(Error::TooFewRuns(runs.len()));
    }
    let n = runs.len() as f64;
    let mut metrics = IndexMap::new();
    for name in runs[0].keys() {
        let values: Vec<f64> = runs
            .iter()
            .map(|r| {
                r.get(name)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("metric {name} missing from a run")))
            })
            .collect::<Result<_>>()?;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        metrics.insert(name.clone(), MeanStd { mean, std: var.sqrt() });
    }
    Ok(RunAggregate {
        runs: runs.len(),
        metrics,
    })
}

/// Percentage by which `model` beats `baseline`, relative to the model's
/// value and signed so that positive means better.
pub fn improvement_pct(model: f64, baseline: f64, higher_better: bool) -> f64 {
    let dir = if higher_better { 1.0 } else { -1.0 };
    dir * (model - baseline) / model * 100.0
}

/// `(new - old) / old`.
pub fn relative_change(new: f64, old: f64) -> f64 {
    (new - old) / old
}

/// Two-sided Welch test at the 0.95 level on summary statistics.
pub fn significantly_different(a: MeanStd, n_a: usize, b: MeanStd, n_b: usize) -> bool {
    if n_a < 2 || n_b < 2 {
        return false;
    }
    let va = a.std.powi(2) / n_a as f64;
    let vb = b.std.powi(2) / n_b as f64;
    let se = (va + vb).sqrt();
    if se == 0.0 {
        return a.mean != b.mean;
    }
    let t = (a.mean - b.mean).abs() / se;
    let df = (va + vb).powi(2) / (va.powi(2) / (n_a as f64 - 1.0) + vb.powi(2) / (n_b as f64 - 1.0));
    let crit = StudentsT::new(0.0, 1.0, df)
        .map(|d| d.inverse_cdf(0.975))
        .unwrap_or(f64::INFINITY);
    t > crit
}

/// One `(dataset, variant)` aggregate in a report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportEntry {
    pub dataset: String,
    pub variant: String,
    pub aggregate: RunAggregate,
}

/// CSV with columns `dataset,variant,metric,mean,std`.
pub fn write_report_csv<W: Write>(entries: &[ReportEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["dataset", "variant", "metric", "mean", "std"])?;
    for e in entries {
        for (metric, ms) in &e.aggregate.metrics {
            w.write_record([
                e.dataset.as_str(),
                e.variant.as_str(),
                metric.as_str(),
                &ms.mean.to_string(),
                &ms.std.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Plain-text table, one block per dataset: a row per variant with the mean
/// of every metric and the standard deviation in parentheses underneath.
/// When `reference` names a variant, other variants' means are marked `*`
/// where they differ from it under [`significantly_different`].
pub fn format_table(entries: &[ReportEntry], reference: Option<&str>) -> String {
    let mut out = String::new();
    let mut datasets: Vec<&str> = entries.iter().map(|e| e.dataset.as_str()).collect();
    datasets.dedup();
    for ds in datasets {
        let rows: Vec<&ReportEntry> = entries.iter().filter(|e| e.dataset == ds).collect();
        let metrics: Vec<&String> = rows[0].aggregate.metrics.keys().collect();
        let reference = reference.and_then(|r| rows.iter().find(|e| e.variant == r));
        let name_w = rows.iter().map(|e| e.variant.len()).max().unwrap_or(0).max(7);
        let _ = writeln!(out, "{ds}");
        let _ = write!(out, "{:<name_w$}", "variant");
        for m in &metrics {
            let _ = write!(out, " {m:>12}");
        }
        out.push('\n');
        for e in &rows {
            let _ = write!(out, "{:<name_w$}", e.variant);
            for m in &metrics {
                let cell = match e.aggregate.get(m) {
                    Some(ms) => {
                        let star = reference
                            .filter(|r| r.variant != e.variant)
                            .and_then(|r| r.aggregate.get(m).map(|rm| (r.aggregate.runs, rm)))
                            .map(|(n, rm)| significantly_different(ms, e.aggregate.runs, rm, n))
                            .unwrap_or(false);
                        format!("{:.4}{}", ms.mean, if star { "*" } else { "" })
                    }
                    None => "-".into(),
                };
                let _ = write!(out, " {cell:>12}");
            }
            out.push('\n');
            let _ = write!(out, "{:<name_w$}", "");
            for m in &metrics {
                let cell = e.aggregate.get(m).map(|ms| format!("({:.4})", ms.std)).unwrap_or_default();
                let _ = write!(out, " {cell:>12}");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}
