//! Gradient and oracle suites shared by the focused tests and the
//! acceptance run.

use std::collections::HashSet;

use promptrec::autodiff::{grad_check, Axis, GradCheckConfig, Graph, ParamStore, Tensor, Var};
use promptrec::eval::{auc, precision_recall_f1, rmse_mae, AUC_POSITIVE_THRESHOLD};
use promptrec::lm::{perplexity, LanguageModel, LmConfig};
use promptrec::prompt::{extraction_loss, Pooling};
use promptrec::recommender::{attention_weights, modulate_aspect, rec_loss, AttentionAxis, ATTN_B, ATTN_W};
use promptrec::rng::{Purpose, Stream};
use promptrec::training::{Ablation, Model};
use promptrec::Result;

use super::{merged, tiny_model, unmerge};

/// Worst relative error over every instance of one suite.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub instances: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome {
            instances: 0,
            worst: 0.0,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, label: String, err: f64, tol: f64) {
        self.instances += 1;
        self.worst = self.worst.max(err);
        if !(err <= tol) {
            self.failures.push(format!("{label}: {err:e}"));
        }
    }
}

pub const GRAD_TOL: f64 = 1e-4;

fn grad_cfg() -> GradCheckConfig {
    GradCheckConfig {
        step: 1e-5,
        tol: GRAD_TOL,
        max_entries: Some(24),
        ..Default::default()
    }
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut Stream) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| std * rng.normal())
}

fn randomize_finetune_layer(model: &mut Model, seed: u64) {
    let mut rng = Stream::with_stream_id(seed, 700);
    for name in ["lm.ft.w", "lm.ft.b"] {
        if let Ok(t) = model.lm.params.get_mut(name) {
            for v in t.data_mut() {
                *v = 0.3 * rng.normal();
            }
        }
    }
}

/// Variant checked by extraction instance `n`.
fn extraction_variant(n: u64) -> Model {
    let ablation = [Ablation::Full, Ablation::DiscretePrompt, Ablation::UserOnlyPrompt, Ablation::NoJoint][n as usize % 4];
    let (_, mut model) = tiny_model(100 + n, ablation);
    match n % 3 {
        1 => model.config.pooling = Pooling::Mean,
        2 => {
            model.config.tune_finetune_layer = true;
            model.lm.params.set_trainable_prefix("lm.ft.", true);
        }
        _ => {}
    }
    randomize_finetune_layer(&mut model, n);
    model
}

/// Extraction loss summed over a two-record batch.
pub fn extraction_suite(instances: u64) -> Outcome {
    let mut out = Outcome::new();
    for n in 0..instances {
        let model = extraction_variant(n);
        let batch = &batch_of_two(&model);
        let all = merged(&model);
        let report = grad_check(
            |g, s| {
                let m = unmerge(&model, s);
                let mut losses = Vec::new();
                for e in batch {
                    let z = m.extraction_logits(g, e.user_row, e.item_row, &e.tokens)?;
                    losses.push(extraction_loss(g, z, &e.truth)?);
                }
                let stacked = g.concat_rows(&losses)?;
                g.sum(stacked)
            },
            &all,
            &grad_cfg(),
        )
        .unwrap();
        out.record(format!("extraction #{n}"), report.max_rel_error(), GRAD_TOL);
    }
    out
}

/// Two encoded records of the model's own corpus with known aspects.
fn batch_of_two(model: &Model) -> Vec<promptrec::training::Encoded> {
    let recs = model.encode_all(&super::tiny_data(model.config.seed)).unwrap();
    recs.into_iter().filter(|e| !e.truth.is_empty()).take(2).collect()
}

/// Rating loss over a two-record batch with ground-truth aspects.
pub fn rec_suite(instances: u64) -> Outcome {
    let mut out = Outcome::new();
    for n in 0..instances {
        let ablation = [Ablation::Full, Ablation::NoJoint, Ablation::NoAttention, Ablation::NoPrompt][n as usize % 4];
        let (_, mut model) = tiny_model(200 + n, ablation);
        if n % 2 == 1 {
            model.config.attention_axis = AttentionAxis::Aspects;
        }
        let batch = &batch_of_two(&model);
        let all = merged(&model);
        let report = grad_check(
            |g, s| {
                let m = unmerge(&model, s);
                let mut preds = Vec::new();
                let mut targets = Vec::new();
                for e in batch {
                    preds.push(m.rating(g, e.user_row, e.item_row, &m.padded_truth(&e.truth))?);
                    targets.push(e.target());
                }
                let column = g.concat_rows(&preds)?;
                rec_loss(g, column, &targets)
            },
            &all,
            &grad_cfg(),
        )
        .unwrap();
        out.record(format!("rating #{n}"), report.max_rel_error(), GRAD_TOL);
    }
    out
}

/// Attention weights and modulation of K aspect rows, contracted with a
/// random probe.
pub fn attention_suite(instances: u64) -> Outcome {
    let mut out = Outcome::new();
    for n in 0..instances {
        let mut rng = Stream::with_stream_id(300 + n, 7);
        let (k, d_a, d_u, d_i) = (2 + n as usize % 3, 2 + n as usize % 4, 3, 2);
        let mut store = ParamStore::new();
        store.insert("w_a", normal(k, d_a, 1.0, &mut rng), true).unwrap();
        store.insert("w_u", normal(1, d_u, 1.0, &mut rng), true).unwrap();
        store.insert("w_i", normal(1, d_i, 1.0, &mut rng), true).unwrap();
        store.insert(ATTN_W, normal(d_u + d_i, d_a, 0.5, &mut rng), true).unwrap();
        store.insert(ATTN_B, normal(1, d_a, 0.5, &mut rng), true).unwrap();
        let probe = normal(k, d_a, 1.0, &mut rng);
        let axis = if n % 2 == 0 { AttentionAxis::Components } else { AttentionAxis::Aspects };
        let report = grad_check(
            |g: &mut Graph, s: &ParamStore| -> Result<Var> {
                let w_a = g.param(s, "w_a")?;
                let w_u = g.param(s, "w_u")?;
                let w_i = g.param(s, "w_i")?;
                let attn = attention_weights(g, s, w_a, w_u, w_i, axis)?;
                let fused = modulate_aspect(g, w_a, attn)?;
                let p = g.input(probe.clone());
                let prod = g.mul(fused, p)?;
                g.sum(prod)
            },
            &store,
            &grad_cfg(),
        )
        .unwrap();
        out.record(format!("attention #{n} {axis:?}"), report.max_rel_error(), GRAD_TOL);
    }
    out
}

fn random_lm(seed: u64, vocab: usize) -> LanguageModel {
    let config = LmConfig {
        vocab_size: vocab,
        d_model: 8,
        layers: 1,
        heads: 2,
        max_seq_len: 10,
        finetune_width: 8,
    };
    LanguageModel::new(config, seed).unwrap()
}

/// Next-token loss with respect to the fine-tuning layer only.
pub fn finetune_suite(instances: u64) -> Outcome {
    let mut out = Outcome::new();
    for n in 0..instances {
        let mut lm = random_lm(400 + n, 9);
        lm.freeze_base();
        lm.add_finetune_layer().unwrap();
        let mut rng = Stream::with_stream_id(400 + n, 8);
        for name in ["lm.ft.w", "lm.ft.b"] {
            for v in lm.params.get_mut(name).unwrap().data_mut() {
                *v = 0.3 * rng.normal();
            }
        }
        let len = 3 + n as usize % 6;
        let ids: Vec<usize> = (0..len).map(|_| rng.below(9)).collect();
        let config = lm.config.clone();
        let report = grad_check(
            |g, s| {
                let m = LanguageModel {
                    config: config.clone(),
                    params: s.clone(),
                };
                Ok(m.next_token_loss(g, &ids)?.0)
            },
            &lm.params,
            &grad_cfg(),
        )
        .unwrap();
        let ft_checked = report.params.iter().filter(|p| p.name.starts_with("lm.ft.")).count();
        let err = if ft_checked == 2 && report.params.len() == 2 {
            report.max_rel_error()
        } else {
            f64::INFINITY
        };
        out.record(format!("finetune #{n}"), err, GRAD_TOL);
    }
    out
}

// Brute-force oracles.

/// `-Σ_k ln(e^{z_t} / Σ_j e^{z_j})`, one exponential per class.
pub fn oracle_extraction_loss(logits: &[f64], truth: &[usize]) -> f64 {
    let denom: f64 = logits.iter().map(|z| z.exp()).sum();
    truth.iter().map(|&t| -(logits[t].exp() / denom).ln()).sum()
}

pub fn oracle_rec_loss(y: &[f64], y_hat: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..y.len() {
        let d = y[i] - y_hat[i];
        total += d * d;
    }
    total
}

/// Each position re-runs the model on its own prefix and reads the last row.
pub fn oracle_perplexity(lm: &LanguageModel, seqs: &[Vec<usize>]) -> f64 {
    let (mut nll, mut count) = (0.0, 0usize);
    for ids in seqs {
        for t in 1..ids.len() {
            let mut g = Graph::with_filter(|_| false);
            let body = lm.embed_review(&mut g, &ids[..t]).unwrap();
            let out = lm.forward(&mut g, None, body).unwrap();
            let logits = g.value(out.logits).row_slice(t - 1).to_vec();
            let denom: f64 = logits.iter().map(|z| z.exp()).sum();
            nll -= (logits[ids[t]].exp() / denom).ln();
            count += 1;
        }
    }
    (nll / count as f64).exp()
}

pub fn oracle_prf(pred: &[&str], truth: &[&str]) -> (f64, f64, f64) {
    let t: HashSet<&str> = truth.iter().copied().collect();
    let hits = pred.iter().filter(|p| t.contains(*p)).count() as f64;
    let p = hits / pred.len() as f64;
    let r = hits / t.len() as f64;
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

pub fn oracle_rmse_mae(pairs: &[(f64, f64)]) -> (f64, f64) {
    let n = pairs.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for &(y, p) in pairs {
        se += (y - p) * (y - p);
        ae += (y - p).abs();
    }
    ((se / n).sqrt(), ae / n)
}

/// Fraction of (positive, negative) pairs ordered correctly, ties half.
pub fn oracle_auc(pairs: &[(f64, f64)]) -> f64 {
    let (mut wins, mut total) = (0.0, 0.0);
    for &(_, sp) in pairs.iter().filter(|(y, _)| *y >= AUC_POSITIVE_THRESHOLD) {
        for &(_, sn) in pairs.iter().filter(|(y, _)| *y < AUC_POSITIVE_THRESHOLD) {
            total += 1.0;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    wins / total
}

pub const ORACLE_TOL: f64 = 1e-9;
pub const PERPLEXITY_TOL: f64 = 1e-6;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Every metric and loss against its oracle on `instances` random cases.
/// Returns one outcome per quantity.
pub fn oracle_suite(instances: u64) -> Vec<(&'static str, Outcome)> {
    let mut ext = Outcome::new();
    let mut rec = Outcome::new();
    let mut ppl = Outcome::new();
    let mut prf = Outcome::new();
    let mut rm = Outcome::new();
    let mut au = Outcome::new();
    let terms: Vec<String> = (0..8).map(|j| format!("aspect{j}")).collect();
    for n in 0..instances {
        let mut rng = Stream::new(500 + n, Purpose::Subsample);

        let v = 3 + rng.below(12);
        let logits: Vec<f64> = (0..v).map(|_| 3.0 * rng.normal()).collect();
        let k = 1 + rng.below(v.min(4));
        let mut ids: Vec<usize> = (0..v).collect();
        rng.shuffle(&mut ids);
        let truth = &ids[..k];
        let mut g = Graph::new();
        let z = g.input(Tensor::row(logits.clone()));
        let l = extraction_loss(&mut g, z, truth).unwrap();
        ext.record(format!("#{n}"), rel(g.value(l).item(), oracle_extraction_loss(&logits, truth)), ORACLE_TOL);

        let m = 1 + rng.below(12);
        let y: Vec<f64> = (0..m).map(|_| rng.uniform()).collect();
        let y_hat: Vec<f64> = (0..m).map(|_| rng.uniform()).collect();
        let mut g = Graph::new();
        let p = g.input(Tensor::new(m, 1, y_hat.clone()).unwrap());
        let l = rec_loss(&mut g, p, &y).unwrap();
        rec.record(format!("#{n}"), rel(g.value(l).item(), oracle_rec_loss(&y, &y_hat)), ORACLE_TOL);

        let lm = random_lm(600 + n, 7);
        let seqs: Vec<Vec<usize>> = (0..1 + rng.below(3))
            .map(|_| (0..2 + rng.below(7)).map(|_| rng.below(7)).collect())
            .collect();
        ppl.record(
            format!("#{n}"),
            rel(perplexity(&lm, &seqs).unwrap(), oracle_perplexity(&lm, &seqs)),
            PERPLEXITY_TOL,
        );

        let mut pool: Vec<&str> = terms.iter().map(String::as_str).collect();
        rng.shuffle(&mut pool);
        let pred = &pool[..3];
        let mut pool2 = pool.clone();
        rng.shuffle(&mut pool2);
        let truth = &pool2[..1 + rng.below(4)];
        let got = precision_recall_f1(pred, truth).unwrap();
        let want = oracle_prf(pred, truth);
        let err = rel(got.precision, want.0).max(rel(got.recall, want.1)).max(rel(got.f1, want.2));
        prf.record(format!("#{n}"), err, ORACLE_TOL);

        let pairs: Vec<(f64, f64)> = (0..1 + rng.below(20)).map(|_| (rng.uniform(), rng.uniform())).collect();
        let (r, a) = rmse_mae(&pairs).unwrap();
        let (wr, wa) = oracle_rmse_mae(&pairs);
        rm.record(format!("#{n}"), rel(r, wr).max(rel(a, wa)), ORACLE_TOL);

        // Coarse scores force ties; ratings cover both classes.
        let size = 2 + rng.below(10);
        let mut pairs: Vec<(f64, f64)> = (0..size)
            .map(|_| (1.0 + 4.0 * rng.uniform(), (rng.below(5) as f64) / 4.0))
            .collect();
        pairs[0].0 = 5.0;
        pairs[1].0 = 1.0;
        au.record(format!("#{n}"), rel(auc(&pairs).unwrap(), oracle_auc(&pairs)), ORACLE_TOL);
    }
    vec![
        ("extraction_loss", ext),
        ("rec_loss", rec),
        ("perplexity", ppl),
        ("precision/recall/f1", prf),
        ("rmse/mae", rm),
        ("auc", au),
    ]
}

/// The two worked metric cases: identical sets, and two of three matching.
pub fn worked_metric_cases() -> bool {
    let a = precision_recall_f1(&["family", "movie", "freakish"], &["family", "movie", "freakish"]).unwrap();
    let b = precision_recall_f1(&["family", "movie", "good"], &["family", "movie", "freakish"]).unwrap();
    let third = 2.0 / 3.0;
    a.precision == 1.0
        && a.recall == 1.0
        && a.f1 == 1.0
        && (b.precision - third).abs() < ORACLE_TOL
        && (b.recall - third).abs() < ORACLE_TOL
        && (b.f1 - third).abs() < ORACLE_TOL
}

pub fn softmax_rows_sum_to_one(g: &Graph, v: Var, axis: Axis) -> f64 {
    let t = g.value(v);
    let sums: Vec<f64> = match axis {
        Axis::Row => (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect(),
        Axis::Col => (0..t.cols()).map(|c| (0..t.rows()).map(|r| t.get(r, c)).sum()).collect(),
    };
    sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
}
