use std::io::Write;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, Gradients, Graph, ParamStore, Tensor, Var};
use crate::corpus::{build_vocab, split_dataset, tokenize, AspectVocabulary, Dataset, Vocabulary};
use crate::error::{Error, Result};
use crate::lm::{finetune, pretrain_base, LanguageModel, FINETUNE_PREFIX};
use crate::prompt::{decode_topk, extraction_loss, EmbeddingTables, IdMap, PromptMode, ITEM_TABLE, HEAD_B, HEAD_W, ITEM_TOKENS, USER_TABLE, USER_TOKENS};
use crate::recommender::{init_rec_params, rec_loss};
use crate::rng::{Purpose, Stream};

use super::config::{Alternation, TrainConfig};
use super::model::{Encoded, Evaluation, Model, REC_ITEM_TABLE, REC_USER_TABLE};

/// Splits, vocabularies and id maps shared by every variant trained on one
/// dataset with one seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub vocab: Vocabulary,
    pub aspects: AspectVocabulary,
    /// Users and items of the whole dataset, so held-out records resolve.
    pub users: IdMap,
    pub items: IdMap,
}

impl Prepared {
    pub fn sequences(&self, d: &Dataset, max_len: usize) -> Vec<Vec<usize>> {
        d.iter().map(|r| tokenize(&r.review, &self.vocab, max_len)).collect()
    }
}

pub fn prepare(cfg: &TrainConfig, data: &Dataset) -> Result<Prepared> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (train, val, test) = split_dataset(data, cfg.split_ratios(), cfg.seed)?;
    let vocab = build_vocab(&train, cfg.vocab_min_freq);
    let aspects = AspectVocabulary::build(&train);
    if aspects.len() < cfg.k {
        return Err(Error::Config(format!(
            "training split has {} distinct aspects, fewer than k = {}",
            aspects.len(),
            cfg.k
        )));
    }
    Ok(Prepared {
        users: IdMap::from(data.users()),
        items: IdMap::from(data.items()),
        train,
        val,
        test,
        vocab,
        aspects,
    })
}

/// Language-model stages of a run.
#[derive(Debug, Clone)]
pub struct LmStages {
    /// Pre-trained base before the fine-tuning layer is added.
    pub base: LanguageModel,
    /// Model used for prompt tuning: fine-tuned unless ablated.
    pub model: LanguageModel,
    pub pretrain_curve: Vec<f64>,
    pub finetune_curve: Vec<f64>,
}

/// Pre-trains the base on `generic` reviews (or the training reviews when
/// none are given), then fine-tunes on the training reviews unless
/// `no_finetune` is set.
pub fn build_language_model(cfg: &TrainConfig, prep: &Prepared, generic: Option<&Dataset>) -> Result<LmStages> {
    let corpus = generic.unwrap_or(&prep.train);
    let seqs = prep.sequences(corpus, cfg.max_review_len);
    let (base, pretrain_curve) = pretrain_base(&seqs, cfg.lm_config(prep.vocab.len()), &cfg.pretrain_opts(), cfg.seed)?;
    let (model, finetune_curve) = if cfg.no_finetune {
        (base.clone(), Vec::new())
    } else {
        let train_seqs = prep.sequences(&prep.train, cfg.max_review_len);
        finetune(base.clone(), &train_seqs, &cfg.finetune_opts(), cfg.seed)?
    };
    Ok(LmStages {
        base,
        model,
        pretrain_curve,
        finetune_curve,
    })
}

fn normal(rows: usize, cols: usize, rng: &mut Stream) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.normal())
}

fn uniform(rows: usize, cols: usize, rng: &mut Stream) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.uniform_in(-0.1, 0.1))
}

/// Task parameters: `N(0, 1)` user/item tables, `U(-0.1, 0.1)` for the
/// recommender and aspect head. Each group draws from its own stream, so
/// variants share the values of the parameters they have in common.
pub fn init_params(cfg: &TrainConfig, n_users: usize, n_items: usize, n_aspects: usize) -> Result<ParamStore> {
    let sub = |i| Stream::sub(cfg.seed, Purpose::Init, i);
    let mut s = ParamStore::new();
    let users = normal(n_users, cfg.d_u, &mut sub(10));
    let items = normal(n_items, cfg.d_i, &mut sub(11));
    if cfg.no_joint {
        s.insert(REC_USER_TABLE, users.clone(), true)?;
        s.insert(REC_ITEM_TABLE, items.clone(), true)?;
    }
    s.insert(USER_TABLE, users, true)?;
    s.insert(ITEM_TABLE, items, true)?;
    let mut head = sub(20);
    s.insert(HEAD_W, uniform(cfg.d_model, n_aspects, &mut head), true)?;
    s.insert(HEAD_B, uniform(1, n_aspects, &mut head), true)?;
    if cfg.prompt_mode() == PromptMode::Discrete {
        s.insert(USER_TOKENS, normal(n_users, cfg.d_model, &mut sub(21)), true)?;
        s.insert(ITEM_TOKENS, normal(n_items, cfg.d_model, &mut sub(22)), true)?;
    }
    init_rec_params(&mut s, &cfg.rec_config(), n_aspects, &mut sub(30))?;
    Ok(s)
}

/// One completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-record training losses.
    pub extraction_loss: f64,
    pub rec_loss: f64,
    pub val_extraction_loss: f64,
    pub val_rec_loss: f64,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
    pub val_rmse: f64,
    pub val_mae: f64,
    pub val_auc: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    /// Copy with wall-clock fields zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> TrainHistory {
        let mut h = self.clone();
        h.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        h
    }

    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean per-record training losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub extraction: f64,
    pub rec: f64,
}

pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model,
    pub history: TrainHistory,
}

/// Parameters the extraction phase may update.
pub fn in_extraction_phase(name: &str, tune_ft: bool) -> bool {
    name.starts_with("emb.") || name.starts_with("ext.") || (tune_ft && name.starts_with(FINETUNE_PREFIX))
}

/// Parameters the recommendation phase may update.
pub fn in_recommendation_phase(name: &str) -> bool {
    name.starts_with("emb.") || name.starts_with("rec.")
}

#[derive(Clone, Copy)]
enum Phase {
    Extraction,
    Recommendation,
    Combined,
}

impl Phase {
    fn name(self) -> &'static str {
        match self {
            Phase::Extraction => "extraction",
            Phase::Recommendation => "recommendation",
            Phase::Combined => "combined",
        }
    }
}

/// Owns the model being trained and the encoded splits.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    train: Vec<Encoded>,
    val: Vec<Encoded>,
    epoch: usize,
}

impl Trainer {
    /// Freezes `lm` (except the fine-tuning layer when configured) and
    /// initializes the task parameters.
    pub fn new(cfg: &TrainConfig, prep: &Prepared, mut lm: LanguageModel) -> Result<Trainer> {
        cfg.validate()?;
        if lm.config.vocab_size != prep.vocab.len() || lm.config.d_model != cfg.d_model {
            return Err(Error::Config("language model does not match the config and vocabulary".into()));
        }
        lm.freeze_all();
        if cfg.tune_finetune_layer {
            lm.params.set_trainable_prefix(FINETUNE_PREFIX, true);
        }
        let params = init_params(cfg, prep.users.len(), prep.items.len(), prep.aspects.len())?;
        let model = Model {
            config: cfg.clone(),
            vocab: prep.vocab.clone(),
            aspects: prep.aspects.clone(),
            tables: EmbeddingTables {
                users: prep.users.clone(),
                items: prep.items.clone(),
                d_u: cfg.d_u,
                d_i: cfg.d_i,
            },
            lm,
            params,
        };
        let train = model.encode_all(&prep.train)?;
        let val = model.encode_all(&prep.val)?;
        Ok(Trainer {
            model,
            train,
            val,
            epoch: 0,
        })
    }

    fn apply(&mut self, grads: Gradients) -> Result<()> {
        let mut grads = grads;
        if self.model.config.grad_clip > 0.0 {
            grads.clip_global_norm(self.model.config.grad_clip);
        }
        let (lm_grads, task_grads) = grads.partition_prefix("lm.");
        let lr = self.model.config.lr;
        sgd_step(&mut self.model.params, &task_grads, lr)?;
        if !lm_grads.is_empty() {
            sgd_step(&mut self.model.lm.params, &lm_grads, lr)?;
        }
        Ok(())
    }

    fn guard<T>(&self, phase: Phase, batch: usize, r: Result<T>) -> Result<T> {
        r.map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence {
                phase: phase.name(),
                epoch: self.epoch,
                batch,
                loss: f64::NAN,
            },
            other => other,
        })
    }

    fn check_loss(&self, phase: Phase, batch: usize, loss: f64) -> Result<()> {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::Divergence {
                phase: phase.name(),
                epoch: self.epoch,
                batch,
                loss,
            })
        }
    }

    /// Extraction forward over `batch`; returns the summed loss node and the
    /// recommender's aspect ids per record.
    fn extraction_terms(&self, g: &mut Graph, batch: &[usize]) -> Result<(Var, Vec<Vec<usize>>)> {
        let m = &self.model;
        let mut losses = Vec::with_capacity(batch.len());
        let mut aspects = Vec::with_capacity(batch.len());
        for &i in batch {
            let e = &self.train[i];
            let logits = m.extraction_logits(g, e.user_row, e.item_row, &e.tokens)?;
            losses.push(extraction_loss(g, logits, &e.truth)?);
            aspects.push(if m.config.teacher_forcing {
                m.padded_truth(&e.truth)
            } else {
                decode_topk(g.value(logits).data(), m.config.k)?.ids
            });
        }
        let stacked = g.concat_rows(&losses)?;
        Ok((g.sum(stacked)?, aspects))
    }

    fn rec_terms(&self, g: &mut Graph, batch: &[usize], aspects: &[Vec<usize>]) -> Result<Var> {
        let mut preds = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for (&i, ids) in batch.iter().zip(aspects) {
            let e = &self.train[i];
            preds.push(self.model.rating(g, e.user_row, e.item_row, ids)?);
            targets.push(e.target());
        }
        let column = g.concat_rows(&preds)?;
        rec_loss(g, column, &targets)
    }

    fn weighted(&self, g: &mut Graph, rec: Var) -> Result<Var> {
        let w = self.model.config.rec_loss_weight;
        if w == 1.0 {
            Ok(rec)
        } else {
            g.scale(rec, w)
        }
    }

    /// Extraction step on the training records at `batch`; `b` only labels
    /// divergence errors. Returns the summed loss and the aspects for the
    /// recommendation step.
    pub fn extraction_step(&mut self, b: usize, batch: &[usize]) -> Result<(f64, Vec<Vec<usize>>)> {
        let tune = self.model.config.tune_finetune_layer;
        let (loss, aspects, grads) = {
            let mut g = Graph::with_filter(move |n| in_extraction_phase(n, tune));
            let r = self.extraction_terms(&mut g, batch);
            let (l, aspects) = self.guard(Phase::Extraction, b, r)?;
            let loss = g.value(l).item();
            self.check_loss(Phase::Extraction, b, loss)?;
            (loss, aspects, g.gradients(l)?)
        };
        self.apply(grads)?;
        Ok((loss, aspects))
    }

    /// Recommendation step on `batch` with the given aspect ids per record.
    pub fn rec_step(&mut self, b: usize, batch: &[usize], aspects: &[Vec<usize>]) -> Result<f64> {
        let (loss, grads) = {
            let mut g = Graph::with_filter(in_recommendation_phase);
            let r = self.rec_terms(&mut g, batch, aspects);
            let l = self.guard(Phase::Recommendation, b, r)?;
            let loss = g.value(l).item();
            self.check_loss(Phase::Recommendation, b, loss)?;
            let objective = self.weighted(&mut g, l)?;
            (loss, g.gradients(objective)?)
        };
        self.apply(grads)?;
        Ok(loss)
    }

    /// Single update on the summed losses.
    fn combined_step(&mut self, b: usize, batch: &[usize]) -> Result<(f64, f64)> {
        let tune = self.model.config.tune_finetune_layer;
        let (l1, l2, grads) = {
            let mut g = Graph::with_filter(move |n| in_extraction_phase(n, tune) || in_recommendation_phase(n));
            let r = self.extraction_terms(&mut g, batch).and_then(|(l1, aspects)| {
                let l2 = self.rec_terms(&mut g, batch, &aspects)?;
                let w2 = self.weighted(&mut g, l2)?;
                let total = g.add(l1, w2)?;
                Ok((l1, l2, total))
            });
            let (l1, l2, total) = self.guard(Phase::Combined, b, r)?;
            let (v1, v2) = (g.value(l1).item(), g.value(l2).item());
            self.check_loss(Phase::Combined, b, v1 + v2)?;
            (v1, v2, g.gradients(total)?)
        };
        self.apply(grads)?;
        Ok((l1, l2))
    }

    /// One pass over the training split in a seeded order.
    pub fn alternating_epoch(&mut self) -> Result<EpochLosses> {
        let cfg = self.model.config.clone();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        Stream::sub(cfg.seed, Purpose::Shuffle, self.epoch as u32).shuffle(&mut order);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let (mut ext, mut rec) = (0.0, 0.0);
        if cfg.no_alternating {
            for (b, batch) in batches.iter().enumerate() {
                let (l1, l2) = self.combined_step(b, batch)?;
                ext += l1;
                rec += l2;
            }
        } else {
            match cfg.alternation {
                Alternation::Batch => {
                    for (b, batch) in batches.iter().enumerate() {
                        let (l1, aspects) = self.extraction_step(b, batch)?;
                        ext += l1;
                        rec += self.rec_step(b, batch, &aspects)?;
                    }
                }
                Alternation::Epoch => {
                    let mut all = Vec::with_capacity(batches.len());
                    for (b, batch) in batches.iter().enumerate() {
                        let (l1, aspects) = self.extraction_step(b, batch)?;
                        ext += l1;
                        all.push(aspects);
                    }
                    for (b, (batch, aspects)) in batches.iter().zip(&all).enumerate() {
                        rec += self.rec_step(b, batch, aspects)?;
                    }
                }
            }
        }
        self.epoch += 1;
        let n = self.train.len() as f64;
        Ok(EpochLosses {
            extraction: ext / n,
            rec: rec / n,
        })
    }

    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    pub fn validate(&self) -> Result<Evaluation> {
        self.model.evaluate_encoded(&self.val)
    }

    /// Trains until `epochs` or until validation loss has not improved for
    /// `patience` epochs, then restores the best parameters.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let cfg = self.model.config.clone();
        let mut history = TrainHistory::default();
        let mut best: Option<(f64, ParamStore, ParamStore)> = None;
        let mut stale = 0;
        for epoch in 0..cfg.epochs {
            let start = Instant::now();
            let losses = self.alternating_epoch()?;
            let v = self.validate()?;
            let seconds = start.elapsed().as_secs_f64();
            info!(
                "epoch {epoch}: ext {:.4} rec {:.4} | val f1 {:.4} rmse {:.4}",
                losses.extraction, losses.rec, v.extraction.f1, v.rec.rmse
            );
            history.epochs.push(EpochRecord {
                epoch,
                extraction_loss: losses.extraction,
                rec_loss: losses.rec,
                val_extraction_loss: v.extraction_loss,
                val_rec_loss: v.rec_loss,
                val_precision: v.extraction.precision,
                val_recall: v.extraction.recall,
                val_f1: v.extraction.f1,
                val_rmse: v.rec.rmse,
                val_mae: v.rec.mae,
                val_auc: v.rec.auc,
                seconds,
            });
            let total = v.extraction_loss + v.rec_loss;
            if best.as_ref().is_none_or(|(b, _, _)| total < *b) {
                best = Some((total, self.model.params.clone(), self.model.lm.params.clone()));
                history.best_epoch = Some(epoch);
                stale = 0;
            } else {
                stale += 1;
                if cfg.patience > 0 && stale >= cfg.patience {
                    info!("early stop after epoch {epoch}");
                    break;
                }
            }
        }
        if let Some((_, params, lm_params)) = best {
            self.model.params = params;
            self.model.lm.params = lm_params;
        }
        Ok(TrainOutcome {
            model: self.model,
            history,
        })
    }
}

/// Prepare, build the language model, and train.
pub fn train(cfg: &TrainConfig, data: &Dataset, generic: Option<&Dataset>) -> Result<(Prepared, LmStages, TrainOutcome)> {
    let prep = prepare(cfg, data)?;
    let lm = build_language_model(cfg, &prep, generic)?;
    let outcome = Trainer::new(cfg, &prep, lm.model.clone())?.run()?;
    Ok((prep, lm, outcome))
}
