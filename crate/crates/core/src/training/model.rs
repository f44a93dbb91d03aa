use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::corpus::{tokenize, AspectVocabulary, Dataset, ReviewRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{aggregate_extraction, precision_recall_f1, rec_metrics, ExtractionMetrics, RecMetrics};
use crate::lm::LanguageModel;
use crate::prompt::{
    aspect_logits, decode_topk, extraction_loss, prompt_prefix, AspectPrediction, EmbeddingTables, PromptMode,
    ITEM_TABLE, USER_TABLE,
};
use crate::recommender::{predict_rating, RatingPrediction, RecConfig};

use super::config::TrainConfig;

/// Separate user/item tables read by the recommender when joint training is
/// ablated.
pub const REC_USER_TABLE: &str = "emb.rec_user";
pub const REC_ITEM_TABLE: &str = "emb.rec_item";

/// A record resolved against the model's vocabularies and tables.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub user_row: usize,
    pub item_row: usize,
    pub tokens: Vec<usize>,
    /// Ground-truth aspect ids known to the aspect vocabulary.
    pub truth: Vec<usize>,
    /// Ground-truth aspect terms, including any outside the vocabulary.
    pub truth_terms: Vec<String>,
    /// Raw 1–5 rating.
    pub rating: f64,
}

impl Encoded {
    pub fn target(&self) -> f64 {
        (self.rating - 1.0) / 4.0
    }
}

/// Everything needed for inference: the frozen language model, the task
/// parameters (`emb.*`, `ext.*`, `rec.*`) and the lookups.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub aspects: AspectVocabulary,
    pub tables: EmbeddingTables,
    pub lm: LanguageModel,
    pub params: ParamStore,
}

/// Metrics plus mean per-record losses on one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub extraction: ExtractionMetrics,
    pub rec: RecMetrics,
    pub extraction_loss: f64,
    pub rec_loss: f64,
}

impl Model {
    pub fn prompt_mode(&self) -> PromptMode {
        self.config.prompt_mode()
    }

    pub fn rec_config(&self) -> RecConfig {
        self.config.rec_config()
    }

    /// Tables the recommender reads `W_u`, `W_i` from.
    pub fn rec_tables(&self) -> (&'static str, &'static str) {
        if self.config.no_joint {
            (REC_USER_TABLE, REC_ITEM_TABLE)
        } else {
            (USER_TABLE, ITEM_TABLE)
        }
    }

    pub fn encode(&self, r: &ReviewRecord) -> Result<Encoded> {
        Ok(Encoded {
            user_row: self.tables.user_row(&r.user_id)?,
            item_row: self.tables.item_row(&r.item_id)?,
            tokens: tokenize(&r.review, &self.vocab, self.config.max_review_len),
            truth: r.aspects.iter().filter_map(|a| self.aspects.id(a)).collect(),
            truth_terms: r.aspects.clone(),
            rating: r.rating,
        })
    }

    pub fn encode_all(&self, d: &Dataset) -> Result<Vec<Encoded>> {
        d.iter().map(|r| self.encode(r)).collect()
    }

    /// `1 x V_a` aspect logits for one record.
    pub fn extraction_logits(&self, g: &mut Graph, user_row: usize, item_row: usize, tokens: &[usize]) -> Result<Var> {
        let prefix = prompt_prefix(
            g,
            &self.params,
            self.prompt_mode(),
            (USER_TABLE, ITEM_TABLE),
            user_row,
            item_row,
            self.config.d_model,
        )?;
        aspect_logits(g, &self.lm, &self.params, prefix, tokens, self.config.pooling)
    }

    /// `1 x 1` normalized rating for one record given K aspect ids.
    pub fn rating(&self, g: &mut Graph, user_row: usize, item_row: usize, aspects: &[usize]) -> Result<Var> {
        let (ut, it) = self.rec_tables();
        let u = g.param(&self.params, ut)?;
        let wu = g.gather(u, &[user_row])?;
        let i = g.param(&self.params, it)?;
        let wi = g.gather(i, &[item_row])?;
        predict_rating(g, &self.params, &self.rec_config(), wu, wi, aspects)
    }

    /// Ground-truth ids cut or padded with the padding aspect to K.
    pub fn padded_truth(&self, truth: &[usize]) -> Vec<usize> {
        let k = self.config.k;
        let mut ids: Vec<usize> = truth.iter().copied().take(k).collect();
        ids.resize(k, self.aspects.none_id());
        ids
    }

    fn predict_encoded(&self, e: &Encoded) -> Result<(Vec<f64>, AspectPrediction, f64)> {
        let mut g = Graph::with_filter(|_| false);
        let logits = self.extraction_logits(&mut g, e.user_row, e.item_row, &e.tokens)?;
        let values = g.value(logits).data().to_vec();
        let pred = decode_topk(&values, self.config.k)?;
        let y = self.rating(&mut g, e.user_row, e.item_row, &pred.ids)?;
        let y = g.value(y).item();
        Ok((values, pred, y))
    }

    /// Top-K aspects for one `(user, item, review)`.
    pub fn extract(&self, user: &str, item: &str, review: &str) -> Result<AspectPrediction> {
        let e = self.encode(&ReviewRecord {
            user_id: user.into(),
            item_id: item.into(),
            rating: 1.0,
            review: review.into(),
            aspects: Vec::new(),
        })?;
        let mut g = Graph::with_filter(|_| false);
        let logits = self.extraction_logits(&mut g, e.user_row, e.item_row, &e.tokens)?;
        decode_topk(g.value(logits).data(), self.config.k)
    }

    /// Extracted aspects and the rating predicted from them.
    pub fn recommend(&self, user: &str, item: &str, review: &str) -> Result<(AspectPrediction, RatingPrediction)> {
        let e = self.encode(&ReviewRecord {
            user_id: user.into(),
            item_id: item.into(),
            rating: 1.0,
            review: review.into(),
            aspects: Vec::new(),
        })?;
        let (_, pred, y) = self.predict_encoded(&e)?;
        Ok((pred, RatingPrediction { normalized: y }))
    }

    pub fn evaluate(&self, d: &Dataset) -> Result<Evaluation> {
        self.evaluate_encoded(&self.encode_all(d)?)
    }

    /// Metrics on pre-encoded records. Recommendation always consumes the
    /// predicted aspects.
    pub fn evaluate_encoded(&self, records: &[Encoded]) -> Result<Evaluation> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut per_record = Vec::with_capacity(records.len());
        let mut pairs = Vec::with_capacity(records.len());
        let (mut ext_loss, mut ext_count, mut rec_loss) = (0.0, 0usize, 0.0);
        for e in records {
            let (logits, pred, y) = self.predict_encoded(e)?;
            if !e.truth.is_empty() {
                let mut g = Graph::with_filter(|_| false);
                let z = g.input(crate::autodiff::Tensor::row(logits));
                let l = extraction_loss(&mut g, z, &e.truth)?;
                ext_loss += g.value(l).item();
                ext_count += 1;
            }
            let terms: Vec<&str> = pred.terms(&self.aspects);
            per_record.push(precision_recall_f1(&terms, &e.truth_terms)?);
            rec_loss += (e.target() - y).powi(2);
            pairs.push((e.rating, y));
        }
        Ok(Evaluation {
            extraction: aggregate_extraction(&per_record)?,
            rec: rec_metrics(&pairs)?,
            extraction_loss: ext_loss / ext_count.max(1) as f64,
            rec_loss: rec_loss / records.len() as f64,
        })
    }
}
