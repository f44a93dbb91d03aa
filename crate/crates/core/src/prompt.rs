//! Soft prompts from user/item embeddings, the aspect head, the multi-label
//! extraction loss and top-K decoding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::corpus::AspectVocabulary;
use crate::error::{Error, Result};
use crate::lm::LanguageModel;

pub const USER_TABLE: &str = "emb.user";
pub const ITEM_TABLE: &str = "emb.item";
pub const HEAD_W: &str = "ext.head.w";
pub const HEAD_B: &str = "ext.head.b";
/// Per-user and per-item token rows for the discrete-prompt variant.
pub const USER_TOKENS: &str = "ext.user_tok";
pub const ITEM_TOKENS: &str = "ext.item_tok";

/// Dense row indices for string ids, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct IdMap {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for IdMap {
    fn from(ids: Vec<String>) -> Self {
        let mut m = IdMap::default();
        for id in ids {
            m.insert(id);
        }
        m
    }
}

impl From<IdMap> for Vec<String> {
    fn from(m: IdMap) -> Self {
        m.ids
    }
}

impl IdMap {
    /// Row for `id`, adding it if new.
    pub fn insert(&mut self, id: String) -> usize {
        if let Some(&row) = self.index.get(&id) {
            return row;
        }
        let row = self.ids.len();
        self.index.insert(id.clone(), row);
        self.ids.push(id);
        row
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, row: usize) -> Option<&str> {
        self.ids.get(row).map(String::as_str)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Row maps and widths of the user and item embedding tables. The values
/// live in a [`ParamStore`] under [`USER_TABLE`] and [`ITEM_TABLE`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTables {
    pub users: IdMap,
    pub items: IdMap,
    pub d_u: usize,
    pub d_i: usize,
}

impl EmbeddingTables {
    pub fn user_row(&self, user: &str) -> Result<usize> {
        self.users.get(user).ok_or_else(|| Error::UnknownUser(user.to_string()))
    }

    pub fn item_row(&self, item: &str) -> Result<usize> {
        self.items.get(item).ok_or_else(|| Error::UnknownItem(item.to_string()))
    }
}

/// What the language model sees ahead of the review.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// `[W_u; W_i]`.
    Soft,
    UserOnly,
    ItemOnly,
    /// Empty prefix.
    NoPrompt,
    /// One learned token row per user and per item.
    Discrete,
}

/// How the aspect head pools hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Last,
    Mean,
}

/// Concatenates the given `1 x w` embedding rows, zero-pads the tail to a
/// multiple of `d_model` and folds the result into prefix rows.
pub fn build_soft_prompt(g: &mut Graph, parts: &[Var], d_model: usize) -> Result<Option<Var>> {
    if parts.is_empty() {
        return Ok(None);
    }
    for &p in parts {
        if g.value(p).rows() != 1 {
            return Err(Error::shape("build_soft_prompt", format!("part {:?} is not a row", g.value(p).shape())));
        }
    }
    let joined = g.concat_cols(parts)?;
    let width = g.value(joined).cols();
    let rows = width.div_ceil(d_model);
    let pad = rows * d_model - width;
    let padded = if pad > 0 {
        let z = g.input(Tensor::zeros(1, pad));
        g.concat_cols(&[joined, z])?
    } else {
        joined
    };
    Ok(Some(g.reshape(padded, rows, d_model)?))
}

/// The prompt prefix for `(user_row, item_row)` under `mode`, read from the
/// named user and item tables.
pub fn prompt_prefix(
    g: &mut Graph,
    store: &ParamStore,
    mode: PromptMode,
    (user_table, item_table): (&str, &str),
    user_row: usize,
    item_row: usize,
    d_model: usize,
) -> Result<Option<Var>> {
    let row = |g: &mut Graph, table: &str, r: usize| -> Result<Var> {
        let t = g.param(store, table)?;
        let size = g.value(t).rows();
        if r >= size {
            return Err(Error::IdOutOfRange {
                what: "embedding row",
                id: r,
                size,
            });
        }
        g.gather(t, &[r])
    };
    match mode {
        PromptMode::NoPrompt => Ok(None),
        PromptMode::Soft => {
            let u = row(g, user_table, user_row)?;
            let i = row(g, item_table, item_row)?;
            build_soft_prompt(g, &[u, i], d_model)
        }
        PromptMode::UserOnly => {
            let u = row(g, user_table, user_row)?;
            build_soft_prompt(g, &[u], d_model)
        }
        PromptMode::ItemOnly => {
            let i = row(g, item_table, item_row)?;
            build_soft_prompt(g, &[i], d_model)
        }
        PromptMode::Discrete => {
            let u = row(g, USER_TOKENS, user_row)?;
            let i = row(g, ITEM_TOKENS, item_row)?;
            Ok(Some(g.concat_rows(&[u, i])?))
        }
    }
}

/// `1 x V_a` aspect logits from the fine-tuned hidden states of
/// `prefix ++ review`.
pub fn aspect_logits(
    g: &mut Graph,
    lm: &LanguageModel,
    store: &ParamStore,
    prefix: Option<Var>,
    review: &[usize],
    pooling: Pooling,
) -> Result<Var> {
    if review.is_empty() {
        return Err(Error::shape("aspect_logits", "empty review"));
    }
    let body = lm.embed_review(g, review)?;
    let h = lm.hidden(g, prefix, body)?;
    let n = g.value(h).rows();
    let pooled = match pooling {
        Pooling::Last => g.slice_rows(h, n - 1, 1)?,
        Pooling::Mean => g.mean_rows(h)?,
    };
    let w = g.param(store, HEAD_W)?;
    let b = g.param(store, HEAD_B)?;
    let z = g.matmul(pooled, w)?;
    g.add(z, b)
}

/// `-sum_k log softmax(logits)[truth_k]` under one shared softmax.
pub fn extraction_loss(g: &mut Graph, logits: Var, truth: &[usize]) -> Result<Var> {
    let [rows, n_aspects] = g.value(logits).shape();
    if rows != 1 {
        return Err(Error::shape("extraction_loss", format!("logits {:?}", [rows, n_aspects])));
    }
    if truth.is_empty() {
        return Err(Error::InvalidRecord {
            index: 0,
            message: "empty ground-truth aspect set".into(),
        });
    }
    if let Some(&bad) = truth.iter().find(|&&a| a >= n_aspects) {
        return Err(Error::IdOutOfRange {
            what: "aspect",
            id: bad,
            size: n_aspects,
        });
    }
    let targets: Vec<(usize, usize)> = truth.iter().map(|&a| (0, a)).collect();
    g.cross_entropy(logits, &targets)
}

/// Top-K aspects with their probabilities under the softmax of `logits`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectPrediction {
    pub ids: Vec<usize>,
    pub probs: Vec<f64>,
}

impl AspectPrediction {
    pub fn terms<'a>(&self, av: &'a AspectVocabulary) -> Vec<&'a str> {
        self.ids.iter().filter_map(|&id| av.term(id)).collect()
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// The `k` highest-scoring aspect ids, ties going to the lower id.
pub fn decode_topk(logits: &[f64], k: usize) -> Result<AspectPrediction> {
    if k == 0 || k > logits.len() {
        return Err(Error::Config(format!("top-k {k} outside 1..={}", logits.len())));
    }
    let probs = softmax(logits);
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(AspectPrediction {
        probs: order.iter().map(|&i| probs[i]).collect(),
        ids: order,
    })
}
