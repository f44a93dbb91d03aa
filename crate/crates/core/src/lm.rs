//! Small causal transformer language model with a fine-tuning layer.
//!
//! Pre-norm GPT-style blocks over learned token and position embeddings.
//! Optional prefix rows (soft prompts) are prepended to the embedded review
//! and take part in attention like ordinary positions; they carry no
//! positional embedding of their own, and review positions are numbered from
//! zero. The fine-tuning layer is a single dense layer with a residual
//! connection, `h + h W + b`, placed between the final layer norm and the
//! next-token head. It starts at zero so adding it leaves the model
//! unchanged.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{Purpose, Stream};

pub const BASE_PREFIX: &str = "lm.base.";
pub const FINETUNE_PREFIX: &str = "lm.ft.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    /// Width of the fine-tuning layer; the residual form requires `d_model`.
    pub finetune_width: usize,
}

impl LmConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        LmConfig {
            vocab_size,
            d_model: 64,
            layers: 2,
            heads: 4,
            max_seq_len: 64,
            finetune_width: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::Config("vocab_size must cover the special tokens plus one word".into()));
        }
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("d_model, layers, heads and max_seq_len must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.finetune_width != self.d_model {
            return Err(Error::Config(format!(
                "finetune_width {} must equal d_model {} (residual fine-tuning layer)",
                self.finetune_width, self.d_model
            )));
        }
        Ok(())
    }

    fn ff_width(&self) -> usize {
        4 * self.d_model
    }
}

/// Optimization settings for pre-training and fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub params: ParamStore,
}

fn p(name: &str) -> String {
    format!("{BASE_PREFIX}{name}")
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut Stream) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| std * rng.normal())
}

/// Hidden states and next-token logits of one forward pass.
pub struct LmOutput {
    pub hidden: Var,
    pub logits: Var,
}

impl LanguageModel {
    /// Randomly initialized base model, all parameters trainable, no
    /// fine-tuning layer.
    pub fn new(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Stream::sub(seed, Purpose::Init, 1);
        let d = config.d_model;
        let ff = config.ff_width();
        let w_std = 1.0 / (d as f64).sqrt();
        let out_std = w_std / (2.0 * config.layers as f64).sqrt();
        let mut s = ParamStore::new();
        s.insert(p("tok_emb"), normal(config.vocab_size, d, 0.5, &mut rng), true)?;
        s.insert(p("pos_emb"), normal(config.max_seq_len, d, 0.1, &mut rng), true)?;
        for l in 0..config.layers {
            let b = |n: &str| p(&format!("block{l}.{n}"));
            s.insert(b("ln1.g"), Tensor::filled(1, d, 1.0), true)?;
            s.insert(b("ln1.b"), Tensor::zeros(1, d), true)?;
            for w in ["wq", "wk", "wv"] {
                s.insert(b(w), normal(d, d, w_std, &mut rng), true)?;
                s.insert(b(&w.replace('w', "b")), Tensor::zeros(1, d), true)?;
            }
            s.insert(b("wo"), normal(d, d, out_std, &mut rng), true)?;
            s.insert(b("bo"), Tensor::zeros(1, d), true)?;
            s.insert(b("ln2.g"), Tensor::filled(1, d, 1.0), true)?;
            s.insert(b("ln2.b"), Tensor::zeros(1, d), true)?;
            s.insert(b("w1"), normal(d, ff, w_std, &mut rng), true)?;
            s.insert(b("b1"), Tensor::zeros(1, ff), true)?;
            s.insert(b("w2"), normal(ff, d, out_std / 2.0, &mut rng), true)?;
            s.insert(b("b2"), Tensor::zeros(1, d), true)?;
        }
        s.insert(p("lnf.g"), Tensor::filled(1, d, 1.0), true)?;
        s.insert(p("lnf.b"), Tensor::zeros(1, d), true)?;
        s.insert(p("head.w"), normal(d, config.vocab_size, w_std, &mut rng), true)?;
        s.insert(p("head.b"), Tensor::zeros(1, config.vocab_size), true)?;
        Ok(LanguageModel { config, params: s })
    }

    pub fn has_finetune_layer(&self) -> bool {
        self.params.contains(&format!("{FINETUNE_PREFIX}w"))
    }

    /// Adds a zero-initialized fine-tuning layer (no-op if present).
    pub fn add_finetune_layer(&mut self) -> Result<()> {
        if self.has_finetune_layer() {
            return Ok(());
        }
        let d = self.config.d_model;
        self.params.insert(format!("{FINETUNE_PREFIX}w"), Tensor::zeros(d, d), true)?;
        self.params.insert(format!("{FINETUNE_PREFIX}b"), Tensor::zeros(1, d), true)?;
        Ok(())
    }

    pub fn freeze_base(&mut self) {
        self.params.set_trainable_prefix(BASE_PREFIX, false);
    }

    pub fn freeze_all(&mut self) {
        self.params.set_trainable_prefix("lm.", false);
    }

    /// Token embedding plus position embedding for positions `0..ids.len()`.
    pub fn embed_review(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                limit: self.config.max_seq_len,
            });
        }
        let tok = g.param(&self.params, &p("tok_emb"))?;
        let pos = g.param(&self.params, &p("pos_emb"))?;
        let t = g.gather(tok, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pe = g.gather(pos, &positions)?;
        g.add(t, pe)
    }

    fn dense(&self, g: &mut Graph, x: Var, w: &str, b: &str) -> Result<Var> {
        let wv = g.param(&self.params, w)?;
        let bv = g.param(&self.params, b)?;
        let xw = g.matmul(x, wv)?;
        g.add(xw, bv)
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let gain = g.param(&self.params, &p(&format!("{name}.g")))?;
        let bias = g.param(&self.params, &p(&format!("{name}.b")))?;
        g.layer_norm(x, gain, bias)
    }

    /// Final-layer-norm hidden states of the frozen base, before the
    /// fine-tuning layer.
    pub fn base_hidden(&self, g: &mut Graph, prefix: Option<Var>, body: Var) -> Result<Var> {
        let d = self.config.d_model;
        let body_shape = g.value(body).shape();
        if body_shape[1] != d {
            return Err(Error::shape("lm_forward", format!("body {body_shape:?}, d_model {d}")));
        }
        let mut x = match prefix {
            Some(pre) => {
                let pre_shape = g.value(pre).shape();
                if pre_shape[1] != d {
                    return Err(Error::shape("lm_forward", format!("prefix {pre_shape:?}, d_model {d}")));
                }
                g.concat_rows(&[pre, body])?
            }
            None => body,
        };
        let n = g.value(x).rows();
        if n > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: n,
                limit: self.config.max_seq_len,
            });
        }
        for l in 0..self.config.layers {
            let b = |s: &str| p(&format!("block{l}.{s}"));
            let h = self.layer_norm(g, x, &format!("block{l}.ln1"))?;
            let q = self.dense(g, h, &b("wq"), &b("bq"))?;
            let k = self.dense(g, h, &b("wk"), &b("bk"))?;
            let v = self.dense(g, h, &b("wv"), &b("bv"))?;
            let a = g.causal_attention(q, k, v, self.config.heads)?;
            let o = self.dense(g, a, &b("wo"), &b("bo"))?;
            x = g.add(x, o)?;
            let h2 = self.layer_norm(g, x, &format!("block{l}.ln2"))?;
            let m1 = self.dense(g, h2, &b("w1"), &b("b1"))?;
            let act = g.gelu(m1)?;
            let m2 = self.dense(g, act, &b("w2"), &b("b2"))?;
            x = g.add(x, m2)?;
        }
        self.layer_norm(g, x, "lnf")
    }

    /// Applies the fine-tuning layer if present.
    pub fn finetune_layer(&self, g: &mut Graph, h: Var) -> Result<Var> {
        if !self.has_finetune_layer() {
            return Ok(h);
        }
        let delta = self.dense(g, h, &format!("{FINETUNE_PREFIX}w"), &format!("{FINETUNE_PREFIX}b"))?;
        g.add(h, delta)
    }

    pub fn next_token_logits(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        self.dense(g, hidden, &p("head.w"), &p("head.b"))
    }

    /// Fine-tuned hidden states for `prefix ++ body`.
    pub fn hidden(&self, g: &mut Graph, prefix: Option<Var>, body: Var) -> Result<Var> {
        let h = self.base_hidden(g, prefix, body)?;
        self.finetune_layer(g, h)
    }

    pub fn forward(&self, g: &mut Graph, prefix: Option<Var>, body: Var) -> Result<LmOutput> {
        let hidden = self.hidden(g, prefix, body)?;
        let logits = self.next_token_logits(g, hidden)?;
        Ok(LmOutput { hidden, logits })
    }

    /// Summed next-token cross-entropy of a token sequence and the number of
    /// predicted positions.
    pub fn next_token_loss(&self, g: &mut Graph, ids: &[usize]) -> Result<(Var, usize)> {
        let body = self.embed_review(g, ids)?;
        let out = self.forward(g, None, body)?;
        let targets = next_token_targets(ids);
        let loss = g.cross_entropy(out.logits, &targets)?;
        Ok((loss, targets.len()))
    }

    /// Summed cross-entropy and predicted-position count over sequences.
    pub fn cross_entropy_sum(&self, sequences: &[Vec<usize>]) -> Result<(f64, usize)> {
        let mut total = 0.0;
        let mut count = 0;
        for ids in sequences {
            if ids.len() < 2 {
                continue;
            }
            let mut g = Graph::new();
            let (loss, n) = self.next_token_loss(&mut g, ids)?;
            total += g.value(loss).item();
            count += n;
        }
        Ok((total, count))
    }
}

/// `(row, class)` pairs predicting token `t + 1` from row `t`.
pub fn next_token_targets(ids: &[usize]) -> Vec<(usize, usize)> {
    ids.windows(2).enumerate().map(|(t, w)| (t, w[1])).collect()
}

/// `exp(mean next-token cross-entropy)` over all predicted positions.
pub fn perplexity(m: &LanguageModel, sequences: &[Vec<usize>]) -> Result<f64> {
    let (total, count) = m.cross_entropy_sum(sequences)?;
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok((total / count as f64).exp())
}

fn check_finite(loss: f64, phase: &'static str, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            phase,
            epoch,
            batch,
            loss,
        })
    }
}

/// Next-token training of every base parameter. Returns the model with its
/// base frozen and the mean per-token training loss of each epoch.
pub fn pretrain_base(
    sequences: &[Vec<usize>],
    config: LmConfig,
    opts: &LmTrainConfig,
    seed: u64,
) -> Result<(LanguageModel, Vec<f64>)> {
    if sequences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model = LanguageModel::new(config, seed)?;
    let mut curve = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    for epoch in 0..opts.epochs {
        Stream::sub(seed, Purpose::Pretrain, epoch as u32).shuffle(&mut order);
        let (mut total, mut count) = (0.0, 0usize);
        for (b, batch) in order.chunks(opts.batch_size.max(1)).enumerate() {
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(batch.len());
            let mut n_tokens = 0;
            for &i in batch {
                if sequences[i].len() < 2 {
                    continue;
                }
                let (l, n) = model.next_token_loss(&mut g, &sequences[i])?;
                losses.push(l);
                n_tokens += n;
            }
            if losses.is_empty() {
                continue;
            }
            let stacked = g.concat_rows(&losses)?;
            let sum = g.sum(stacked)?;
            let batch_loss = g.value(sum).item();
            check_finite(batch_loss, "pretrain", epoch, b)?;
            let mean = g.scale(sum, 1.0 / n_tokens as f64)?;
            let grads = g.gradients(mean)?;
            sgd_step(&mut model.params, &grads, opts.lr)?;
            total += batch_loss;
            count += n_tokens;
        }
        let mean = total / count.max(1) as f64;
        debug!("pretrain epoch {epoch}: loss {mean:.4}");
        curve.push(mean);
    }
    model.freeze_base();
    Ok((model, curve))
}

/// Adds the fine-tuning layer and trains only it on next-token prediction
/// over `sequences` (training reviews only). The base is frozen throughout;
/// afterwards every language-model parameter is frozen.
pub fn finetune(
    mut model: LanguageModel,
    sequences: &[Vec<usize>],
    opts: &LmTrainConfig,
    seed: u64,
) -> Result<(LanguageModel, Vec<f64>)> {
    model.freeze_base();
    model.add_finetune_layer()?;
    model.params.set_trainable_prefix(FINETUNE_PREFIX, true);

    // The base is frozen, so its final hidden states are constants.
    let usable: Vec<&Vec<usize>> = sequences.iter().filter(|s| s.len() >= 2).collect();
    let cached: Vec<Tensor> = usable
        .iter()
        .map(|ids| {
            let mut g = Graph::new();
            let body = model.embed_review(&mut g, ids)?;
            let h = model.base_hidden(&mut g, None, body)?;
            Ok(g.value(h).clone())
        })
        .collect::<Result<_>>()?;

    let mut curve = Vec::with_capacity(opts.epochs);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    for epoch in 0..opts.epochs {
        Stream::sub(seed, Purpose::Pretrain, 1_000_000 + epoch as u32).shuffle(&mut order);
        let (mut total, mut count) = (0.0, 0usize);
        for (b, batch) in order.chunks(opts.batch_size.max(1)).enumerate() {
            let mut g = Graph::new();
            let mut losses = Vec::with_capacity(batch.len());
            let mut n_tokens = 0;
            for &i in batch {
                let h = g.input(cached[i].clone());
                let ft = model.finetune_layer(&mut g, h)?;
                let logits = model.next_token_logits(&mut g, ft)?;
                let targets = next_token_targets(usable[i]);
                n_tokens += targets.len();
                losses.push(g.cross_entropy(logits, &targets)?);
            }
            if losses.is_empty() {
                continue;
            }
            let stacked = g.concat_rows(&losses)?;
            let sum = g.sum(stacked)?;
            let batch_loss = g.value(sum).item();
            check_finite(batch_loss, "finetune", epoch, b)?;
            let mean = g.scale(sum, 1.0 / n_tokens as f64)?;
            let grads = g.gradients(mean)?;
            sgd_step(&mut model.params, &grads, opts.lr)?;
            total += batch_loss;
            count += n_tokens;
        }
        let mean = total / count.max(1) as f64;
        debug!("finetune epoch {epoch}: loss {mean:.4}");
        curve.push(mean);
    }
    model.freeze_all();
    Ok((model, curve))
}
