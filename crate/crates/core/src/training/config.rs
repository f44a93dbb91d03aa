use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::SplitRatios;
use crate::error::{Error, Result};
use crate::lm::{LmConfig, LmTrainConfig};
use crate::prompt::{Pooling, PromptMode};
use crate::recommender::{AttentionAxis, RecConfig};

/// When the two objectives take turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternation {
    /// Extraction step then recommendation step on every batch.
    Batch,
    /// A full extraction pass over the epoch, then a full recommendation pass.
    Epoch,
}

/// Every knob of a run. Loaded from a flat TOML file; omitted keys take
/// their defaults and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// SGD step size for the alternating phases.
    pub lr: f64,
    /// Weight on the rating loss relative to the extraction loss.
    pub rec_loss_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Aspects extracted per record and fed to the recommender.
    pub k: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Global gradient-norm clip per step; 0 disables.
    pub grad_clip: f64,

    pub no_joint: bool,
    pub no_finetune: bool,
    pub no_prompt: bool,
    pub discrete_prompt: bool,
    pub no_alternating: bool,
    pub no_attention: bool,
    pub user_only_prompt: bool,
    pub item_only_prompt: bool,

    pub attention_axis: AttentionAxis,
    /// Feed ground-truth aspects (padded) to the recommender while training.
    pub teacher_forcing: bool,
    pub alternation: Alternation,
    /// Keep the fine-tuning layer trainable alongside the prompt.
    pub tune_finetune_layer: bool,
    pub pooling: Pooling,

    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    /// Token budget per review including BOS and EOS.
    pub max_review_len: usize,
    pub vocab_min_freq: usize,

    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub lm_batch_size: usize,

    pub d_u: usize,
    pub d_i: usize,
    pub d_a: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            lr: 0.01,
            rec_loss_weight: 1.0,
            epochs: 30,
            batch_size: 32,
            k: 3,
            patience: 5,
            grad_clip: 0.0,
            no_joint: false,
            no_finetune: false,
            no_prompt: false,
            discrete_prompt: false,
            no_alternating: false,
            no_attention: false,
            user_only_prompt: false,
            item_only_prompt: false,
            attention_axis: AttentionAxis::Components,
            teacher_forcing: false,
            alternation: Alternation::Batch,
            tune_finetune_layer: false,
            pooling: Pooling::Last,
            train_ratio: 0.8,
            val_ratio: 0.1,
            test_ratio: 0.1,
            max_review_len: 48,
            vocab_min_freq: 1,
            d_model: 64,
            layers: 2,
            heads: 4,
            max_seq_len: 64,
            pretrain_epochs: 5,
            pretrain_lr: 0.5,
            finetune_epochs: 3,
            finetune_lr: 0.5,
            lm_batch_size: 32,
            d_u: 32,
            d_i: 32,
            d_a: 16,
            hidden_width: 128,
            hidden_layers: 3,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.pretrain_lr > 0.0 && self.finetune_lr > 0.0) {
            return bad("pretrain_lr and finetune_lr must be positive");
        }
        if !(self.rec_loss_weight > 0.0 && self.rec_loss_weight.is_finite()) {
            return bad("rec_loss_weight must be positive");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0");
        }
        if self.batch_size == 0 || self.lm_batch_size == 0 || self.k == 0 {
            return bad("batch_size, lm_batch_size and k must be positive");
        }
        if self.d_a == 0 || self.hidden_width == 0 {
            return bad("d_a and hidden_width must be positive");
        }
        if self.max_review_len < 2 {
            return bad("max_review_len must leave room for BOS and EOS");
        }
        let prompt_flags = [
            ("no_prompt", self.no_prompt),
            ("discrete_prompt", self.discrete_prompt),
            ("user_only_prompt", self.user_only_prompt),
            ("item_only_prompt", self.item_only_prompt),
        ];
        let set: Vec<&str> = prompt_flags.iter().filter(|(_, on)| *on).map(|(n, _)| *n).collect();
        if set.len() > 1 {
            return Err(Error::Config(format!("conflicting prompt flags: {}", set.join(", "))));
        }
        if self.no_finetune && self.tune_finetune_layer {
            return bad("tune_finetune_layer needs the fine-tuning layer (drop no_finetune)");
        }
        let ratio_sum = self.train_ratio + self.val_ratio + self.test_ratio;
        if (ratio_sum - 1.0).abs() > 1e-9 {
            return bad("train/val/test ratios must sum to 1");
        }
        if self.d_u + self.d_i == 0 {
            return bad("d_u + d_i must be positive");
        }
        // Vocabulary size is only known after the split; any valid stand-in
        // checks the architecture.
        self.lm_config(5).validate()?;
        let needed = self.max_review_len + self.prefix_rows();
        if needed > self.max_seq_len {
            return Err(Error::Config(format!(
                "max_seq_len {} cannot hold {} review tokens plus {} prompt rows",
                self.max_seq_len,
                self.max_review_len,
                self.prefix_rows()
            )));
        }
        Ok(())
    }

    pub fn split_ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train_ratio,
            val: self.val_ratio,
            test: self.test_ratio,
        }
    }

    pub fn prompt_mode(&self) -> PromptMode {
        if self.no_prompt {
            PromptMode::NoPrompt
        } else if self.discrete_prompt {
            PromptMode::Discrete
        } else if self.user_only_prompt {
            PromptMode::UserOnly
        } else if self.item_only_prompt {
            PromptMode::ItemOnly
        } else {
            PromptMode::Soft
        }
    }

    /// Rows the prompt occupies ahead of the review.
    pub fn prefix_rows(&self) -> usize {
        let rows = |w: usize| w.div_ceil(self.d_model.max(1));
        match self.prompt_mode() {
            PromptMode::Soft => rows(self.d_u + self.d_i),
            PromptMode::UserOnly => rows(self.d_u),
            PromptMode::ItemOnly => rows(self.d_i),
            PromptMode::NoPrompt => 0,
            PromptMode::Discrete => 2,
        }
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            max_seq_len: self.max_seq_len,
            finetune_width: self.d_model,
        }
    }

    pub fn pretrain_opts(&self) -> LmTrainConfig {
        LmTrainConfig {
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            batch_size: self.lm_batch_size,
        }
    }

    pub fn finetune_opts(&self) -> LmTrainConfig {
        LmTrainConfig {
            epochs: self.finetune_epochs,
            lr: self.finetune_lr,
            batch_size: self.lm_batch_size,
        }
    }

    pub fn rec_config(&self) -> RecConfig {
        RecConfig {
            d_u: self.d_u,
            d_i: self.d_i,
            d_a: self.d_a,
            k: self.k,
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            axis: self.attention_axis,
            use_attention: !self.no_attention,
        }
    }

    /// The single ablation this config corresponds to, if any.
    pub fn ablation(&self) -> Ablation {
        Ablation::ALL
            .into_iter()
            .find(|a| *a != Ablation::Full && a.flag(self))
            .unwrap_or(Ablation::Full)
    }

    pub fn with_ablation(&self, a: Ablation) -> TrainConfig {
        let mut c = self.clone();
        a.set(&mut c);
        c
    }
}

/// The full model and its eight wiring variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    /// Extraction and recommendation with independent embedding tables.
    NoJoint,
    NoFinetune,
    NoPrompt,
    /// User and item as learned ID tokens instead of embedding rows.
    DiscretePrompt,
    /// One update on the summed losses per batch.
    NoAlternating,
    NoAttention,
    UserOnlyPrompt,
    ItemOnlyPrompt,
}

impl Ablation {
    pub const ALL: [Ablation; 9] = [
        Ablation::Full,
        Ablation::NoJoint,
        Ablation::NoFinetune,
        Ablation::NoPrompt,
        Ablation::DiscretePrompt,
        Ablation::NoAlternating,
        Ablation::NoAttention,
        Ablation::UserOnlyPrompt,
        Ablation::ItemOnlyPrompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoJoint => "no_joint",
            Ablation::NoFinetune => "no_finetune",
            Ablation::NoPrompt => "no_prompt",
            Ablation::DiscretePrompt => "discrete_prompt",
            Ablation::NoAlternating => "no_alternating",
            Ablation::NoAttention => "no_attention",
            Ablation::UserOnlyPrompt => "user_only_prompt",
            Ablation::ItemOnlyPrompt => "item_only_prompt",
        }
    }

    fn field(self, c: &mut TrainConfig) -> Option<&mut bool> {
        match self {
            Ablation::Full => None,
            Ablation::NoJoint => Some(&mut c.no_joint),
            Ablation::NoFinetune => Some(&mut c.no_finetune),
            Ablation::NoPrompt => Some(&mut c.no_prompt),
            Ablation::DiscretePrompt => Some(&mut c.discrete_prompt),
            Ablation::NoAlternating => Some(&mut c.no_alternating),
            Ablation::NoAttention => Some(&mut c.no_attention),
            Ablation::UserOnlyPrompt => Some(&mut c.user_only_prompt),
            Ablation::ItemOnlyPrompt => Some(&mut c.item_only_prompt),
        }
    }

    fn flag(self, c: &TrainConfig) -> bool {
        let mut c = c.clone();
        self.field(&mut c).map(|f| *f).unwrap_or(false)
    }

    /// Turns this variant's flag on (no-op for [`Ablation::Full`]).
    pub fn set(self, c: &mut TrainConfig) {
        if let Some(f) = self.field(c) {
            *f = true;
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}
