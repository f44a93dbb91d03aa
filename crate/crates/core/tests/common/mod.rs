#![allow(dead_code)]

pub mod invariants;
pub mod suites;

use promptrec::corpus::{generate_synthetic, Dataset, SyntheticSpec};
use promptrec::training::{build_language_model, prepare, Ablation, Model, Prepared, TrainConfig, Trainer};
use promptrec::ParamStore;

pub fn tiny_spec(seed: u64, n_records: usize) -> SyntheticSpec {
    SyntheticSpec {
        n_users: 4,
        n_items: 3,
        n_records,
        vocab_size: 10,
        aspect_pool_size: 6,
        review_length: 6,
        seed,
        ..Default::default()
    }
}

pub fn tiny_data(seed: u64) -> Dataset {
    generate_synthetic(&tiny_spec(seed, 60)).unwrap()
}

pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 2,
        patience: 0,
        d_model: 8,
        heads: 2,
        layers: 1,
        max_seq_len: 12,
        max_review_len: 8,
        d_u: 4,
        d_i: 4,
        d_a: 3,
        hidden_width: 5,
        pretrain_epochs: 1,
        finetune_epochs: 1,
        ..Default::default()
    }
}

/// Freshly initialized (untrained) model for one ablation variant.
pub fn tiny_model(seed: u64, ablation: Ablation) -> (Prepared, Model) {
    let cfg = tiny_config(seed).with_ablation(ablation);
    let data = tiny_data(seed);
    let prep = prepare(&cfg, &data).unwrap();
    let lm = build_language_model(&cfg, &prep, None).unwrap();
    let model = Trainer::new(&cfg, &prep, lm.model).unwrap().model;
    (prep, model)
}

/// Language-model and task parameters merged into one store.
pub fn merged(model: &Model) -> ParamStore {
    let mut all = model.lm.params.clone();
    all.extend(model.params.clone()).unwrap();
    all
}

/// Inverse of [`merged`]: a copy of `model` carrying the values in `all`.
pub fn unmerge(model: &Model, all: &ParamStore) -> Model {
    let mut m = model.clone();
    m.lm.params = all.filtered("lm.");
    let mut task = all.clone();
    task.remove_prefix("lm.");
    m.params = task;
    m
}

/// Bitwise equality of every value under `prefix`.
pub fn same_bits(a: &ParamStore, b: &ParamStore, prefix: &str) -> bool {
    let bits = |s: &ParamStore| -> Vec<(String, Vec<u64>)> {
        s.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, p)| (n.to_string(), p.value.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    };
    bits(a) == bits(b)
}
