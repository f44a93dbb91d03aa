//! Shared fixtures for the criterion benchmarks under `benches/`.

use promptrec::corpus::{generate_synthetic, Dataset, SyntheticSpec};
use promptrec::training::{build_language_model, prepare, Prepared, TrainConfig, Trainer};

/// Benchmark-sized model on a few hundred records.
pub fn config() -> TrainConfig {
    TrainConfig {
        seed: 1,
        lr: 0.1,
        batch_size: 1,
        d_model: 32,
        heads: 4,
        layers: 2,
        max_review_len: 16,
        max_seq_len: 24,
        d_u: 16,
        d_i: 16,
        d_a: 16,
        hidden_width: 128,
        hidden_layers: 3,
        pretrain_epochs: 1,
        finetune_epochs: 1,
        ..Default::default()
    }
}

pub fn data(records: usize) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        n_records: records,
        ..Default::default()
    })
    .expect("valid spec")
}

/// A trainer over `records` synthetic records with a briefly trained LM.
pub fn trainer(records: usize) -> (Prepared, Trainer) {
    let cfg = config();
    let prep = prepare(&cfg, &data(records)).expect("prepare");
    let lm = build_language_model(&cfg, &prep, None).expect("language model");
    let t = Trainer::new(&cfg, &prep, lm.model).expect("trainer");
    (prep, t)
}
