//! Structural invariants, each returning a description of the first
//! violation.

use promptrec::autodiff::{Axis, Graph, ParamStore, Tensor};
use promptrec::lm::{finetune, pretrain_base, LmTrainConfig};
use promptrec::prompt::{decode_topk, extraction_loss};
use promptrec::recommender::{attention_weights, AttentionAxis, ATTN_B, ATTN_W};
use promptrec::rng::Stream;
use promptrec::training::{build_language_model, prepare, Ablation, Trainer};

use super::suites::softmax_rows_sum_to_one;
use super::{same_bits, tiny_config, tiny_data};

pub type Check = std::result::Result<(), String>;

fn normal(rows: usize, cols: usize, rng: &mut Stream) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| 2.0 * rng.normal())
}

pub fn attention_sums_to_one(instances: u64) -> Check {
    for n in 0..instances {
        let mut rng = Stream::with_stream_id(n, 11);
        let (k, d_a) = (1 + n as usize % 4, 1 + n as usize % 5);
        let mut s = ParamStore::new();
        s.insert(ATTN_W, normal(6, d_a, &mut rng), true).unwrap();
        s.insert(ATTN_B, normal(1, d_a, &mut rng), true).unwrap();
        for axis in [AttentionAxis::Components, AttentionAxis::Aspects] {
            let mut g = Graph::new();
            let w_a = g.input(normal(k, d_a, &mut rng));
            let w_u = g.input(normal(1, 4, &mut rng));
            let w_i = g.input(normal(1, 2, &mut rng));
            let a = attention_weights(&mut g, &s, w_a, w_u, w_i, axis).map_err(|e| e.to_string())?;
            let dir = if axis == AttentionAxis::Components { Axis::Row } else { Axis::Col };
            let err = softmax_rows_sum_to_one(&g, a, dir);
            if err > 1e-6 {
                return Err(format!("attention #{n} {axis:?}: sum off by {err:e}"));
            }
        }
    }
    Ok(())
}

/// Hidden rows up to `t` do not change when later review tokens change,
/// with and without a prompt prefix.
pub fn causal_mask_invariance(instances: u64) -> Check {
    let cfg = tiny_config(3);
    let prep = prepare(&cfg, &tiny_data(3)).unwrap();
    let lm = build_language_model(&cfg, &prep, None).unwrap().model;
    let v = lm.config.vocab_size;
    for n in 0..instances {
        let mut rng = Stream::with_stream_id(n, 12);
        let len = 3 + rng.below(6);
        let a: Vec<usize> = (0..len).map(|_| rng.below(v)).collect();
        let t = rng.below(len - 1);
        let mut b = a.clone();
        for id in b.iter_mut().skip(t + 1) {
            *id = (*id + 1 + rng.below(v - 1)) % v;
        }
        let prefix_rows = n as usize % 3;
        let prefix = normal(prefix_rows, lm.config.d_model, &mut rng);
        let run = |ids: &[usize]| {
            let mut g = Graph::with_filter(|_| false);
            let p = (prefix_rows > 0).then(|| g.input(prefix.clone()));
            let body = lm.embed_review(&mut g, ids).unwrap();
            let h = lm.hidden(&mut g, p, body).unwrap();
            g.value(h).clone()
        };
        let (ha, hb) = (run(&a), run(&b));
        for r in 0..=prefix_rows + t {
            if ha.row_slice(r) != hb.row_slice(r) {
                return Err(format!("causal #{n}: row {r} changed after editing tokens past {t}"));
            }
        }
        if ha.row_slice(prefix_rows + len - 1) == hb.row_slice(prefix_rows + len - 1) {
            return Err(format!("causal #{n}: last row ignores its own token"));
        }
    }
    Ok(())
}

/// Pre-training freezes the base; fine-tuning leaves it bit-identical and
/// then freezes its own layer; alternating training leaves every LM value
/// bit-identical.
pub fn freezing_is_bitwise() -> Check {
    let cfg = tiny_config(4);
    let prep = prepare(&cfg, &tiny_data(4)).unwrap();
    let seqs = prep.sequences(&prep.train, cfg.max_review_len);
    let lm_cfg = cfg.lm_config(prep.vocab.len());
    let opts = LmTrainConfig {
        epochs: 2,
        lr: 0.5,
        batch_size: 8,
    };
    let (base, _) = pretrain_base(&seqs, lm_cfg, &opts, 4).map_err(|e| e.to_string())?;
    if base.params.iter().any(|(_, p)| p.trainable) {
        return Err("base still trainable after pre-training".into());
    }
    let (tuned, _) = finetune(base.clone(), &seqs, &opts, 4).map_err(|e| e.to_string())?;
    if !same_bits(&base.params, &tuned.params, "lm.base.") {
        return Err("fine-tuning changed the base".into());
    }
    if tuned.params.iter().any(|(_, p)| p.trainable) {
        return Err("language model trainable after fine-tuning".into());
    }
    let moved = tuned
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("lm.ft."))
        .any(|(_, p)| p.value.data().iter().any(|&v| v != 0.0));
    if !moved {
        return Err("fine-tuning layer never moved".into());
    }
    for ablation in [Ablation::Full, Ablation::NoAlternating, Ablation::NoJoint] {
        let c = cfg.with_ablation(ablation);
        let out = Trainer::new(&c, &prep, tuned.clone())
            .and_then(|t| t.run())
            .map_err(|e| e.to_string())?;
        if !same_bits(&tuned.params, &out.model.lm.params, "lm.") {
            return Err(format!("{ablation}: training changed the language model"));
        }
    }
    Ok(())
}

/// The extraction step never writes `rec.*`; the recommendation step never
/// writes `ext.*`; neither writes the language model.
pub fn phase_isolation() -> Check {
    for ablation in [Ablation::Full, Ablation::DiscretePrompt, Ablation::NoJoint] {
        let cfg = tiny_config(5).with_ablation(ablation);
        let prep = prepare(&cfg, &tiny_data(5)).unwrap();
        let lm = build_language_model(&cfg, &prep, None).unwrap().model;
        let mut t = Trainer::new(&cfg, &prep, lm).map_err(|e| e.to_string())?;
        let batch: Vec<usize> = (0..4).collect();
        let before = t.model.clone();
        let (_, aspects) = t.extraction_step(0, &batch).map_err(|e| e.to_string())?;
        let mid = t.model.clone();
        if !same_bits(&before.params, &mid.params, "rec.") {
            return Err(format!("{ablation}: extraction step moved rec.*"));
        }
        if same_bits(&before.params, &mid.params, "ext.head.") {
            return Err(format!("{ablation}: extraction step did not move the aspect head"));
        }
        t.rec_step(0, &batch, &aspects).map_err(|e| e.to_string())?;
        if !same_bits(&mid.params, &t.model.params, "ext.") {
            return Err(format!("{ablation}: recommendation step moved ext.*"));
        }
        if same_bits(&mid.params, &t.model.params, "rec.") {
            return Err(format!("{ablation}: recommendation step did not move rec.*"));
        }
        if !same_bits(&before.lm.params, &t.model.lm.params, "lm.") {
            return Err(format!("{ablation}: a training step moved the language model"));
        }
    }
    Ok(())
}

/// Adding a constant to every logit leaves the extraction loss unchanged.
pub fn extraction_loss_shift_invariance(instances: u64) -> Check {
    for n in 0..instances {
        let mut rng = Stream::with_stream_id(n, 13);
        let v = 2 + rng.below(10);
        let z: Vec<f64> = (0..v).map(|_| 3.0 * rng.normal()).collect();
        let c = 50.0 * rng.normal();
        let truth: Vec<usize> = (0..1 + rng.below(v.min(3))).collect();
        let loss = |logits: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.input(Tensor::row(logits));
            let l = extraction_loss(&mut g, x, &truth).unwrap();
            g.value(l).item()
        };
        let (a, b) = (loss(z.clone()), loss(z.iter().map(|x| x + c).collect()));
        if (a - b).abs() > 1e-9 * a.abs().max(1.0) {
            return Err(format!("shift #{n}: {a} vs {b} after adding {c}"));
        }
    }
    Ok(())
}

/// Strictly increasing maps of the logits leave the top-K ids unchanged.
pub fn topk_monotone_invariance(instances: u64) -> Check {
    let maps: [fn(f64) -> f64; 4] = [|x| 3.0 * x - 7.0, |x| x.exp(), |x| x.atan(), |x| x * x * x];
    for n in 0..instances {
        let mut rng = Stream::with_stream_id(n, 14);
        let v = 1 + rng.below(12);
        let z: Vec<f64> = (0..v).map(|_| rng.normal()).collect();
        let k = 1 + rng.below(v);
        let base = decode_topk(&z, k).unwrap().ids;
        for (m, f) in maps.iter().enumerate() {
            let ids = decode_topk(&z.iter().map(|&x| f(x)).collect::<Vec<_>>(), k).unwrap().ids;
            if ids != base {
                return Err(format!("top-k #{n}, map {m}: {ids:?} vs {base:?}"));
            }
        }
    }
    Ok(())
}

pub fn all() -> Vec<(&'static str, Check)> {
    vec![
        ("attention weights sum to 1", attention_sums_to_one(100)),
        ("causal mask", causal_mask_invariance(50)),
        ("freezing", freezing_is_bitwise()),
        ("phase isolation", phase_isolation()),
        ("extraction loss shift invariance", extraction_loss_shift_invariance(100)),
        ("top-k monotone invariance", topk_monotone_invariance(100)),
    ]
}
