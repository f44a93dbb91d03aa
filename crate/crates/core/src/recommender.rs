//! Attentive aspect-fusion rating predictor.
//!
//! The user and item rows are projected to `Z` (width `d_a`). Each of the K
//! aspect embeddings is reweighted by a softmax over `W_a ⊙ Z`, the K
//! reweighted rows are flattened and joined with `W_u` and `W_i`, and a
//! sigmoid MLP maps the result to a rating on `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Stream;

pub const ASPECT_TABLE: &str = "rec.aspect";
pub const ATTN_W: &str = "rec.attn.w";
pub const ATTN_B: &str = "rec.attn.b";

/// Which axis the attention softmax normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionAxis {
    /// Over the `d_a` components of each aspect embedding.
    Components,
    /// One scalar weight per aspect, normalized across the K aspects.
    Aspects,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecConfig {
    pub d_u: usize,
    pub d_i: usize,
    pub d_a: usize,
    pub k: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub axis: AttentionAxis,
    pub use_attention: bool,
}

impl RecConfig {
    pub fn input_width(&self) -> usize {
        self.k * self.d_a + self.d_u + self.d_i
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_width();
        for _ in 0..self.hidden_layers {
            dims.push((fan_in, self.hidden_width));
            fan_in = self.hidden_width;
        }
        dims.push((fan_in, 1));
        dims
    }
}

fn layer_names(l: usize) -> (String, String) {
    (format!("rec.fc{l}.w"), format!("rec.fc{l}.b"))
}

/// Inserts every recommender parameter, drawn from `Uniform(-0.1, 0.1)`.
/// `n_aspects` excludes the padding row, which is appended.
pub fn init_rec_params(store: &mut ParamStore, cfg: &RecConfig, n_aspects: usize, rng: &mut Stream) -> Result<()> {
    let mut uniform = |rows, cols| Tensor::from_fn(rows, cols, |_, _| rng.uniform_in(-0.1, 0.1));
    store.insert(ASPECT_TABLE, uniform(n_aspects + 1, cfg.d_a), true)?;
    store.insert(ATTN_W, uniform(cfg.d_u + cfg.d_i, cfg.d_a), true)?;
    store.insert(ATTN_B, uniform(1, cfg.d_a), true)?;
    for (l, (fan_in, fan_out)) in cfg.layer_dims().into_iter().enumerate() {
        let (w, b) = layer_names(l);
        store.insert(w, uniform(fan_in, fan_out), true)?;
        store.insert(b, uniform(1, fan_out), true)?;
    }
    Ok(())
}

/// Attention over the aspect rows `w_a` (`K x d_a`) given the user and item
/// rows. Returns `K x d_a` weights for [`AttentionAxis::Components`] (each
/// row sums to one) or `K x 1` for [`AttentionAxis::Aspects`].
pub fn attention_weights(
    g: &mut Graph,
    store: &ParamStore,
    w_a: Var,
    w_u: Var,
    w_i: Var,
    axis: AttentionAxis,
) -> Result<Var> {
    let ui = g.concat_cols(&[w_u, w_i])?;
    let w = g.param(store, ATTN_W)?;
    let b = g.param(store, ATTN_B)?;
    let zw = g.matmul(ui, w)?;
    let z = g.add(zw, b)?;
    let (za, aa) = (g.value(z).shape(), g.value(w_a).shape());
    if za[0] != 1 || za[1] != aa[1] {
        return Err(Error::shape("attention_weights", format!("z {za:?} vs aspects {aa:?}")));
    }
    let prod = g.mul(w_a, z)?;
    match axis {
        AttentionAxis::Components => g.softmax(prod, Axis::Row),
        AttentionAxis::Aspects => {
            let scores = g.row_sums(prod)?;
            g.softmax(scores, Axis::Col)
        }
    }
}

/// `W_a ⊙ attn`, broadcasting per-aspect scalar weights.
pub fn modulate_aspect(g: &mut Graph, w_a: Var, attn: Var) -> Result<Var> {
    g.mul(w_a, attn)
}

/// Normalized rating `ŷ ∈ (0, 1)` as a `1 x 1` node.
pub fn predict_rating(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RecConfig,
    w_u: Var,
    w_i: Var,
    aspects: &[usize],
) -> Result<Var> {
    if aspects.len() != cfg.k {
        return Err(Error::shape(
            "predict_rating",
            format!("{} aspect ids, expected {}", aspects.len(), cfg.k),
        ));
    }
    let table = g.param(store, ASPECT_TABLE)?;
    let size = g.value(table).rows();
    if let Some(&bad) = aspects.iter().find(|&&a| a >= size) {
        return Err(Error::IdOutOfRange {
            what: "aspect",
            id: bad,
            size,
        });
    }
    let w_a = g.gather(table, aspects)?;
    let fused = if cfg.use_attention {
        let attn = attention_weights(g, store, w_a, w_u, w_i, cfg.axis)?;
        modulate_aspect(g, w_a, attn)?
    } else {
        w_a
    };
    let flat = g.reshape(fused, 1, cfg.k * cfg.d_a)?;
    let mut x = g.concat_cols(&[flat, w_u, w_i])?;
    for l in 0..=cfg.hidden_layers {
        let (wn, bn) = layer_names(l);
        let w = g.param(store, &wn)?;
        let b = g.param(store, &bn)?;
        let xw = g.matmul(x, w)?;
        let pre = g.add(xw, b)?;
        x = g.sigmoid(pre)?;
    }
    Ok(x)
}

/// `Σ (y - ŷ)²` over a column of predictions.
pub fn rec_loss(g: &mut Graph, predictions: Var, targets: &[f64]) -> Result<Var> {
    let target = Tensor::new(targets.len(), 1, targets.to_vec())?;
    g.squared_error(predictions, target)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingPrediction {
    /// On `[0, 1]`.
    pub normalized: f64,
}

impl RatingPrediction {
    /// Back on the 1–5 star scale.
    pub fn stars(&self) -> f64 {
        1.0 + 4.0 * self.normalized
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    fn cfg() -> RecConfig {
        RecConfig {
            d_u: 2,
            d_i: 2,
            d_a: 3,
            k: 2,
            hidden_width: 5,
            hidden_layers: 3,
            axis: AttentionAxis::Components,
            use_attention: true,
        }
    }

    fn store(c: &RecConfig) -> ParamStore {
        let mut s = ParamStore::new();
        init_rec_params(&mut s, c, 4, &mut Stream::new(3, Purpose::Init)).unwrap();
        s
    }

    fn predict(s: &ParamStore, c: &RecConfig, aspects: &[usize]) -> f64 {
        let mut g = Graph::new();
        let u = g.input(Tensor::row(vec![0.3, -1.0]));
        let i = g.input(Tensor::row(vec![1.2, 0.4]));
        let y = predict_rating(&mut g, s, c, u, i, aspects).unwrap();
        g.value(y).item()
    }

    #[test]
    fn init_ranges_and_shapes() {
        let c = cfg();
        let s = store(&c);
        assert_eq!(s.get(ASPECT_TABLE).unwrap().shape(), [5, 3]);
        assert_eq!(s.get("rec.fc0.w").unwrap().shape(), [10, 5]);
        assert_eq!(s.get("rec.fc3.w").unwrap().shape(), [5, 1]);
        for (_, p) in s.iter() {
            assert!(p.value.data().iter().all(|x| (-0.1..=0.1).contains(x)));
        }
    }

    #[test]
    fn zero_parameters_predict_half() {
        let c = cfg();
        let mut s = store(&c);
        let names: Vec<String> = s.names().map(str::to_string).collect();
        for n in names {
            let t = s.get_mut(&n).unwrap();
            *t = Tensor::zeros(t.rows(), t.cols());
        }
        assert_eq!(predict(&s, &c, &[0, 1]), 0.5);
    }

    #[test]
    fn output_in_open_unit_interval() {
        let c = cfg();
        let s = store(&c);
        for a in 0..5 {
            let y = predict(&s, &c, &[a, (a + 1) % 5]);
            assert!(y > 0.0 && y < 1.0);
        }
    }

    #[test]
    fn modulation_arithmetic() {
        let mut g = Graph::new();
        let w = g.input(Tensor::row(vec![2.0, 4.0]));
        let a = g.input(Tensor::row(vec![0.25, 0.75]));
        let m = modulate_aspect(&mut g, w, a).unwrap();
        assert_eq!(g.value(m).data(), &[0.5, 3.0]);
    }

    #[test]
    fn symmetric_attention_is_uniform() {
        let mut s = ParamStore::new();
        s.insert(ATTN_W, Tensor::zeros(2, 2), true).unwrap();
        s.insert(ATTN_B, Tensor::zeros(1, 2), true).unwrap();
        let mut g = Graph::new();
        let wa = g.input(Tensor::row(vec![1.0, -3.0]));
        let u = g.input(Tensor::row(vec![1.0]));
        let i = g.input(Tensor::row(vec![2.0]));
        let at = attention_weights(&mut g, &s, wa, u, i, AttentionAxis::Components).unwrap();
        assert_eq!(g.value(at).data(), &[0.5, 0.5]);
    }

    #[test]
    fn wrong_aspect_count_and_ids_rejected() {
        let c = cfg();
        let s = store(&c);
        let mut g = Graph::new();
        let u = g.input(Tensor::zeros(1, 2));
        let i = g.input(Tensor::zeros(1, 2));
        assert!(predict_rating(&mut g, &s, &c, u, i, &[0]).is_err());
        assert!(predict_rating(&mut g, &s, &c, u, i, &[0, 9]).is_err());
    }

    #[test]
    fn rec_loss_values() {
        let mut g = Graph::new();
        let p = g.input(Tensor::new(2, 1, vec![0.0, 1.0]).unwrap());
        let l = rec_loss(&mut g, p, &[1.0, 0.0]).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        let l = rec_loss(&mut g, p, &[0.0, 1.0]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn stars_denormalize() {
        assert_eq!(RatingPrediction { normalized: 0.5 }.stars(), 3.0);
    }
}
