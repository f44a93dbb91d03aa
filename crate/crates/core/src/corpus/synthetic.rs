//! Synthetic reviews with planted, personalized ground-truth aspects.
//!
//! Draw order on the `Generator` stream of `seed` (see [`crate::rng`]):
//!
//! 1. For every user `u`, for every pool aspect `j`: `pref[u][j] = uniform()^2`.
//! 2. For every item `i`, for every pool aspect `j`: `sal[i][j] = uniform()^2`.
//! 3. For every record:
//!    - `user = below(n_users)`, then `item = below(n_items)`;
//!    - with `w[j] = pref[user][j] * sal[item][j]`, draw `aspects_per_review`
//!      distinct aspects sequentially: `x = uniform() * sum(w over unchosen)`,
//!      then pick the first unchosen `j` (ascending) whose running sum of
//!      unchosen weights exceeds `x`;
//!    - choose slots by a partial Fisher-Yates over positions
//!      `0..review_length`: for `k` in order, `t = k + below(review_length - k)`,
//!      swap slots `k` and `t`; aspect `k` is written at slot `k`;
//!    - every other position, ascending, gets filler
//!      `w{floor(vocab_size * uniform()^filler_skew)}`;
//!    - `z = normal()` (drawn even when the noise std is zero);
//!    - `rating = clamp(0.6 + 8 * mean(w over chosen) + rating_noise_std * z, 1, 5)`.
//!
//! Aspect terms are `aspect{j}`, users `u{n}`, items `i{n}`. Ground-truth
//! aspects are listed in draw order.

use serde::{Deserialize, Serialize};

use super::{Dataset, Provenance, ReviewRecord};
use crate::error::{Error, Result};
use crate::rng::{Purpose, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_records: usize,
    /// Number of distinct filler words.
    pub vocab_size: usize,
    pub aspect_pool_size: usize,
    pub aspects_per_review: usize,
    pub review_length: usize,
    /// Exponent on the uniform draw picking filler words; 1 is uniform,
    /// larger values favour low-numbered words.
    pub filler_skew: f64,
    pub rating_noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_users: 50,
            n_items: 40,
            n_records: 4000,
            vocab_size: 200,
            aspect_pool_size: 30,
            aspects_per_review: 3,
            review_length: 12,
            filler_skew: 2.0,
            rating_noise_std: 0.2,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("n_records", self.n_records),
            ("vocab_size", self.vocab_size),
            ("aspect_pool_size", self.aspect_pool_size),
            ("aspects_per_review", self.aspects_per_review),
            ("review_length", self.review_length),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.aspects_per_review > self.aspect_pool_size {
            return Err(Error::Config("aspects_per_review exceeds aspect_pool_size".into()));
        }
        if self.aspects_per_review > self.review_length {
            return Err(Error::Config("aspects_per_review exceeds review_length".into()));
        }
        if !(self.filler_skew > 0.0 && self.filler_skew.is_finite()) {
            return Err(Error::Config("filler_skew must be finite and > 0".into()));
        }
        if !(self.rating_noise_std >= 0.0 && self.rating_noise_std.is_finite()) {
            return Err(Error::Config("rating_noise_std must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Generated data plus the planted profiles that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    /// `n_users x aspect_pool_size` preference weights.
    pub preferences: Vec<Vec<f64>>,
    /// `n_items x aspect_pool_size` salience weights.
    pub salience: Vec<Vec<f64>>,
    pub aspect_terms: Vec<String>,
}

impl SyntheticCorpus {
    /// Probability that aspect `j` is the first one drawn for `(user, item)`.
    pub fn first_draw_distribution(&self, user: usize, item: usize) -> Vec<f64> {
        let w: Vec<f64> = self.preferences[user]
            .iter()
            .zip(&self.salience[item])
            .map(|(p, s)| p * s)
            .collect();
        let total: f64 = w.iter().sum();
        w.iter().map(|x| x / total).collect()
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    generate_synthetic_with_truth(spec).map(|c| c.dataset)
}

pub fn generate_synthetic_with_truth(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let pool = spec.aspect_pool_size;
    let mut rng = Stream::new(spec.seed, Purpose::Generator);
    let profile = |rows: usize, rng: &mut Stream| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..pool).map(|_| rng.uniform().powi(2)).collect())
            .collect()
    };
    let preferences = profile(spec.n_users, &mut rng);
    let salience = profile(spec.n_items, &mut rng);
    let aspect_terms: Vec<String> = (0..pool).map(|j| format!("aspect{j}")).collect();

    let mut records = Vec::with_capacity(spec.n_records);
    let mut weights = vec![0.0; pool];
    let mut slots: Vec<usize> = Vec::with_capacity(spec.review_length);
    for _ in 0..spec.n_records {
        let user = rng.below(spec.n_users);
        let item = rng.below(spec.n_items);
        for (w, (p, s)) in weights
            .iter_mut()
            .zip(preferences[user].iter().zip(&salience[item]))
        {
            *w = p * s;
        }

        let mut chosen = Vec::with_capacity(spec.aspects_per_review);
        for _ in 0..spec.aspects_per_review {
            chosen.push(draw_weighted(&weights, &chosen, &mut rng));
        }

        slots.clear();
        slots.extend(0..spec.review_length);
        for k in 0..chosen.len() {
            let t = k + rng.below(spec.review_length - k);
            slots.swap(k, t);
        }
        let mut tokens: Vec<Option<&str>> = vec![None; spec.review_length];
        for (k, &j) in chosen.iter().enumerate() {
            tokens[slots[k]] = Some(&aspect_terms[j]);
        }
        let review: Vec<String> = tokens
            .into_iter()
            .map(|t| match t {
                Some(term) => term.to_string(),
                None => {
                    let u = rng.uniform().powf(spec.filler_skew);
                    let idx = ((spec.vocab_size as f64 * u) as usize).min(spec.vocab_size - 1);
                    format!("w{idx}")
                }
            })
            .collect();

        let z = rng.normal();
        let affinity = chosen.iter().map(|&j| weights[j]).sum::<f64>() / chosen.len() as f64;
        let rating = (0.6 + 8.0 * affinity + spec.rating_noise_std * z).clamp(1.0, 5.0);

        records.push(ReviewRecord {
            user_id: format!("u{user}"),
            item_id: format!("i{item}"),
            rating,
            review: review.join(" "),
            aspects: chosen.iter().map(|&j| aspect_terms[j].clone()).collect(),
        });
    }

    Ok(SyntheticCorpus {
        dataset: Dataset::new(records, Provenance::Synthetic),
        preferences,
        salience,
        aspect_terms,
    })
}

fn draw_weighted(weights: &[f64], chosen: &[usize], rng: &mut Stream) -> usize {
    let total: f64 = weights
        .iter()
        .enumerate()
        .filter(|(j, _)| !chosen.contains(j))
        .map(|(_, w)| w)
        .sum();
    let x = rng.uniform() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (j, w) in weights.iter().enumerate() {
        if chosen.contains(&j) {
            continue;
        }
        acc += w;
        last = Some(j);
        if x < acc {
            return j;
        }
    }
    last.expect("aspect pool exhausted")
}
