//! The synthetic generator against an independent implementation of its
//! recipe, plus sampling and initialization statistics.

use promptrec::corpus::{generate_synthetic, generate_synthetic_with_truth, SyntheticSpec};
use promptrec::training::{init_params, TrainConfig};
use promptrec::ReviewRecord;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The documented stream, driven directly from ChaCha8.
struct Reference(ChaCha8Rng);

impl Reference {
    fn generator(seed: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut r = ChaCha8Rng::from_seed(key);
        r.set_stream(2);
        Reference(r)
    }

    fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 / 9007199254740992.0
    }

    fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64).floor() as usize).min(n - 1)
    }

    fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

fn reference_records(spec: &SyntheticSpec, count: usize) -> Vec<ReviewRecord> {
    let mut r = Reference::generator(spec.seed);
    let pool = spec.aspect_pool_size;
    let mut pref = vec![vec![0.0; pool]; spec.n_users];
    for row in pref.iter_mut() {
        for x in row.iter_mut() {
            let u = r.uniform();
            *x = u * u;
        }
    }
    let mut sal = vec![vec![0.0; pool]; spec.n_items];
    for row in sal.iter_mut() {
        for x in row.iter_mut() {
            let u = r.uniform();
            *x = u * u;
        }
    }
    let mut out = Vec::new();
    for _ in 0..count {
        let user = r.below(spec.n_users);
        let item = r.below(spec.n_items);
        let w: Vec<f64> = (0..pool).map(|j| pref[user][j] * sal[item][j]).collect();
        let mut chosen: Vec<usize> = Vec::new();
        while chosen.len() < spec.aspects_per_review {
            let open: Vec<usize> = (0..pool).filter(|j| !chosen.contains(j)).collect();
            let total: f64 = open.iter().map(|&j| w[j]).sum();
            let x = r.uniform() * total;
            let mut acc = 0.0;
            let mut pick = *open.last().unwrap();
            for &j in &open {
                acc += w[j];
                if acc > x {
                    pick = j;
                    break;
                }
            }
            chosen.push(pick);
        }
        let n = spec.review_length;
        let mut slots: Vec<usize> = (0..n).collect();
        for k in 0..chosen.len() {
            let t = k + r.below(n - k);
            slots.swap(k, t);
        }
        let mut words: Vec<String> = vec![String::new(); n];
        for (k, &j) in chosen.iter().enumerate() {
            words[slots[k]] = format!("aspect{j}");
        }
        for word in words.iter_mut() {
            if word.is_empty() {
                let u = r.uniform().powf(spec.filler_skew);
                let idx = ((spec.vocab_size as f64 * u).floor() as usize).min(spec.vocab_size - 1);
                *word = format!("w{idx}");
            }
        }
        let z = r.normal();
        let mean_w = chosen.iter().map(|&j| w[j]).sum::<f64>() / chosen.len() as f64;
        out.push(ReviewRecord {
            user_id: format!("u{user}"),
            item_id: format!("i{item}"),
            rating: (0.6 + 8.0 * mean_w + spec.rating_noise_std * z).clamp(1.0, 5.0),
            review: words.join(" "),
            aspects: chosen.iter().map(|j| format!("aspect{j}")).collect(),
        });
    }
    out
}

#[test]
fn seed_42_matches_reference_recipe() {
    let spec = SyntheticSpec {
        n_records: 100,
        seed: 42,
        ..Default::default()
    };
    let d = generate_synthetic(&spec).unwrap();
    let reference = reference_records(&spec, 100);
    assert_eq!(d.records[0], reference[0]);
    assert_eq!(d.records, reference);
}

#[test]
fn reference_agrees_across_shapes() {
    for seed in [0, 7, 1234] {
        let spec = SyntheticSpec {
            n_users: 3,
            n_items: 5,
            n_records: 40,
            vocab_size: 9,
            aspect_pool_size: 4,
            aspects_per_review: 4,
            review_length: 5,
            filler_skew: 1.0,
            rating_noise_std: 0.5,
            seed,
        };
        assert_eq!(generate_synthetic(&spec).unwrap().records, reference_records(&spec, 40));
    }
}

#[test]
fn first_aspect_follows_preference_times_salience() {
    let spec = SyntheticSpec {
        n_users: 1,
        n_items: 1,
        n_records: 40_000,
        aspect_pool_size: 6,
        review_length: 4,
        seed: 9,
        ..Default::default()
    };
    let c = generate_synthetic_with_truth(&spec).unwrap();
    let expected = c.first_draw_distribution(0, 0);
    let mut counts = [0.0; 6];
    for r in &c.dataset.records {
        let j: usize = r.aspects[0].trim_start_matches("aspect").parse().unwrap();
        counts[j] += 1.0;
    }
    let n = spec.n_records as f64;
    for (j, p) in expected.iter().enumerate() {
        let sd = (p * (1.0 - p) / n).sqrt();
        let got = counts[j] / n;
        assert!((got - p).abs() < 5.0 * sd + 1e-12, "aspect {j}: {got} vs {p}");
    }
}

#[test]
fn every_truth_aspect_is_in_its_review() {
    let d = generate_synthetic(&SyntheticSpec::default()).unwrap();
    for r in &d.records {
        let words: Vec<&str> = r.review.split(' ').collect();
        assert!(r.aspects.iter().all(|a| words.contains(&a.as_str())));
    }
}

#[test]
fn init_statistics() {
    let cfg = TrainConfig {
        d_u: 16,
        d_i: 16,
        ..Default::default()
    };
    let s = init_params(&cfg, 625, 50, 30).unwrap();
    let users = s.get("emb.user").unwrap().data();
    assert_eq!(users.len(), 10_000);
    let n = users.len() as f64;
    let mean = users.iter().sum::<f64>() / n;
    let std = (users.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 0.05, "mean {mean}");
    assert!((std - 1.0).abs() < 0.05, "std {std}");

    let rec: Vec<f64> = s
        .iter()
        .filter(|(name, _)| name.starts_with("rec."))
        .flat_map(|(_, p)| p.value.data().to_vec())
        .collect();
    assert!(rec.iter().all(|x| (-0.1..0.1).contains(x)));
    let m = rec.len() as f64;
    let mean = rec.iter().sum::<f64>() / m;
    let std = (rec.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    let uniform_std = 0.2 / 12f64.sqrt();
    assert!(mean.abs() < 0.005, "mean {mean}");
    assert!((std - uniform_std).abs() < 0.05 * uniform_std, "std {std}");

    assert_eq!(init_params(&cfg, 625, 50, 30).unwrap(), s);
}
