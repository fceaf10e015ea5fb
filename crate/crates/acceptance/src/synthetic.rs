//! Synthetic MovieLens-100K-like corpus.
//!
//! Users prefer one or two latent genres, item popularity follows a Zipf
//! law and user activity is heavy-tailed, so the usual gaps between random,
//! popularity and neighbourhood recommenders show up on a small file.
//! Output is in the MovieLens 100K layout:
//! `user<TAB>item<TAB>rating<TAB>timestamp`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusShape {
    pub users: usize,
    pub items: usize,
    pub genres: usize,
    pub ratings: usize,
    pub min_per_user: usize,
    /// Zipf exponent of item popularity.
    pub zipf: f64,
    /// Sampling weight multiplier for items of a preferred genre.
    pub genre_boost: f64,
}

impl Default for CorpusShape {
    fn default() -> Self {
        Self {
            users: 300,
            items: 1000,
            genres: 8,
            ratings: 5000,
            min_per_user: 5,
            zipf: 1.0,
            genre_boost: 6.0,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Per-user rating counts: at least `min_per_user`, heavy-tailed, summing
/// to exactly `shape.ratings`.
fn activity(shape: &CorpusShape, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let spare = shape.ratings - shape.users * shape.min_per_user;
    let weights: Vec<f64> = (0..shape.users)
        .map(|_| (1.1 * normal(rng)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let cap = shape.items / 2;
    let mut counts: Vec<usize> = weights
        .iter()
        .map(|w| (shape.min_per_user + (w / total * spare as f64) as usize).min(cap))
        .collect();
    let mut assigned: usize = counts.iter().sum();
    while assigned < shape.ratings {
        let u = rng.gen_range(0..shape.users);
        if counts[u] < cap {
            counts[u] += 1;
            assigned += 1;
        }
    }
    counts
}

/// Generates the corpus text.
pub fn corpus(shape: &CorpusShape, seed: u64) -> String {
    assert!(shape.ratings >= shape.users * shape.min_per_user);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut ranks: Vec<usize> = (0..shape.items).collect();
    ranks.shuffle(&mut rng);
    let popularity: Vec<f64> = ranks
        .iter()
        .map(|&r| 1.0 / ((r + 1) as f64).powf(shape.zipf))
        .collect();
    let genre: Vec<usize> = (0..shape.items).map(|_| rng.gen_range(0..shape.genres)).collect();
    let quality: Vec<f64> = (0..shape.items).map(|_| 0.6 * normal(&mut rng)).collect();

    let counts = activity(shape, &mut rng);
    let mut out = String::with_capacity(shape.ratings * 24);
    let mut ts: i64 = 874_724_710;
    for (u, &n) in counts.iter().enumerate() {
        let n_pref = rng.gen_range(1..=2);
        let prefs: BTreeSet<usize> = (0..n_pref).map(|_| rng.gen_range(0..shape.genres)).collect();
        let bias = 0.4 * normal(&mut rng);
        let mut weights: Vec<f64> = (0..shape.items)
            .map(|i| {
                let boost = if prefs.contains(&genre[i]) { shape.genre_boost } else { 1.0 };
                popularity[i] * boost
            })
            .collect();
        for _ in 0..n {
            let dist = WeightedIndex::new(&weights).expect("weights stay positive");
            let i = dist.sample(&mut rng);
            weights[i] = 0.0;
            let affinity = if prefs.contains(&genre[i]) { 0.9 } else { -0.6 };
            let raw = 3.4 + bias + affinity + quality[i] + 0.7 * normal(&mut rng);
            let value = raw.round().clamp(1.0, 5.0) as u8;
            ts += rng.gen_range(1..3_000);
            let _ = writeln!(out, "{}\t{}\t{}\t{}", u + 1, i + 1, value, ts);
        }
    }
    out
}
