//! Randomized metric fixtures.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reclab_core::{Rating, RatingSet, RecommendationList, Recommendations};

use crate::oracle::Triple;

pub const KS: [usize; 4] = [1, 2, 5, 10];

#[derive(Debug, Clone)]
pub struct Fixture {
    pub seed: u64,
    pub train: Vec<Triple>,
    pub test: Vec<Triple>,
    pub threshold: f64,
    pub k: usize,
    /// user → ordered list; may be shorter or longer than k, may name
    /// items outside the training catalog, and may skip test users
    pub recs: HashMap<String, Vec<String>>,
}

/// A fixture with at most 30 users and 60 items.
pub fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_users = rng.gen_range(1..=30);
    let n_items = rng.gen_range(2..=60);
    let k = KS[rng.gen_range(0..KS.len())];
    let users: Vec<String> = (0..n_users).map(|u| format!("u{u}")).collect();
    let items: Vec<String> = (0..n_items).map(|i| format!("i{i:02}")).collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for u in &users {
        for i in &items {
            let roll: f64 = rng.gen();
            let value = rng.gen_range(1..=5) as f64;
            if roll < 0.15 {
                train.push((u.clone(), i.clone(), value));
            } else if roll < 0.22 {
                test.push((u.clone(), i.clone(), value));
            }
        }
    }
    if train.is_empty() {
        train.push((users[0].clone(), items[0].clone(), 4.0));
    }

    // candidates include a few items nobody rated in training
    let mut pool = items.clone();
    pool.extend((0..3).map(|x| format!("new{x}")));
    let mut recs = HashMap::new();
    for u in &users {
        if rng.gen_bool(0.1) {
            continue;
        }
        let len = rng.gen_range(0..=(k + 2).min(pool.len()));
        let list: Vec<String> = pool.choose_multiple(&mut rng, len).cloned().collect();
        recs.insert(u.clone(), list);
    }
    Fixture {
        seed,
        train,
        test,
        threshold: 3.0,
        k,
        recs,
    }
}

pub fn rating_set(rows: &[Triple]) -> RatingSet {
    RatingSet::from_ratings(
        rows.iter()
            .map(|(u, i, v)| Rating::new(u.as_str(), i.as_str(), *v, None).expect("fixture rows are valid")),
    )
    .0
}

pub fn recommendations(recs: &HashMap<String, Vec<String>>) -> Recommendations {
    recs.iter()
        .map(|(u, items)| {
            let list = RecommendationList::new(u.as_str(), items.clone()).expect("fixture lists are duplicate-free");
            (u.clone(), list)
        })
        .collect()
}
