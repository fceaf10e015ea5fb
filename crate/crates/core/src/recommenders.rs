//! Reference recommender algorithms: random, personalized most-popular,
//! item-based and user-based cosine neighbourhoods.
//!
//! No algorithm ever suggests an item the user already rated in training.
//! Users absent from the training set get the unpersonalized ranking over
//! the whole catalog.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{RatingSet, RecommendationList};
use crate::num::Scalar;

/// Neighbourhood size of the user-based recommender.
pub const USER_NEIGHBORHOOD: usize = 80;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecommenderError {
    #[error("cannot train on an empty training set")]
    EmptyTrainingSet,
    #[error("unknown recommender kind '{0}' (valid kinds: random, most-popular, item-knn, user-knn)")]
    UnknownKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecommenderKind {
    Random,
    MostPopular,
    ItemKnn,
    UserKnn,
}

impl RecommenderKind {
    pub const ALL: [RecommenderKind; 4] = [
        RecommenderKind::Random,
        RecommenderKind::MostPopular,
        RecommenderKind::ItemKnn,
        RecommenderKind::UserKnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RecommenderKind::Random => "random",
            RecommenderKind::MostPopular => "most-popular",
            RecommenderKind::ItemKnn => "item-knn",
            RecommenderKind::UserKnn => "user-knn",
        }
    }
}

impl fmt::Display for RecommenderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RecommenderKind {
    type Err = RecommenderError;

    /// Accepts both `most-popular` and `most_popular` spellings.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let normalized = s.trim().to_ascii_lowercase().replace('_', "-");
        RecommenderKind::ALL
            .into_iter()
            .find(|k| k.name() == normalized)
            .ok_or_else(|| RecommenderError::UnknownKind(s.to_owned()))
    }
}

/// A model fitted on one training set. Items and users are interned to
/// dense indices; items are indexed in id order.
#[derive(Debug, Clone)]
pub struct TrainedModel<T> {
    kind: RecommenderKind,
    threshold: T,
    seed: u64,
    items: Vec<String>,
    item_index: HashMap<String, u32>,
    user_ids: Vec<String>,
    user_index: HashMap<String, u32>,
    /// per user, sorted item indices rated with any value
    seen: Vec<Vec<u32>>,
    /// per user, sorted item indices rated above the threshold
    liked: Vec<Vec<u32>>,
    /// per item, sorted user indices who liked it
    likers: Vec<Vec<u32>>,
    popularity: Vec<usize>,
    /// item indices by descending popularity, ties by id
    by_popularity: Vec<u32>,
    /// item-knn only: per item, every other item with non-zero similarity
    item_neighbors: Vec<Vec<(u32, T)>>,
}

impl<T: Scalar> TrainedModel<T> {
    pub fn train(
        kind: RecommenderKind,
        training_set: &RatingSet<T>,
        threshold: T,
        seed: u64,
    ) -> Result<Self, RecommenderError> {
        if training_set.is_empty() {
            return Err(RecommenderError::EmptyTrainingSet);
        }
        let mut items: Vec<String> = training_set.items().into_iter().map(str::to_owned).collect();
        items.sort_unstable();
        let item_index: HashMap<String, u32> = items
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        let user_ids: Vec<String> = training_set.users().into_iter().map(str::to_owned).collect();
        let user_index: HashMap<String, u32> = user_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();

        let mut seen = vec![Vec::new(); user_ids.len()];
        let mut liked = vec![Vec::new(); user_ids.len()];
        let mut likers = vec![Vec::new(); items.len()];
        let mut popularity = vec![0usize; items.len()];
        for r in training_set {
            let u = user_index[r.user()];
            let i = item_index[r.item()];
            seen[u as usize].push(i);
            popularity[i as usize] += 1;
            if r.is_positive(threshold) {
                liked[u as usize].push(i);
                likers[i as usize].push(u);
            }
        }
        for v in seen.iter_mut().chain(liked.iter_mut()).chain(likers.iter_mut()) {
            v.sort_unstable();
        }
        let mut by_popularity: Vec<u32> = (0..items.len() as u32).collect();
        by_popularity.sort_by(|&a, &b| popularity[b as usize].cmp(&popularity[a as usize]).then(a.cmp(&b)));

        let mut model = Self {
            kind,
            threshold,
            seed,
            items,
            item_index,
            user_ids,
            user_index,
            seen,
            liked,
            likers,
            popularity,
            by_popularity,
            item_neighbors: Vec::new(),
        };
        if kind == RecommenderKind::ItemKnn {
            model.item_neighbors = model.compute_item_neighbors();
        }
        Ok(model)
    }

    fn compute_item_neighbors(&self) -> Vec<Vec<(u32, T)>> {
        let n = self.items.len();
        let mut co = vec![0usize; n];
        let mut touched = Vec::new();
        let mut neighbors = Vec::with_capacity(n);
        for i in 0..n {
            for &u in &self.likers[i] {
                for &j in &self.liked[u as usize] {
                    if co[j as usize] == 0 {
                        touched.push(j);
                    }
                    co[j as usize] += 1;
                }
            }
            touched.sort_unstable();
            let norm_i = T::from_usize_lossy(self.likers[i].len());
            let row = touched
                .iter()
                .filter(|&&j| j as usize != i)
                .map(|&j| {
                    let norm_j = T::from_usize_lossy(self.likers[j as usize].len());
                    (j, T::from_usize_lossy(co[j as usize]) / (norm_i * norm_j).sqrt())
                })
                .collect();
            neighbors.push(row);
            for &j in &touched {
                co[j as usize] = 0;
            }
            touched.clear();
        }
        neighbors
    }

    pub fn kind(&self) -> RecommenderKind {
        self.kind
    }

    pub fn threshold(&self) -> T {
        self.threshold
    }

    /// Training items in id order.
    pub fn catalog(&self) -> &[String] {
        &self.items
    }

    pub fn popularity(&self, item: &str) -> usize {
        self.item_index
            .get(item)
            .map(|&i| self.popularity[i as usize])
            .unwrap_or(0)
    }

    /// Items the user rated in training, in id order.
    pub fn seen(&self, user: &str) -> Vec<&str> {
        self.user_index
            .get(user)
            .map(|&u| {
                self.seen[u as usize]
                    .iter()
                    .map(|&i| self.items[i as usize].as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Cosine similarity of two items' liker vectors.
    pub fn item_similarity(&self, a: &str, b: &str) -> T {
        match (self.item_index.get(a), self.item_index.get(b)) {
            (Some(&a), Some(&b)) => self.cosine(&self.likers[a as usize], &self.likers[b as usize]),
            _ => T::zero(),
        }
    }

    /// Cosine similarity of two users' like vectors.
    pub fn user_similarity(&self, a: &str, b: &str) -> T {
        match (self.user_index.get(a), self.user_index.get(b)) {
            (Some(&a), Some(&b)) => self.cosine(&self.liked[a as usize], &self.liked[b as usize]),
            _ => T::zero(),
        }
    }

    fn cosine(&self, x: &[u32], y: &[u32]) -> T {
        if x.is_empty() || y.is_empty() {
            return T::zero();
        }
        let common = x.iter().filter(|v| y.binary_search(v).is_ok()).count();
        T::from_usize_lossy(common)
            / (T::from_usize_lossy(x.len()) * T::from_usize_lossy(y.len())).sqrt()
    }

    /// Top-`k` list for one user. Shorter than `k` only when the user has
    /// fewer than `k` unrated catalog items.
    pub fn recommend(&self, user: &str, k: usize) -> RecommendationList {
        let uidx = self.user_index.get(user).copied();
        let seen: &[u32] = uidx.map(|u| self.seen[u as usize].as_slice()).unwrap_or(&[]);
        let unseen = |i: &u32| seen.binary_search(i).is_err();
        let picked: Vec<u32> = match self.kind {
            RecommenderKind::Random => {
                let candidates: Vec<u32> = (0..self.items.len() as u32).filter(unseen).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash(user));
                candidates.choose_multiple(&mut rng, k).copied().collect()
            }
            RecommenderKind::MostPopular => self.by_popularity.iter().copied().filter(unseen).take(k).collect(),
            RecommenderKind::ItemKnn => {
                let scores = uidx.map(|u| self.item_knn_scores(u)).unwrap_or_default();
                self.top_by_score(&scores, seen, k)
            }
            RecommenderKind::UserKnn => {
                let scores = uidx.map(|u| self.user_knn_scores(u)).unwrap_or_default();
                self.top_by_score(&scores, seen, k)
            }
        };
        RecommendationList {
            user: user.to_owned(),
            items: picked.into_iter().map(|i| self.items[i as usize].clone()).collect(),
        }
    }

    /// score(i) = Σ over the user's liked items j of sim(i, j)
    fn item_knn_scores(&self, user: u32) -> Vec<T> {
        let mut scores = vec![T::zero(); self.items.len()];
        for &j in &self.liked[user as usize] {
            for &(i, sim) in &self.item_neighbors[j as usize] {
                scores[i as usize] = scores[i as usize] + sim;
            }
        }
        scores
    }

    /// score(i) = Σ over the nearest users v who liked i of sim(user, v)
    fn user_knn_scores(&self, user: u32) -> Vec<T> {
        let mine = &self.liked[user as usize];
        let mut scores = vec![T::zero(); self.items.len()];
        if mine.is_empty() {
            return scores;
        }
        let mut co: HashMap<u32, usize> = HashMap::new();
        for &j in mine {
            for &v in &self.likers[j as usize] {
                if v != user {
                    *co.entry(v).or_default() += 1;
                }
            }
        }
        let norm = T::from_usize_lossy(mine.len());
        let mut neighbors: Vec<(u32, T)> = co
            .into_iter()
            .map(|(v, c)| {
                let other = T::from_usize_lossy(self.liked[v as usize].len());
                (v, T::from_usize_lossy(c) / (norm * other).sqrt())
            })
            .collect();
        neighbors.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.user_ids[a.0 as usize].cmp(&self.user_ids[b.0 as usize]))
        });
        neighbors.truncate(USER_NEIGHBORHOOD);
        for (v, sim) in neighbors {
            for &i in &self.liked[v as usize] {
                scores[i as usize] = scores[i as usize] + sim;
            }
        }
        scores
    }

    /// Unseen items by descending score, then popularity, then id.
    fn top_by_score(&self, scores: &[T], seen: &[u32], k: usize) -> Vec<u32> {
        let score = |i: u32| scores.get(i as usize).copied().unwrap_or_else(T::zero);
        let cmp = |a: &u32, b: &u32| {
            score(*b)
                .partial_cmp(&score(*a))
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.popularity[*b as usize].cmp(&self.popularity[*a as usize]))
                .then(a.cmp(b))
        };
        let mut candidates: Vec<u32> = (0..self.items.len() as u32)
            .filter(|i| seen.binary_search(i).is_err())
            .collect();
        if k == 0 {
            return Vec::new();
        }
        if candidates.len() > k {
            candidates.select_nth_unstable_by(k - 1, cmp);
            candidates.truncate(k);
        }
        candidates.sort_by(cmp);
        candidates
    }
}

/// FNV-1a; stable across runs and platforms, unlike the std hasher.
fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
