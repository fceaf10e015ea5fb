//! The seven ranking-quality metrics.
//!
//! Every metric averages a per-user term over the users of the test set.
//! Lists are cut to the first `k` items, and the denominators that involve
//! the list length use the configured `k`, so a recommender returning short
//! lists is penalized. Users without a list are scored as if their list were
//! empty.
//!
//! | metric | per-user term |
//! |---|---|
//! | precision | `|rec ∩ ref| / k` |
//! | recall | `|rec ∩ ref| / |ref|`, 0 when `ref` is empty |
//! | ndcg | `Σ_i [rec_i ∈ ref] / log2(i + 1)` over `Σ_{i≤k} 1 / log2(i + 1)` |
//! | novelty | `-Σ_i log2 freq(rec_i) / k`, `log2 0 = 0` |
//! | diversity | `Σ_{i<j} (1 - cos(rec_i, rec_j)) / (k (k - 1))` |
//! | serendipity | `|(rec \ popular_k) ∩ ref| / k` |
//!
//! Coverage is global: distinct recommended training items over all
//! training items.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::domain::{MetricsReport, RatingSet, Recommendations};
use crate::num::{stable_mean, Scalar};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("the training set is empty")]
    EmptyTrainingSet,
    #[error("list length k must be at least 1")]
    ZeroK,
}

/// Everything the metrics need from the split, precomputed once per
/// experiment.
#[derive(Debug, Clone)]
pub struct EvaluationContext<T> {
    threshold: T,
    k: usize,
    test_users: Vec<String>,
    reference: HashMap<String, HashSet<String>>,
    train_items: HashSet<String>,
    item_freq: HashMap<String, T>,
    train_users: Vec<String>,
    /// item -> sorted indices into `train_users` of the users who liked it
    likers: HashMap<String, Vec<u32>>,
    popular_topk: Vec<String>,
    ideal_dcg: T,
}

impl<T: Scalar> EvaluationContext<T> {
    pub fn build(
        train: &RatingSet<T>,
        test: &RatingSet<T>,
        threshold: T,
        k: usize,
    ) -> Result<Self, MetricsError> {
        if k == 0 {
            return Err(MetricsError::ZeroK);
        }
        if train.is_empty() {
            return Err(MetricsError::EmptyTrainingSet);
        }

        let test_users: Vec<String> = test.users().into_iter().map(str::to_owned).collect();
        let mut reference: HashMap<String, HashSet<String>> = HashMap::new();
        for r in test.iter().filter(|r| r.is_positive(threshold)) {
            reference
                .entry(r.user().to_owned())
                .or_default()
                .insert(r.item().to_owned());
        }

        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut user_index: HashMap<&str, u32> = HashMap::new();
        let mut train_users = Vec::new();
        let mut likers: HashMap<String, Vec<u32>> = HashMap::new();
        for r in train {
            *counts.entry(r.item()).or_default() += 1;
            let next = user_index.len() as u32;
            let idx = *user_index.entry(r.user()).or_insert_with(|| {
                train_users.push(r.user().to_owned());
                next
            });
            if r.is_positive(threshold) {
                likers.entry(r.item().to_owned()).or_default().push(idx);
            }
        }
        for v in likers.values_mut() {
            v.sort_unstable();
            v.dedup();
        }

        let total = T::from_usize_lossy(train.len());
        let item_freq: HashMap<String, T> = counts
            .iter()
            .map(|(item, c)| ((*item).to_owned(), T::from_usize_lossy(*c) / total))
            .collect();
        let train_items: HashSet<String> = counts.keys().map(|i| (*i).to_owned()).collect();

        let mut by_popularity: Vec<(&str, usize)> = counts.into_iter().collect();
        by_popularity.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let popular_topk = by_popularity
            .into_iter()
            .take(k)
            .map(|(item, _)| item.to_owned())
            .collect();

        let ideal_dcg = (1..=k).map(position_discount::<T>).fold(T::zero(), |a, b| a + b);

        Ok(Self {
            threshold,
            k,
            test_users,
            reference,
            train_items,
            item_freq,
            train_users,
            likers,
            popular_topk,
            ideal_dcg,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn threshold(&self) -> T {
        self.threshold
    }

    /// Users of the test set, in order of first appearance.
    pub fn test_users(&self) -> &[String] {
        &self.test_users
    }

    pub fn train_items(&self) -> &HashSet<String> {
        &self.train_items
    }

    /// Items the user rated above the threshold in the test set.
    pub fn reference(&self, user: &str) -> Option<&HashSet<String>> {
        self.reference.get(user)
    }

    /// Share of training ratings that are on `item`; zero for unknown items.
    pub fn item_freq(&self, item: &str) -> T {
        self.item_freq.get(item).copied().unwrap_or_else(T::zero)
    }

    /// Training users who liked `item`.
    pub fn likers(&self, item: &str) -> Vec<&str> {
        self.likers
            .get(item)
            .map(|v| v.iter().map(|&u| self.train_users[u as usize].as_str()).collect())
            .unwrap_or_default()
    }

    /// The `k` most rated training items, most rated first, ties by id.
    pub fn popular_topk(&self) -> &[String] {
        &self.popular_topk
    }

    /// Cosine similarity between the binary liker vectors of two items;
    /// zero when either item has no likers.
    pub fn similarity(&self, a: &str, b: &str) -> T {
        match (self.likers.get(a), self.likers.get(b)) {
            (Some(x), Some(y)) if !x.is_empty() && !y.is_empty() => {
                let common = sorted_intersection_len(x, y);
                T::from_usize_lossy(common)
                    / (T::from_usize_lossy(x.len()) * T::from_usize_lossy(y.len())).sqrt()
            }
            _ => T::zero(),
        }
    }

    fn list<'a>(&self, recs: &'a Recommendations, user: &str) -> &'a [String] {
        recs.get(user)
            .map(|l| &l.items[..l.items.len().min(self.k)])
            .unwrap_or(&[])
    }

    fn hits(&self, list: &[String], user: &str) -> usize {
        match self.reference(user) {
            Some(r) => list.iter().filter(|i| r.contains(*i)).count(),
            None => 0,
        }
    }

    fn per_user<F: Fn(&[String], &str) -> T>(&self, recs: &Recommendations, term: F) -> T {
        stable_mean(
            self.test_users
                .iter()
                .map(|u| term(self.list(recs, u), u.as_str())),
        )
    }
}

/// `1 / log2(position + 1)` for a 1-based position.
fn position_discount<T: Scalar>(position: usize) -> T {
    T::one() / T::from_usize_lossy(position + 1).log2()
}

fn sorted_intersection_len(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

pub fn build_context<T: Scalar>(
    train: &RatingSet<T>,
    test: &RatingSet<T>,
    threshold: T,
    k: usize,
) -> Result<EvaluationContext<T>, MetricsError> {
    EvaluationContext::build(train, test, threshold, k)
}

/// Distinct recommended training items over all training items.
pub fn coverage<T: Scalar>(ctx: &EvaluationContext<T>, recs: &Recommendations) -> T {
    let mut covered: HashSet<&str> = HashSet::new();
    for user in &ctx.test_users {
        for item in ctx.list(recs, user) {
            if ctx.train_items.contains(item) {
                covered.insert(item);
            }
        }
    }
    T::from_usize_lossy(covered.len()) / T::from_usize_lossy(ctx.train_items.len())
}

pub fn precision<T: Scalar>(ctx: &EvaluationContext<T>, recs: &Recommendations) -> T {
    let k = T::from_usize_lossy(ctx.k);
    ctx.per_user(recs, |list, user| T::from_usize_lossy(ctx.hits(list, user)) / k)
}

pub fn recall<T: Scalar>(ctx: &EvaluationContext<T>, recs: &Recommendations) -> T {
    ctx.per_user(recs, |list, user| match ctx.reference(user) {
        Some(r) if !r.is_empty() => {
            T::from_usize_lossy(ctx.hits(list, user)) / T::from_usize_lossy(r.len())
        }
        _ => T::zero(),
    })
}

pub fn ndcg<T: Scalar>(ctx: &EvaluationContext<T>, recs: &Recommendations) -> T {
    ctx.per_user(recs, |list, user| {
        let Some(r) = ctx.reference(user) else {
            return T::zero();
        };
        let dcg = list
            .iter()
            .enumerate()
            .filter(|(_, item)| r.contains(*item))
            .map(|(i, _)| position_discount::<T>(i + 1))
            .fold(T::zero(), |a, b| a + b);
        dcg / ctx.ideal_dcg
    })
}

pub fn novelty<T: Scalar>(ctx: &EvaluationContext<T>, recs: &Recommendations) -> T {
    let k = T::from_usize_lossy(ctx.k);
    ctx.per_user(recs, |list, _| {
        let surprisal = list
            .iter()
            .map(|item| ctx.item_freq(item))
            .filter(|f| *f > T::zero())
            .map(|f| -f.log2())
            .fold(T::zero(), |a, b| a + b);
        surprisal / k
    })
}

/// `None` when `k < 2`: there are no pairs to compare.
pub fn diversity<T: Scalar>(ctx: &EvaluationContext<T>, recs: &Recommendations) -> Option<T> {
    if ctx.k < 2 {
        return None;
    }
    let pairs = T::from_usize_lossy(ctx.k * (ctx.k - 1));
    Some(ctx.per_user(recs, |list, _| {
        let mut sum = T::zero();
        for (i, a) in list.iter().enumerate() {
            for b in &list[i + 1..] {
                sum = sum + (T::one() - ctx.similarity(a, b));
            }
        }
        sum / pairs
    }))
}

pub fn serendipity<T: Scalar>(ctx: &EvaluationContext<T>, recs: &Recommendations) -> T {
    let k = T::from_usize_lossy(ctx.k);
    ctx.per_user(recs, |list, user| {
        let Some(r) = ctx.reference(user) else {
            return T::zero();
        };
        let unexpected_hits = list
            .iter()
            .filter(|item| r.contains(*item) && !ctx.popular_topk.contains(item))
            .count();
        T::from_usize_lossy(unexpected_hits) / k
    })
}

pub fn evaluate_all<T: Scalar>(ctx: &EvaluationContext<T>, recs: &Recommendations) -> MetricsReport<T> {
    MetricsReport {
        coverage: coverage(ctx, recs),
        precision: precision(ctx, recs),
        recall: recall(ctx, recs),
        ndcg: ndcg(ctx, recs),
        novelty: novelty(ctx, recs),
        diversity: diversity(ctx, recs),
        serendipity: serendipity(ctx, recs),
    }
}
