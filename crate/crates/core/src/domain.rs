//! Value types shared by every part of the framework.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("user identifier is empty")]
    EmptyUser,
    #[error("item identifier is empty")]
    EmptyItem,
    #[error("rating value {0} is not finite")]
    NonFiniteValue(f64),
    #[error("timestamp {0} is negative")]
    NegativeTimestamp(i64),
    #[error("recommendation list for user {user} contains item {item} more than once")]
    DuplicateItem { user: String, item: String },
}

/// One feedback event: a user gave an item a numerical value, optionally at
/// a point in time.
#[derive(Debug, Clone, PartialEq)]
pub struct Rating<T> {
    user: String,
    item: String,
    value: T,
    timestamp: Option<i64>,
}

impl<T: Scalar> Rating<T> {
    pub fn new(
        user: impl Into<String>,
        item: impl Into<String>,
        value: T,
        timestamp: Option<i64>,
    ) -> Result<Self, DomainError> {
        let user = user.into();
        let item = item.into();
        if user.is_empty() {
            return Err(DomainError::EmptyUser);
        }
        if item.is_empty() {
            return Err(DomainError::EmptyItem);
        }
        if !value.is_finite() {
            return Err(DomainError::NonFiniteValue(value.to_f64_lossy()));
        }
        if let Some(ts) = timestamp {
            if ts < 0 {
                return Err(DomainError::NegativeTimestamp(ts));
            }
        }
        Ok(Self {
            user,
            item,
            value,
            timestamp,
        })
    }

    pub fn user(&self) -> &str {
        &self.user
    }

    pub fn item(&self) -> &str {
        &self.item
    }

    pub fn value(&self) -> T {
        self.value
    }

    pub fn timestamp(&self) -> Option<i64> {
        self.timestamp
    }

    /// Strictly above the threshold counts as a like.
    pub fn is_positive(&self, threshold: T) -> bool {
        self.value > threshold
    }
}

/// An ordered collection of ratings with at most one rating per
/// (user, item) pair. Order is the order of the source file.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingSet<T> {
    ratings: Vec<Rating<T>>,
}

impl<T> Default for RatingSet<T> {
    fn default() -> Self {
        Self {
            ratings: Vec::new(),
        }
    }
}

impl<T: Scalar> RatingSet<T> {
    /// Builds a set, keeping only the last occurrence of each (user, item)
    /// pair. Returns the set and the number of dropped duplicates.
    pub fn from_ratings<I: IntoIterator<Item = Rating<T>>>(ratings: I) -> (Self, usize) {
        let ratings: Vec<Rating<T>> = ratings.into_iter().collect();
        let mut last: HashMap<(&str, &str), usize> = HashMap::with_capacity(ratings.len());
        for (idx, r) in ratings.iter().enumerate() {
            last.insert((r.user.as_str(), r.item.as_str()), idx);
        }
        if last.len() == ratings.len() {
            return (Self { ratings }, 0);
        }
        let keep: HashSet<usize> = last.into_values().collect();
        let duplicates = ratings.len() - keep.len();
        let ratings = ratings
            .into_iter()
            .enumerate()
            .filter(|(idx, _)| keep.contains(idx))
            .map(|(_, r)| r)
            .collect();
        (Self { ratings }, duplicates)
    }

    /// Wraps ratings that are already known to be pair-unique, such as a
    /// subset of an existing set.
    pub(crate) fn from_unique(ratings: Vec<Rating<T>>) -> Self {
        debug_assert_eq!(
            ratings
                .iter()
                .map(|r| (r.user(), r.item()))
                .collect::<HashSet<_>>()
                .len(),
            ratings.len()
        );
        Self { ratings }
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Rating<T>> {
        self.ratings.iter()
    }

    pub fn as_slice(&self) -> &[Rating<T>] {
        &self.ratings
    }

    /// Distinct users in order of first appearance.
    pub fn users(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.ratings
            .iter()
            .map(Rating::user)
            .filter(|u| seen.insert(*u))
            .collect()
    }

    /// Distinct items in order of first appearance.
    pub fn items(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.ratings
            .iter()
            .map(Rating::item)
            .filter(|i| seen.insert(*i))
            .collect()
    }

    /// Items rated by each user, whatever the value.
    pub fn rated_by_user(&self) -> HashMap<&str, HashSet<&str>> {
        let mut map: HashMap<&str, HashSet<&str>> = HashMap::new();
        for r in &self.ratings {
            map.entry(r.user()).or_default().insert(r.item());
        }
        map
    }

    pub fn has_timestamps(&self) -> bool {
        self.ratings.iter().all(|r| r.timestamp.is_some())
    }
}

impl<'a, T> IntoIterator for &'a RatingSet<T> {
    type Item = &'a Rating<T>;
    type IntoIter = std::slice::Iter<'a, Rating<T>>;

    fn into_iter(self) -> Self::IntoIter {
        self.ratings.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMethod {
    Random,
    Timestamp,
}

impl fmt::Display for SplitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitMethod::Random => f.write_str("random"),
            SplitMethod::Timestamp => f.write_str("timestamp"),
        }
    }
}

impl std::str::FromStr for SplitMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(SplitMethod::Random),
            "timestamp" => Ok(SplitMethod::Timestamp),
            other => Err(format!(
                "unknown split method '{other}' (expected random or timestamp)"
            )),
        }
    }
}

/// Everything the experimenter chooses before an evaluation starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset_id: String,
    pub split_method: SplitMethod,
    pub test_fraction: f64,
    pub k: usize,
    pub rating_threshold: f64,
    pub recommender_ids: Vec<String>,
    /// Seeds the random split.
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    /// Framework defaults: random split, 20% test, lists of 10, threshold 3.
    pub fn with_defaults(dataset_id: impl Into<String>, recommender_ids: Vec<String>) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            split_method: SplitMethod::Random,
            test_fraction: 0.2,
            k: 10,
            rating_threshold: 3.0,
            recommender_ids,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    pub fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_owned(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Checks the config invariants. An empty result means the config is valid.
pub fn validate_config(config: &ExperimentConfig) -> Vec<Violation> {
    let mut violations = Vec::new();
    if config.dataset_id.trim().is_empty() {
        violations.push(Violation::new("dataset_id", "must not be empty"));
    }
    let f = config.test_fraction;
    if !(f.is_finite() && f > 0.0 && f < 1.0) {
        violations.push(Violation::new(
            "test_fraction",
            format!("must lie strictly between 0 and 1, got {f}"),
        ));
    }
    if config.k < 1 {
        violations.push(Violation::new("k", "must be at least 1"));
    }
    if !config.rating_threshold.is_finite() {
        violations.push(Violation::new("rating_threshold", "must be finite"));
    }
    if config.recommender_ids.is_empty() {
        violations.push(Violation::new(
            "recommender_ids",
            "at least one recommender must be selected",
        ));
    } else {
        let mut seen = HashSet::new();
        let dups: Vec<&str> = config
            .recommender_ids
            .iter()
            .filter(|id| !seen.insert(id.as_str()))
            .map(String::as_str)
            .collect();
        if !dups.is_empty() {
            violations.push(Violation::new(
                "recommender_ids",
                format!("duplicate recommender ids: {}", dups.join(", ")),
            ));
        }
        if config.recommender_ids.iter().any(|id| id.trim().is_empty()) {
            violations.push(Violation::new("recommender_ids", "ids must not be empty"));
        }
    }
    violations
}

/// Top-k suggestions for one user, best first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecommendationList {
    pub user: String,
    pub items: Vec<String>,
}

impl RecommendationList {
    pub fn new(user: impl Into<String>, items: Vec<String>) -> Result<Self, DomainError> {
        let user = user.into();
        let mut seen = HashSet::with_capacity(items.len());
        for item in &items {
            if !seen.insert(item.as_str()) {
                return Err(DomainError::DuplicateItem {
                    user,
                    item: item.clone(),
                });
            }
        }
        Ok(Self { user, items })
    }

    pub fn empty(user: impl Into<String>) -> Self {
        Self {
            user: user.into(),
            items: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Recommendation lists keyed by user.
pub type Recommendations = HashMap<String, RecommendationList>;

/// The seven metric values of one recommender in one experiment.
///
/// `diversity` is absent when lists have length one, where pairwise
/// dissimilarity is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport<T> {
    pub coverage: T,
    pub precision: T,
    pub recall: T,
    pub ndcg: T,
    pub novelty: T,
    pub diversity: Option<T>,
    pub serendipity: T,
}

impl<T: Scalar> MetricsReport<T> {
    /// Column names in reporting order.
    pub const COLUMNS: [&'static str; 7] = [
        "Coverage",
        "Precision",
        "Recall",
        "NDCG",
        "Novelty",
        "Diversity",
        "Serendipity",
    ];

    /// Values in [`Self::COLUMNS`] order.
    pub fn values(&self) -> [Option<T>; 7] {
        [
            Some(self.coverage),
            Some(self.precision),
            Some(self.recall),
            Some(self.ndcg),
            Some(self.novelty),
            self.diversity,
            Some(self.serendipity),
        ]
    }
}
