//! Evaluator/recommender wire contract.
//!
//! A recommender exposes five HTTP resources, all exchanging UTF-8 JSON:
//!
//! | request | body | response |
//! |---|---|---|
//! | `POST /model` | [`CreateModelRequest`] | 202, `{"status":"training"}` |
//! | `GET /model` | | 200, [`ModelStatus`] |
//! | `DELETE /model` | | 204, empty |
//! | `POST /recommendation` | [`RecommendRequest`] | 202, `{"status":"computing"}` |
//! | `GET /recommendation` | | 200, [`RecommendationStatus`] |
//!
//! The training set itself is fetched from the URI in the create request
//! and is plain CSV with the header `user,item,value,timestamp`; the
//! timestamp field is empty when absent.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Rating, RatingSet, RecommendationList};
use crate::num::Scalar;

/// Header line of the training-set stream.
pub const TRAINING_SET_HEADER: [&str; 4] = ["user", "item", "value", "timestamp"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateModelRequest {
    pub training_set_uri: String,
    pub rating_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelState {
    None,
    Training,
    Ready,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStatus {
    pub status: ModelState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl ModelStatus {
    pub fn none() -> Self {
        Self {
            status: ModelState::None,
            detail: None,
        }
    }

    pub fn training() -> Self {
        Self {
            status: ModelState::Training,
            detail: None,
        }
    }

    pub fn ready() -> Self {
        Self {
            status: ModelState::Ready,
            detail: None,
        }
    }

    pub fn failed(detail: impl Into<String>) -> Self {
        Self {
            status: ModelState::Failed,
            detail: Some(detail.into()),
        }
    }

    /// A failed status must say why.
    pub fn is_well_formed(&self) -> bool {
        self.status != ModelState::Failed || self.detail.as_deref().is_some_and(|d| !d.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendRequest {
    pub users: Vec<String>,
    pub k: usize,
}

impl RecommendRequest {
    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.users.is_empty() {
            return Err(SchemaError::new("users must not be empty"));
        }
        if self.k == 0 {
            return Err(SchemaError::new("k must be at least 1"));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.users.iter().find(|u| !seen.insert(u.as_str())) {
            return Err(SchemaError::new(format!("user {dup} listed twice")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecommendationState {
    Computing,
    Ready,
    Failed,
}

/// One list as it travels on the wire; may violate list invariants until
/// sanitized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireList {
    pub user: String,
    pub items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecommendationStatus {
    pub status: RecommendationState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recommendations: Option<Vec<WireList>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl RecommendationStatus {
    pub fn computing() -> Self {
        Self {
            status: RecommendationState::Computing,
            recommendations: None,
            detail: None,
        }
    }

    pub fn ready(lists: Vec<WireList>) -> Self {
        Self {
            status: RecommendationState::Ready,
            recommendations: Some(lists),
            detail: None,
        }
    }

    pub fn failed(detail: impl Into<String>) -> Self {
        Self {
            status: RecommendationState::Failed,
            recommendations: None,
            detail: Some(detail.into()),
        }
    }

    /// Lists are present exactly when the status is ready.
    pub fn validate(&self) -> Result<(), SchemaError> {
        match (self.status, &self.recommendations) {
            (RecommendationState::Ready, None) => {
                Err(SchemaError::new("ready status without recommendations"))
            }
            (RecommendationState::Computing | RecommendationState::Failed, Some(_)) => Err(
                SchemaError::new("recommendations present before the ready status"),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("schema violation: {0}")]
pub struct SchemaError(pub String);

impl SchemaError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

/// Counts of list-invariant violations removed by [`sanitize`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationCounts {
    /// Items the user had already rated in the training set.
    pub train_rated: usize,
    /// Repeated items within one list.
    pub duplicates: usize,
    /// Items beyond position k.
    pub overlong: usize,
    /// Lists for users that were not requested.
    pub unexpected_users: usize,
}

impl ViolationCounts {
    pub fn total(&self) -> usize {
        self.train_rated + self.duplicates + self.overlong + self.unexpected_users
    }

    pub fn merge(&mut self, other: ViolationCounts) {
        self.train_rated += other.train_rated;
        self.duplicates += other.duplicates;
        self.overlong += other.overlong;
        self.unexpected_users += other.unexpected_users;
    }
}

/// Outcome of sanitizing a set of lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sanitized {
    /// One list per requested user that had a list, in request order.
    pub lists: Vec<RecommendationList>,
    /// Requested users the recommender returned no list for.
    pub missing_users: Vec<String>,
    pub violations: ViolationCounts,
}

/// Enforces list invariants: drops items the user rated in training and
/// repeated items, then cuts each list to `k`. Offending items are removed
/// rather than failing the whole response.
pub fn sanitize<S: AsRef<str>>(
    lists: Vec<WireList>,
    requested: &[S],
    k: usize,
    train_rated: &HashMap<&str, HashSet<&str>>,
) -> Sanitized {
    let requested_set: HashSet<&str> = requested.iter().map(AsRef::as_ref).collect();
    let mut violations = ViolationCounts::default();
    let mut by_user: HashMap<String, RecommendationList> = HashMap::new();
    for list in lists {
        if !requested_set.contains(list.user.as_str()) || by_user.contains_key(&list.user) {
            violations.unexpected_users += 1;
            continue;
        }
        let rated = train_rated.get(list.user.as_str());
        let mut kept = Vec::with_capacity(k.min(list.items.len()));
        let mut in_list = HashSet::new();
        for item in list.items {
            if rated.is_some_and(|r| r.contains(item.as_str())) {
                violations.train_rated += 1;
            } else if in_list.contains(&item) {
                violations.duplicates += 1;
            } else if kept.len() >= k {
                violations.overlong += 1;
            } else {
                in_list.insert(item.clone());
                kept.push(item);
            }
        }
        by_user.insert(
            list.user.clone(),
            RecommendationList {
                user: list.user,
                items: kept,
            },
        );
    }
    let mut out = Vec::with_capacity(requested.len());
    let mut missing_users = Vec::new();
    for user in requested {
        match by_user.remove(user.as_ref()) {
            Some(list) => out.push(list),
            None => missing_users.push(user.as_ref().to_owned()),
        }
    }
    Sanitized {
        lists: out,
        missing_users,
        violations,
    }
}

#[derive(Debug, Error)]
pub enum WireFormatError {
    #[error("training set stream: {0}")]
    Csv(#[from] csv::Error),
    #[error("training set stream: unexpected header {0:?}")]
    Header(Vec<String>),
    #[error("training set stream line {line}: {message}")]
    Record { line: u64, message: String },
}

/// Writes ratings as the training-set CSV stream, header included.
pub fn write_training_set<'a, T, W, I>(ratings: I, out: W) -> Result<(), csv::Error>
where
    T: Scalar + 'a,
    W: Write,
    I: IntoIterator<Item = &'a Rating<T>>,
{
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(TRAINING_SET_HEADER)?;
    for r in ratings {
        write_rating(&mut wtr, r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Serializes a contiguous range of ratings without a header, for chunked
/// streaming.
pub fn encode_training_chunk<T: Scalar>(ratings: &[Rating<T>], with_header: bool) -> Vec<u8> {
    let mut wtr = csv::Writer::from_writer(Vec::with_capacity(ratings.len() * 24 + 32));
    if with_header {
        wtr.write_record(TRAINING_SET_HEADER).expect("write to Vec");
    }
    for r in ratings {
        write_rating(&mut wtr, r).expect("write to Vec");
    }
    wtr.into_inner().expect("flush to Vec")
}

fn write_rating<T: Scalar, W: Write>(wtr: &mut csv::Writer<W>, r: &Rating<T>) -> Result<(), csv::Error> {
    // `{}` on f64 is the shortest representation that parses back exactly
    let value = format!("{}", r.value().to_f64_lossy());
    let ts = r.timestamp().map(|t| t.to_string()).unwrap_or_default();
    wtr.write_record([r.user(), r.item(), value.as_str(), ts.as_str()])
}

/// Parses a training-set CSV stream.
pub fn read_training_set<T: Scalar, R: Read>(input: R) -> Result<RatingSet<T>, WireFormatError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != TRAINING_SET_HEADER {
        return Err(WireFormatError::Header(header));
    }
    let mut ratings = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let bad = |message: String| WireFormatError::Record { line, message };
        let value: f64 = record[2]
            .parse()
            .map_err(|e| bad(format!("bad value {:?}: {e}", &record[2])))?;
        let timestamp = match &record[3] {
            "" => None,
            ts => Some(ts.parse::<i64>().map_err(|e| bad(format!("bad timestamp {ts:?}: {e}")))?),
        };
        let value = T::from_f64(value).ok_or_else(|| bad("value out of range".into()))?;
        ratings.push(Rating::new(&record[0], &record[1], value, timestamp).map_err(|e| bad(e.to_string()))?);
    }
    Ok(RatingSet::from_ratings(ratings).0)
}
