//! Append-only experiment store.
//!
//! Layout under the data directory:
//!
//! ```text
//! index.jsonl            one {"id": ...} line per experiment, creation order
//! experiments/<id>.json  the full record
//! ```
//!
//! A record may change while it is queued or running. Once it reaches
//! `done` or `failed` the store seals it with a SHA-256 digest over its
//! canonical JSON and refuses further writes; the digest is checked again
//! whenever the record is read back.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, SecondsFormat, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use reclab_core::protocol::ViolationCounts;
use reclab_core::{ExperimentConfig, MetricsReport, SplitMethod};

/// Default listing page size.
pub const PAGE_SIZE: usize = 50;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record {path} is not valid JSON: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("experiment {0} not found")]
    NotFound(String),
    #[error("experiment {0} is sealed and cannot change")]
    Sealed(String),
    #[error("experiment {id} fails digest verification (stored {stored}, computed {computed})")]
    Tampered {
        id: String,
        stored: String,
        computed: String,
    },
    #[error("experiment {0} already exists with different content")]
    Conflict(String),
    #[error("only sealed records can be imported; {0} is {1}")]
    NotSealed(String, ExperimentStatus),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentStatus {
    Queued,
    Splitting,
    Running,
    Done,
    Failed,
}

impl ExperimentStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, ExperimentStatus::Done | ExperimentStatus::Failed)
    }
}

impl std::fmt::Display for ExperimentStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExperimentStatus::Queued => "queued",
            ExperimentStatus::Splitting => "splitting",
            ExperimentStatus::Running => "running",
            ExperimentStatus::Done => "done",
            ExperimentStatus::Failed => "failed",
        })
    }
}

impl std::str::FromStr for ExperimentStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| format!("unknown experiment status '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecommenderStatus {
    Pending,
    Training,
    Recommending,
    Done,
    Failed,
}

impl RecommenderStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RecommenderStatus::Done | RecommenderStatus::Failed)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_seconds: f64,
    pub recommend_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommenderOutcome {
    pub status: RecommenderStatus,
    pub metrics: Option<MetricsReport>,
    pub violations: ViolationCounts,
    pub timing: Timing,
    pub detail: Option<String>,
    /// Teardown problems never fail an entry; they are noted here.
    pub teardown_warning: Option<String>,
}

impl RecommenderOutcome {
    pub fn pending() -> Self {
        Self {
            status: RecommenderStatus::Pending,
            metrics: None,
            violations: ViolationCounts::default(),
            timing: Timing::default(),
            detail: None,
            teardown_warning: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetTallies {
    pub malformed_lines: usize,
    pub duplicate_ratings: usize,
    pub test_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub id: String,
    pub config: ExperimentConfig,
    pub status: ExperimentStatus,
    pub realized_split_sizes: Option<SplitSizes>,
    pub dataset: Option<DatasetTallies>,
    pub per_recommender: BTreeMap<String, RecommenderOutcome>,
    pub detail: Option<String>,
    pub created_at: String,
    pub finished_at: Option<String>,
    pub digest: Option<String>,
}

impl ExperimentRecord {
    /// SHA-256 over the record's JSON with the digest field cleared.
    pub fn compute_digest(&self) -> String {
        let mut unsealed = self.clone();
        unsealed.digest = None;
        let bytes = serde_json::to_vec(&unsealed).expect("records always serialize");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn verify(&self) -> Result<(), StoreError> {
        if !self.status.is_terminal() {
            return Ok(());
        }
        let computed = self.compute_digest();
        match &self.digest {
            Some(stored) if *stored == computed => Ok(()),
            stored => Err(StoreError::Tampered {
                id: self.id.clone(),
                stored: stored.clone().unwrap_or_else(|| "none".into()),
                computed,
            }),
        }
    }

    pub fn summary(&self) -> ExperimentSummary {
        ExperimentSummary {
            id: self.id.clone(),
            dataset_id: self.config.dataset_id.clone(),
            split_method: self.config.split_method,
            k: self.config.k,
            status: self.status,
            recommender_ids: self.config.recommender_ids.clone(),
            created_at: self.created_at.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub id: String,
    pub dataset_id: String,
    pub split_method: SplitMethod,
    pub k: usize,
    pub status: ExperimentStatus,
    pub recommender_ids: Vec<String>,
    pub created_at: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListFilter {
    pub status: Option<ExperimentStatus>,
    pub dataset: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub experiments: Vec<ExperimentSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexLine {
    id: String,
}

pub fn now_rfc3339() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

struct Inner {
    records: BTreeMap<String, ExperimentRecord>,
}

pub struct Store {
    dir: PathBuf,
    inner: RwLock<Inner>,
    /// serializes appends to the index and id allocation
    writer: Mutex<i64>,
}

impl Store {
    /// Opens (or creates) a store, verifying every sealed record.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        let experiments = dir.join("experiments");
        fs::create_dir_all(&experiments).map_err(|source| StoreError::Io {
            path: experiments.clone(),
            source,
        })?;
        let index = dir.join("index.jsonl");
        let mut records = BTreeMap::new();
        if index.exists() {
            let file = File::open(&index).map_err(|source| StoreError::Io {
                path: index.clone(),
                source,
            })?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|source| StoreError::Io {
                    path: index.clone(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: IndexLine =
                    serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                        path: index.clone(),
                        message: e.to_string(),
                    })?;
                let record = read_record(&record_path(&dir, &entry.id))?;
                record.verify()?;
                records.insert(entry.id, record);
            }
        }
        let last_ms = records
            .keys()
            .filter_map(|id| id_millis(id))
            .max()
            .unwrap_or(0);
        Ok(Self {
            dir,
            inner: RwLock::new(Inner { records }),
            writer: Mutex::new(last_ms),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Persists a new queued record and returns it.
    pub fn create(&self, config: ExperimentConfig) -> Result<ExperimentRecord, StoreError> {
        let mut last_ms = self.writer.lock().unwrap();
        let now = Utc::now();
        let ms = now.timestamp_millis().max(*last_ms + 1);
        *last_ms = ms;
        let stamp = DateTime::<Utc>::from_timestamp_millis(ms).unwrap_or(now);
        let id = format!(
            "{}-{:08x}",
            stamp.format("%Y%m%dT%H%M%S%3fZ"),
            rand::thread_rng().gen::<u32>()
        );
        let record = ExperimentRecord {
            id: id.clone(),
            config,
            status: ExperimentStatus::Queued,
            realized_split_sizes: None,
            dataset: None,
            per_recommender: BTreeMap::new(),
            detail: None,
            created_at: now.to_rfc3339_opts(SecondsFormat::Millis, true),
            finished_at: None,
            digest: None,
        };
        self.persist_new(&record)?;
        Ok(record)
    }

    fn persist_new(&self, record: &ExperimentRecord) -> Result<(), StoreError> {
        write_record(&record_path(&self.dir, &record.id), record)?;
        let index = self.dir.join("index.jsonl");
        let io = |source| StoreError::Io {
            path: index.clone(),
            source,
        };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&index)
            .map_err(io)?;
        let line = serde_json::to_string(&IndexLine {
            id: record.id.clone(),
        })
        .expect("index lines serialize");
        writeln!(f, "{line}").map_err(io)?;
        f.sync_all().map_err(io)?;
        self.inner
            .write()
            .unwrap()
            .records
            .insert(record.id.clone(), record.clone());
        Ok(())
    }

    /// Applies `change` to an unsealed record and persists it. A record
    /// that becomes terminal is stamped and sealed.
    pub fn update<F: FnOnce(&mut ExperimentRecord)>(
        &self,
        id: &str,
        change: F,
    ) -> Result<ExperimentRecord, StoreError> {
        let mut inner = self.inner.write().unwrap();
        let current = inner
            .records
            .get(id)
            .ok_or_else(|| StoreError::NotFound(id.to_owned()))?;
        if current.status.is_terminal() {
            return Err(StoreError::Sealed(id.to_owned()));
        }
        let mut next = current.clone();
        change(&mut next);
        next.id = id.to_owned();
        next.digest = None;
        if next.status.is_terminal() {
            if next.finished_at.is_none() {
                next.finished_at = Some(now_rfc3339());
            }
            next.digest = Some(next.compute_digest());
        }
        write_record(&record_path(&self.dir, id), &next)?;
        inner.records.insert(id.to_owned(), next.clone());
        Ok(next)
    }

    /// Reads the record from disk and verifies its digest.
    pub fn get(&self, id: &str) -> Result<ExperimentRecord, StoreError> {
        if !self.inner.read().unwrap().records.contains_key(id) {
            return Err(StoreError::NotFound(id.to_owned()));
        }
        let record = read_record(&record_path(&self.dir, id))?;
        record.verify()?;
        Ok(record)
    }

    /// Newest-first summaries; `page` is 1-based.
    pub fn list(&self, filter: &ListFilter, page: usize, page_size: usize) -> Page {
        let inner = self.inner.read().unwrap();
        let page = page.max(1);
        let page_size = page_size.max(1);
        let matching: Vec<&ExperimentRecord> = inner
            .records
            .values()
            .rev()
            .filter(|r| filter.status.is_none_or(|s| s == r.status))
            .filter(|r| {
                filter
                    .dataset
                    .as_deref()
                    .is_none_or(|d| d == r.config.dataset_id)
            })
            .collect();
        let experiments = matching
            .iter()
            .skip((page - 1) * page_size)
            .take(page_size)
            .map(|r| r.summary())
            .collect();
        Page {
            page,
            page_size,
            total: matching.len(),
            experiments,
        }
    }

    /// Ids of every record, oldest first.
    pub fn ids(&self) -> Vec<String> {
        self.inner.read().unwrap().records.keys().cloned().collect()
    }

    /// Unsealed records, oldest first.
    pub fn unfinished(&self) -> Vec<ExperimentRecord> {
        self.inner
            .read()
            .unwrap()
            .records
            .values()
            .filter(|r| !r.status.is_terminal())
            .cloned()
            .collect()
    }

    /// Adds a sealed record exported from another deployment. Importing a
    /// record that is already present with identical content is a no-op.
    /// Returns whether the record was new.
    pub fn import(&self, record: ExperimentRecord) -> Result<bool, StoreError> {
        if !record.status.is_terminal() {
            return Err(StoreError::NotSealed(record.id.clone(), record.status));
        }
        record.verify()?;
        let _guard = self.writer.lock().unwrap();
        if let Some(existing) = self.inner.read().unwrap().records.get(&record.id) {
            return if *existing == record {
                Ok(false)
            } else {
                Err(StoreError::Conflict(record.id.clone()))
            };
        }
        self.persist_new(&record)?;
        Ok(true)
    }
}

fn record_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("experiments").join(format!("{id}.json"))
}

fn id_millis(id: &str) -> Option<i64> {
    let stamp = id.split('-').next()?;
    chrono::NaiveDateTime::parse_from_str(stamp, "%Y%m%dT%H%M%S%3fZ")
        .ok()
        .map(|t| t.and_utc().timestamp_millis())
}

fn read_record(path: &Path) -> Result<ExperimentRecord, StoreError> {
    let bytes = fs::read(path).map_err(|source| StoreError::Io {
        path: path.to_owned(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

/// Writes through a temporary file and a rename so readers never see a
/// half-written record.
fn write_record(path: &Path, record: &ExperimentRecord) -> Result<(), StoreError> {
    let io = |source| StoreError::Io {
        path: path.to_owned(),
        source,
    };
    let tmp = path.with_extension("json.tmp");
    let mut f = File::create(&tmp).map_err(io)?;
    serde_json::to_writer_pretty(&mut f, record).expect("records always serialize");
    f.write_all(b"\n").map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(dataset: &str) -> ExperimentConfig {
        ExperimentConfig::with_defaults(dataset, vec!["random".into()])
    }

    fn finish(store: &Store, id: &str) -> ExperimentRecord {
        store
            .update(id, |r| {
                r.status = ExperimentStatus::Done;
                r.per_recommender
                    .insert("random".into(), RecommenderOutcome::pending());
            })
            .unwrap()
    }

    #[test]
    fn ids_are_unique_and_time_ordered() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let ids: Vec<String> = (0..20)
            .map(|_| store.create(config("d")).unwrap().id)
            .collect();
        let mut sorted = ids.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted, ids);
    }

    #[test]
    fn identical_configs_make_distinct_records() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let a = store.create(config("d")).unwrap();
        let b = store.create(config("d")).unwrap();
        assert_ne!(a.id, b.id);
        assert_eq!(store.list(&ListFilter::default(), 1, 50).total, 2);
    }

    #[test]
    fn sealed_records_are_immutable_and_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let id = store.create(config("d")).unwrap().id;
        let done = finish(&store, &id);
        assert!(done.digest.is_some());
        assert!(done.finished_at.is_some());
        assert!(matches!(
            store.update(&id, |r| r.detail = Some("x".into())),
            Err(StoreError::Sealed(_))
        ));
        drop(store);
        let reopened = Store::open(dir.path()).unwrap();
        assert_eq!(reopened.get(&id).unwrap(), done);
    }

    #[test]
    fn digest_survives_awkward_floats() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let id = store.create(config("d")).unwrap().id;
        store
            .update(&id, |r| {
                r.status = ExperimentStatus::Done;
                let mut o = RecommenderOutcome::pending();
                o.timing.train_seconds = 0.1 + 0.2;
                o.timing.recommend_seconds = 1.0 / 3.0;
                o.metrics = Some(MetricsReport {
                    coverage: 2.0f64.sqrt(),
                    precision: 0.145_146_000_000_000_01,
                    recall: 1e-300,
                    ndcg: 0.703_918_089_034_134_8,
                    novelty: 12.345_678_901_234_567,
                    diversity: None,
                    serendipity: f64::MIN_POSITIVE,
                });
                r.per_recommender.insert("x".into(), o);
            })
            .unwrap();
        store.get(&id).unwrap();
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let id = store.create(config("d")).unwrap().id;
        finish(&store, &id);
        let path = record_path(dir.path(), &id);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("\"k\": 10", "\"k\": 5")).unwrap();
        assert!(matches!(store.get(&id), Err(StoreError::Tampered { .. })));
        assert!(matches!(Store::open(dir.path()), Err(StoreError::Tampered { .. })));
    }

    #[test]
    fn listing_filters_and_pages_newest_first() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let mut ids = Vec::new();
        for i in 0..7 {
            let id = store.create(config(if i % 2 == 0 { "a" } else { "b" })).unwrap().id;
            if i < 3 {
                finish(&store, &id);
            }
            ids.push(id);
        }
        let all = store.list(&ListFilter::default(), 1, 3);
        assert_eq!(all.total, 7);
        assert_eq!(all.experiments.len(), 3);
        assert_eq!(all.experiments[0].id, ids[6]);
        let last = store.list(&ListFilter::default(), 3, 3);
        assert_eq!(last.experiments.len(), 1);
        assert_eq!(last.experiments[0].id, ids[0]);

        let done = store.list(
            &ListFilter {
                status: Some(ExperimentStatus::Done),
                dataset: None,
            },
            1,
            50,
        );
        assert_eq!(done.total, 3);
        assert!(done.experiments.iter().all(|s| s.status == ExperimentStatus::Done));
        let a = store.list(
            &ListFilter {
                status: None,
                dataset: Some("a".into()),
            },
            1,
            50,
        );
        assert_eq!(a.total, 4);
        assert!(Store::open(tempfile::tempdir().unwrap().path())
            .unwrap()
            .list(&ListFilter::default(), 1, 50)
            .experiments
            .is_empty());
    }

    #[test]
    fn thousand_records_page_by_fifty() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        for _ in 0..1000 {
            store.create(config("d")).unwrap();
        }
        let first = store.list(&ListFilter::default(), 1, PAGE_SIZE);
        assert_eq!(first.total, 1000);
        assert_eq!(first.experiments.len(), 50);
        assert_eq!(store.list(&ListFilter::default(), 20, PAGE_SIZE).experiments.len(), 50);
        assert!(store.list(&ListFilter::default(), 21, PAGE_SIZE).experiments.is_empty());
        assert_eq!(Store::open(dir.path()).unwrap().ids().len(), 1000);
    }

    #[test]
    fn import_rules() {
        let src_dir = tempfile::tempdir().unwrap();
        let src = Store::open(src_dir.path()).unwrap();
        let open = src.create(config("d")).unwrap();
        let id = src.create(config("d")).unwrap().id;
        let sealed = finish(&src, &id);

        let dst_dir = tempfile::tempdir().unwrap();
        let dst = Store::open(dst_dir.path()).unwrap();
        assert!(matches!(dst.import(open), Err(StoreError::NotSealed(..))));
        assert!(dst.import(sealed.clone()).unwrap());
        assert!(!dst.import(sealed.clone()).unwrap());
        let mut forged = sealed.clone();
        forged.config.k = 3;
        assert!(matches!(dst.import(forged.clone()), Err(StoreError::Tampered { .. })));
        forged.digest = Some(forged.compute_digest());
        assert!(matches!(dst.import(forged), Err(StoreError::Conflict(_))));
        assert_eq!(dst.get(&id).unwrap(), sealed);
    }

    #[test]
    fn status_parsing() {
        assert_eq!("done".parse::<ExperimentStatus>().unwrap(), ExperimentStatus::Done);
        assert!("finished".parse::<ExperimentStatus>().is_err());
    }
}
