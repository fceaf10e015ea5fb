//! Experiment execution.
//!
//! Submitted experiments go through a single-consumer queue. Each run
//! splits the dataset once, then drives every selected recommender through
//! train, recommend and delete against that same split, and scores the
//! returned lists.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use thiserror::Error;
use tokio::sync::mpsc;

use reclab_core::datasets::{
    load_dataset, split_random, split_timestamp, DatasetDescriptor, DatasetRegistry,
};
use reclab_core::protocol::{CreateModelRequest, ModelState, RecommendRequest};
use reclab_core::{
    validate_config, EvaluationContext, ExperimentConfig, Recommendations, Split, SplitMethod,
    Violation,
};

use crate::client::{RecommendOutcome, RecommenderClient};
use crate::config::{ProtocolSettings, RecommenderRegistry};
use crate::store::{
    DatasetTallies, ExperimentRecord, ExperimentStatus, RecommenderOutcome, RecommenderStatus,
    SplitSizes, Store, StoreError,
};

#[derive(Debug, Error)]
pub enum SubmitError {
    #[error("invalid experiment config")]
    Invalid(Vec<Violation>),
    #[error("unknown dataset '{0}'")]
    UnknownDataset(String),
    #[error("unknown recommender(s): {}", .0.join(", "))]
    UnknownRecommenders(Vec<String>),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl SubmitError {
    /// Field-level violations describing the rejection.
    pub fn violations(&self) -> Vec<Violation> {
        match self {
            SubmitError::Invalid(v) => v.clone(),
            SubmitError::UnknownDataset(id) => {
                vec![Violation::new("dataset_id", format!("'{id}' is not registered"))]
            }
            SubmitError::UnknownRecommenders(ids) => ids
                .iter()
                .map(|id| Violation::new("recommender_ids", format!("'{id}' is not registered")))
                .collect(),
            SubmitError::Store(_) => Vec::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainingSetError {
    #[error("experiment {0} not found")]
    NotFound(String),
    #[error("experiment {0} has not been split yet")]
    NotSplit(String),
    #[error("{0}")]
    Unavailable(String),
}

/// Loads a dataset and splits it as the config asks. Returns the split and
/// the dataset's parse tallies.
pub fn materialize_split(
    descriptor: &DatasetDescriptor,
    config: &ExperimentConfig,
) -> Result<(Split, DatasetTallies), String> {
    let loaded = load_dataset::<f64>(descriptor).map_err(|e| e.to_string())?;
    if loaded.malformed > 0 {
        tracing::warn!(
            dataset = %descriptor.id,
            malformed = loaded.malformed,
            "skipped malformed dataset lines"
        );
    }
    let split = match config.split_method {
        SplitMethod::Random => split_random(&loaded.ratings, config.test_fraction, config.seed),
        SplitMethod::Timestamp => split_timestamp(&loaded.ratings, config.test_fraction),
    }
    .map_err(|e| e.to_string())?;
    let tallies = DatasetTallies {
        malformed_lines: loaded.malformed,
        duplicate_ratings: loaded.duplicates,
        test_users: split.test.users().len(),
    };
    Ok((split, tallies))
}

pub struct Evaluator {
    store: Arc<Store>,
    datasets: DatasetRegistry,
    recommenders: RecommenderRegistry,
    settings: ProtocolSettings,
    public_url: String,
    parallel: usize,
    /// splits of experiments currently running
    splits: Mutex<HashMap<String, Arc<Split>>>,
    queue: mpsc::UnboundedSender<String>,
}

impl Evaluator {
    /// Builds the evaluator, recovers unfinished records and starts the
    /// execution worker on the current runtime.
    ///
    /// Queued records are run again. Records caught mid-run by a restart
    /// are marked failed, since their recommenders' state is unknown.
    pub fn start(
        store: Arc<Store>,
        datasets: DatasetRegistry,
        recommenders: RecommenderRegistry,
        settings: ProtocolSettings,
        public_url: impl Into<String>,
        parallel: usize,
    ) -> Result<Arc<Self>, StoreError> {
        let (tx, mut rx) = mpsc::unbounded_channel::<String>();
        let evaluator = Arc::new(Self {
            store,
            datasets,
            recommenders,
            settings,
            public_url: public_url.into().trim_end_matches('/').to_owned(),
            parallel: parallel.max(1),
            splits: Mutex::new(HashMap::new()),
            queue: tx,
        });
        for record in evaluator.store.unfinished() {
            if record.status == ExperimentStatus::Queued {
                let _ = evaluator.queue.send(record.id);
            } else {
                evaluator.store.update(&record.id, |r| {
                    r.status = ExperimentStatus::Failed;
                    r.detail = Some("interrupted by an evaluator restart".into());
                    for outcome in r.per_recommender.values_mut() {
                        if !outcome.status.is_terminal() {
                            outcome.status = RecommenderStatus::Failed;
                            outcome.detail = Some("interrupted by an evaluator restart".into());
                        }
                    }
                })?;
            }
        }
        let weak = Arc::downgrade(&evaluator);
        tokio::spawn(async move {
            while let Some(id) = rx.recv().await {
                let Some(evaluator) = weak.upgrade() else { break };
                evaluator.run(&id).await;
            }
        });
        Ok(evaluator)
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn datasets(&self) -> &DatasetRegistry {
        &self.datasets
    }

    pub fn recommenders(&self) -> &RecommenderRegistry {
        &self.recommenders
    }

    pub fn settings(&self) -> &ProtocolSettings {
        &self.settings
    }

    /// Validates, persists a queued record and enqueues it.
    pub fn submit(&self, config: ExperimentConfig) -> Result<String, SubmitError> {
        let mut violations = validate_config(&config);
        if !violations.is_empty() {
            return Err(SubmitError::Invalid(violations));
        }
        let Some(descriptor) = self.datasets.get(&config.dataset_id) else {
            return Err(SubmitError::UnknownDataset(config.dataset_id));
        };
        let unknown: Vec<String> = config
            .recommender_ids
            .iter()
            .filter(|id| self.recommenders.get(id).is_none())
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(SubmitError::UnknownRecommenders(unknown));
        }
        if config.split_method == SplitMethod::Timestamp && !descriptor.has_timestamps {
            violations.push(Violation::new(
                "split_method",
                format!(
                    "dataset '{}' has no timestamps; use the random split",
                    descriptor.id
                ),
            ));
            return Err(SubmitError::Invalid(violations));
        }
        let record = self.store.create(config)?;
        let _ = self.queue.send(record.id.clone());
        Ok(record.id)
    }

    /// Polls the store until the record is terminal.
    pub async fn wait(&self, id: &str, limit: Duration) -> Option<ExperimentRecord> {
        let deadline = tokio::time::Instant::now() + limit;
        loop {
            let record = self.store.get(id).ok()?;
            if record.status.is_terminal() {
                return Some(record);
            }
            if tokio::time::Instant::now() >= deadline {
                return None;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    /// Training ratings of an experiment. Running experiments serve their
    /// cached split; finished ones are split again from their config,
    /// which reproduces the same ratings.
    pub async fn training_set(&self, id: &str) -> Result<Arc<Split>, TrainingSetError> {
        if let Some(split) = self.splits.lock().unwrap().get(id) {
            return Ok(split.clone());
        }
        let record = self
            .store
            .get(id)
            .map_err(|_| TrainingSetError::NotFound(id.to_owned()))?;
        if record.realized_split_sizes.is_none() {
            return Err(TrainingSetError::NotSplit(id.to_owned()));
        }
        let descriptor = self
            .datasets
            .get(&record.config.dataset_id)
            .cloned()
            .ok_or_else(|| {
                TrainingSetError::Unavailable(format!(
                    "dataset '{}' is no longer registered",
                    record.config.dataset_id
                ))
            })?;
        let config = record.config.clone();
        let (split, _) = tokio::task::spawn_blocking(move || materialize_split(&descriptor, &config))
            .await
            .map_err(|e| TrainingSetError::Unavailable(e.to_string()))?
            .map_err(TrainingSetError::Unavailable)?;
        Ok(Arc::new(split))
    }

    fn training_set_uri(&self, id: &str, recommender: &str) -> String {
        format!(
            "{}/experiments/{id}/training-set?recommender={recommender}",
            self.public_url
        )
    }

    async fn run(self: &Arc<Self>, id: &str) {
        if let Err(e) = self.execute(id).await {
            tracing::error!(experiment = %id, error = %e, "experiment bookkeeping failed");
        }
        self.splits.lock().unwrap().remove(id);
    }

    async fn execute(self: &Arc<Self>, id: &str) -> Result<(), StoreError> {
        let record = self.store.update(id, |r| r.status = ExperimentStatus::Splitting)?;
        let config = record.config.clone();
        tracing::info!(experiment = %id, dataset = %config.dataset_id, "splitting");

        let fail = |detail: String| {
            move |r: &mut ExperimentRecord| {
                r.status = ExperimentStatus::Failed;
                r.detail = Some(detail);
            }
        };
        let Some(descriptor) = self.datasets.get(&config.dataset_id).cloned() else {
            self.store
                .update(id, fail(format!("dataset '{}' is not registered", config.dataset_id)))?;
            return Ok(());
        };
        let cfg = config.clone();
        let prepared = tokio::task::spawn_blocking(move || {
            let (split, tallies) = materialize_split(&descriptor, &cfg)?;
            if split.test.is_empty() {
                return Err("the split produced an empty test set".to_owned());
            }
            let ctx = EvaluationContext::build(&split.train, &split.test, cfg.rating_threshold, cfg.k)
                .map_err(|e| e.to_string())?;
            Ok((split, tallies, ctx))
        })
        .await
        .unwrap_or_else(|e| Err(format!("split task aborted: {e}")));
        let (split, tallies, ctx) = match prepared {
            Ok(p) => p,
            Err(detail) => {
                tracing::warn!(experiment = %id, %detail, "dataset stage failed");
                self.store.update(id, fail(detail))?;
                return Ok(());
            }
        };

        let split = Arc::new(split);
        let ctx = Arc::new(ctx);
        self.splits
            .lock()
            .unwrap()
            .insert(id.to_owned(), split.clone());
        self.store.update(id, |r| {
            r.status = ExperimentStatus::Running;
            r.realized_split_sizes = Some(SplitSizes {
                train: split.train.len(),
                test: split.test.len(),
            });
            r.dataset = Some(tallies);
            for rec in &config.recommender_ids {
                r.per_recommender
                    .insert(rec.clone(), RecommenderOutcome::pending());
            }
        })?;

        let users = ctx.test_users().to_vec();
        let outcomes: Vec<(String, RecommenderOutcome)> = stream::iter(config.recommender_ids.clone())
            .map(|rec| {
                let this = self.clone();
                let split = split.clone();
                let ctx = ctx.clone();
                let users = users.clone();
                let config = config.clone();
                let id = id.to_owned();
                async move {
                    let outcome = this.drive(&id, &rec, &config, &split, ctx, users).await;
                    (rec, outcome)
                }
            })
            .buffer_unordered(self.parallel)
            .collect()
            .await;

        self.store.update(id, |r| {
            for (rec, outcome) in outcomes {
                r.per_recommender.insert(rec, outcome);
            }
            r.status = ExperimentStatus::Done;
        })?;
        tracing::info!(experiment = %id, "done");
        Ok(())
    }

    fn set_phase(&self, id: &str, rec: &str, status: RecommenderStatus) {
        let result = self.store.update(id, |r| {
            if let Some(o) = r.per_recommender.get_mut(rec) {
                o.status = status;
            }
        });
        if let Err(e) = result {
            tracing::warn!(experiment = %id, recommender = %rec, error = %e, "cannot record phase");
        }
    }

    /// One full lifecycle against one recommender. Never fails the
    /// experiment: problems end up in the returned outcome.
    async fn drive(
        &self,
        id: &str,
        rec: &str,
        config: &ExperimentConfig,
        split: &Split,
        ctx: Arc<EvaluationContext>,
        users: Vec<String>,
    ) -> RecommenderOutcome {
        let mut outcome = RecommenderOutcome::pending();
        let Some(uri) = self.recommenders.get(rec) else {
            outcome.status = RecommenderStatus::Failed;
            outcome.detail = Some(format!("recommender '{rec}' is not registered"));
            return outcome;
        };
        let client = RecommenderClient::new(uri, self.settings);
        let mut session = client.session();

        self.set_phase(id, rec, RecommenderStatus::Training);
        tracing::info!(experiment = %id, recommender = %rec, "training");
        let started = Instant::now();
        let create = CreateModelRequest {
            training_set_uri: self.training_set_uri(id, rec),
            rating_threshold: config.rating_threshold,
        };
        let trained = session.train(&create).await;
        outcome.timing.train_seconds = started.elapsed().as_secs_f64();

        match trained {
            Ok(status) if status.status == ModelState::Ready => {
                self.set_phase(id, rec, RecommenderStatus::Recommending);
                tracing::info!(experiment = %id, recommender = %rec, "recommending");
                let started = Instant::now();
                let req = RecommendRequest { users, k: config.k };
                let train_rated = split.train.rated_by_user();
                let result = session.recommend(&req, &train_rated).await;
                outcome.timing.recommend_seconds = started.elapsed().as_secs_f64();
                match result {
                    Ok(RecommendOutcome::Ready { lists, violations }) => {
                        if violations.total() > 0 {
                            tracing::warn!(
                                experiment = %id,
                                recommender = %rec,
                                ?violations,
                                "sanitized invalid recommendations"
                            );
                        }
                        outcome.violations = violations;
                        let recs: Recommendations =
                            lists.into_iter().map(|l| (l.user.clone(), l)).collect();
                        let scored = tokio::task::spawn_blocking(move || {
                            reclab_core::metrics::evaluate_all(&ctx, &recs)
                        })
                        .await;
                        match scored {
                            Ok(report) => {
                                outcome.metrics = Some(report);
                                outcome.status = RecommenderStatus::Done;
                            }
                            Err(e) => {
                                outcome.status = RecommenderStatus::Failed;
                                outcome.detail = Some(format!("metric computation aborted: {e}"));
                            }
                        }
                    }
                    Ok(RecommendOutcome::Failed(detail)) => {
                        outcome.status = RecommenderStatus::Failed;
                        outcome.detail = Some(detail);
                    }
                    Err(e) => {
                        outcome.status = RecommenderStatus::Failed;
                        outcome.detail = Some(e.to_string());
                    }
                }
            }
            Ok(status) => {
                outcome.status = RecommenderStatus::Failed;
                outcome.detail = Some(
                    status
                        .detail
                        .unwrap_or_else(|| format!("model ended in state {:?}", status.status)),
                );
            }
            Err(e) => {
                outcome.status = RecommenderStatus::Failed;
                outcome.detail = Some(e.to_string());
            }
        }
        if let Some(detail) = &outcome.detail {
            tracing::warn!(experiment = %id, recommender = %rec, %detail, "recommender failed");
        }

        if let Err(e) = session.delete().await {
            tracing::warn!(experiment = %id, recommender = %rec, error = %e, "model teardown failed");
            outcome.teardown_warning = Some(e.to_string());
        }
        outcome
    }
}
