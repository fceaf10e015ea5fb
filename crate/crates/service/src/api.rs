//! Public evaluator HTTP API.
//!
//! | method | path                                | answer                          |
//! |--------|-------------------------------------|---------------------------------|
//! | POST   | `/experiments`                      | 201 `{"id"}`, 422 violations    |
//! | GET    | `/experiments?status&dataset&page`  | newest-first summary page       |
//! | GET    | `/experiments/{id}`                 | full record, 404 if unknown     |
//! | GET    | `/experiments/{id}/training-set`    | training ratings as CSV stream  |
//! | POST   | `/experiments/import`               | add an exported sealed record   |
//! | GET    | `/recommenders`                     | ids, base URIs and reachability |
//! | GET    | `/datasets`                         | registered datasets             |

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tokio::net::TcpListener;

use reclab_core::datasets::{DatasetFormat, DatasetRegistry};
use reclab_core::protocol::encode_training_chunk;
use reclab_core::ExperimentConfig;

use crate::config::{ConfigError, EvaluatorConfig, RecommenderRegistry};
use crate::runner::{Evaluator, SubmitError, TrainingSetError};
use crate::store::{ExperimentRecord, ExperimentStatus, ListFilter, Store, StoreError, PAGE_SIZE};

/// Ratings per chunk of the training-set stream.
pub const STREAM_CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("dataset registry: {0}")]
    Datasets(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("server stopped: {0}")]
    Serve(std::io::Error),
}

pub fn router(evaluator: Arc<Evaluator>) -> Router {
    Router::new()
        .route("/experiments", post(submit).get(list))
        .route("/experiments/import", post(import))
        .route("/experiments/{id}", get(fetch))
        .route("/experiments/{id}/training-set", get(training_set))
        .route("/recommenders", get(recommenders))
        .route("/datasets", get(datasets))
        .with_state(evaluator)
}

/// A ready-to-serve evaluator: the listener is bound and the execution
/// worker is running.
pub struct EvaluatorServer {
    pub evaluator: Arc<Evaluator>,
    pub listener: TcpListener,
}

impl EvaluatorServer {
    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub async fn serve(self) -> Result<(), ServeError> {
        axum::serve(self.listener, router(self.evaluator))
            .await
            .map_err(ServeError::Serve)
    }
}

/// Loads registries, opens the store and binds the configured address.
pub async fn bind_evaluator(config: &EvaluatorConfig) -> Result<EvaluatorServer, ServeError> {
    let datasets = DatasetRegistry::load(&config.datasets).map_err(|e| ServeError::Datasets(e.to_string()))?;
    let recommenders = RecommenderRegistry::load(&config.recommenders)?;
    let store = Arc::new(Store::open(&config.data_dir)?);
    let listener = TcpListener::bind(&config.bind)
        .await
        .map_err(|source| ServeError::Bind {
            addr: config.bind.clone(),
            source,
        })?;
    let public_url = match &config.public_url {
        Some(_) => config.public_url(),
        None => format!("http://{}", listener.local_addr().map_err(ServeError::Serve)?),
    };
    let evaluator = Evaluator::start(
        store,
        datasets,
        recommenders,
        config.protocol_settings(),
        public_url,
        config.parallel_recommenders,
    )?;
    Ok(EvaluatorServer {
        evaluator,
        listener,
    })
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn submit(
    State(ev): State<Arc<Evaluator>>,
    body: Result<Json<ExperimentConfig>, JsonRejection>,
) -> Response {
    let Json(config) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    match ev.submit(config) {
        Ok(id) => (StatusCode::CREATED, Json(json!({ "id": id }))).into_response(),
        Err(SubmitError::Store(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(json!({ "error": e.to_string(), "violations": e.violations() })),
        )
            .into_response(),
    }
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<String>,
    dataset: Option<String>,
    page: Option<usize>,
}

async fn list(
    State(ev): State<Arc<Evaluator>>,
    query: Result<Query<ListQuery>, axum::extract::rejection::QueryRejection>,
) -> Response {
    let Query(q) = match query {
        Ok(q) => q,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let status = match q.status.as_deref().map(str::parse::<ExperimentStatus>) {
        None => None,
        Some(Ok(s)) => Some(s),
        Some(Err(e)) => return error(StatusCode::BAD_REQUEST, e),
    };
    let filter = ListFilter {
        status,
        dataset: q.dataset,
    };
    Json(ev.store().list(&filter, q.page.unwrap_or(1), PAGE_SIZE)).into_response()
}

async fn fetch(State(ev): State<Arc<Evaluator>>, Path(id): Path<String>) -> Response {
    match ev.store().get(&id) {
        Ok(record) => Json(record).into_response(),
        Err(e) => store_error(e),
    }
}

fn store_error(e: StoreError) -> Response {
    let status = match &e {
        StoreError::NotFound(_) => StatusCode::NOT_FOUND,
        StoreError::Tampered { .. } | StoreError::NotSealed(..) => StatusCode::UNPROCESSABLE_ENTITY,
        StoreError::Conflict(_) | StoreError::Sealed(_) => StatusCode::CONFLICT,
        StoreError::Io { .. } | StoreError::Corrupt { .. } => StatusCode::INTERNAL_SERVER_ERROR,
    };
    error(status, e.to_string())
}

async fn import(
    State(ev): State<Arc<Evaluator>>,
    body: Result<Json<ExperimentRecord>, JsonRejection>,
) -> Response {
    let Json(record) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let id = record.id.clone();
    match ev.store().import(record) {
        Ok(created) => {
            let status = if created { StatusCode::CREATED } else { StatusCode::OK };
            (status, Json(json!({ "id": id, "imported": created }))).into_response()
        }
        Err(e) => store_error(e),
    }
}

/// Streams the training ratings chunk by chunk; only one chunk is
/// serialized at a time.
async fn training_set(State(ev): State<Arc<Evaluator>>, Path(id): Path<String>) -> Response {
    let split = match ev.training_set(&id).await {
        Ok(s) => s,
        Err(e @ TrainingSetError::NotFound(_)) => return error(StatusCode::NOT_FOUND, e.to_string()),
        Err(e @ TrainingSetError::NotSplit(_)) => return error(StatusCode::CONFLICT, e.to_string()),
        Err(e) => return error(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
    };
    let chunks = futures::stream::unfold(Some(0usize), move |offset| {
        let split = split.clone();
        async move {
            let start = offset?;
            let ratings = split.train.as_slice();
            let end = (start + STREAM_CHUNK).min(ratings.len());
            let bytes = Bytes::from(encode_training_chunk(&ratings[start..end], start == 0));
            let next = (end < ratings.len()).then_some(end);
            Some((Ok::<_, std::io::Error>(bytes), next))
        }
    });
    (
        [(header::CONTENT_TYPE, "text/csv; charset=utf-8")],
        Body::from_stream(chunks),
    )
        .into_response()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RecommenderEntry {
    pub id: String,
    pub uri: String,
    pub reachable: bool,
}

async fn recommenders(State(ev): State<Arc<Evaluator>>) -> Json<Vec<RecommenderEntry>> {
    let http = reqwest::Client::builder()
        .timeout(Duration::from_secs(2))
        .build()
        .expect("static client configuration");
    let probes = ev.recommenders().iter().map(|(id, uri)| {
        let http = http.clone();
        let (id, uri) = (id.to_owned(), uri.to_owned());
        async move {
            let reachable = http.get(format!("{uri}/model")).send().await.is_ok();
            RecommenderEntry { id, uri, reachable }
        }
    });
    Json(futures::future::join_all(probes).await)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DatasetEntry {
    pub id: String,
    pub format: DatasetFormat,
    pub has_timestamps: bool,
}

async fn datasets(State(ev): State<Arc<Evaluator>>) -> Json<Vec<DatasetEntry>> {
    Json(
        ev.datasets()
            .iter()
            .map(|d| DatasetEntry {
                id: d.id.clone(),
                format: d.format,
                has_timestamps: d.has_timestamps,
            })
            .collect(),
    )
}

