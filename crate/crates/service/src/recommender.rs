//! HTTP service wrapping a reference recommender.
//!
//! The service holds a single model slot. Training and list computation run
//! on the blocking pool, so status requests answer immediately. Every
//! create or delete bumps a generation counter; a background job whose
//! generation is stale discards its result.

use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use tokio::net::TcpListener;

use reclab_core::protocol::{
    read_training_set, CreateModelRequest, ModelStatus, RecommendRequest, RecommendationStatus,
    WireList,
};
use reclab_core::recommenders::RecommenderKind;
use reclab_core::{RatingSet, TrainedModel};

enum ModelSlot {
    Empty,
    Training,
    Ready(Arc<TrainedModel>),
    Failed(String),
}

enum ListSlot {
    Empty,
    Computing,
    Ready(Vec<WireList>),
    Failed(String),
}

struct Slots {
    generation: u64,
    model: ModelSlot,
    list_generation: u64,
    lists: ListSlot,
}

pub struct RecommenderService {
    kind: RecommenderKind,
    seed: u64,
    http: reqwest::Client,
    slots: Mutex<Slots>,
}

impl RecommenderService {
    pub fn new(kind: RecommenderKind, seed: u64) -> Arc<Self> {
        Arc::new(Self {
            kind,
            seed,
            http: reqwest::Client::new(),
            slots: Mutex::new(Slots {
                generation: 0,
                model: ModelSlot::Empty,
                list_generation: 0,
                lists: ListSlot::Empty,
            }),
        })
    }

    pub fn kind(&self) -> RecommenderKind {
        self.kind
    }

    pub fn router(self: &Arc<Self>) -> Router {
        Router::new()
            .route("/model", post(create_model).get(model_status).delete(delete_model))
            .route("/recommendation", post(request_lists).get(list_status))
            .with_state(self.clone())
    }

    fn model_status(&self) -> ModelStatus {
        match &self.slots.lock().unwrap().model {
            ModelSlot::Empty => ModelStatus::none(),
            ModelSlot::Training => ModelStatus::training(),
            ModelSlot::Ready(_) => ModelStatus::ready(),
            ModelSlot::Failed(d) => ModelStatus::failed(d.clone()),
        }
    }

    async fn train(self: Arc<Self>, generation: u64, req: CreateModelRequest) {
        let outcome = self.fetch_and_train(&req).await;
        let mut slots = self.slots.lock().unwrap();
        if slots.generation != generation {
            return;
        }
        slots.model = match outcome {
            Ok(model) => ModelSlot::Ready(Arc::new(model)),
            Err(detail) => {
                tracing::warn!(kind = %self.kind, %detail, "training failed");
                ModelSlot::Failed(detail)
            }
        };
    }

    async fn fetch_and_train(&self, req: &CreateModelRequest) -> Result<TrainedModel, String> {
        let resp = self
            .http
            .get(&req.training_set_uri)
            .send()
            .await
            .map_err(|e| format!("cannot fetch training set: {e}"))?;
        if !resp.status().is_success() {
            return Err(format!("training set fetch answered {}", resp.status()));
        }
        let body = resp
            .bytes()
            .await
            .map_err(|e| format!("cannot read training set: {e}"))?;
        let (kind, seed, threshold) = (self.kind, self.seed, req.rating_threshold);
        tokio::task::spawn_blocking(move || {
            let ratings: RatingSet = read_training_set(body.as_ref()).map_err(|e| e.to_string())?;
            TrainedModel::train(kind, &ratings, threshold, seed).map_err(|e| e.to_string())
        })
        .await
        .map_err(|e| format!("training task aborted: {e}"))?
    }
}

/// Binds a reference recommender and serves it until the task is dropped.
pub async fn serve_recommender(
    kind: RecommenderKind,
    listener: TcpListener,
    seed: u64,
) -> std::io::Result<()> {
    let service = RecommenderService::new(kind, seed);
    axum::serve(listener, service.router()).await
}

fn failure(status: StatusCode, detail: impl Into<String>) -> Response {
    (status, Json(ModelStatus::failed(detail))).into_response()
}

async fn create_model(
    State(svc): State<Arc<RecommenderService>>,
    body: Result<Json<CreateModelRequest>, JsonRejection>,
) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return failure(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let generation = {
        let mut slots = svc.slots.lock().unwrap();
        slots.generation += 1;
        slots.model = ModelSlot::Training;
        slots.list_generation += 1;
        slots.lists = ListSlot::Empty;
        slots.generation
    };
    tokio::spawn(svc.clone().train(generation, req));
    (StatusCode::ACCEPTED, Json(ModelStatus::training())).into_response()
}

async fn model_status(State(svc): State<Arc<RecommenderService>>) -> Json<ModelStatus> {
    Json(svc.model_status())
}

async fn delete_model(State(svc): State<Arc<RecommenderService>>) -> StatusCode {
    let mut slots = svc.slots.lock().unwrap();
    slots.generation += 1;
    slots.model = ModelSlot::Empty;
    slots.list_generation += 1;
    slots.lists = ListSlot::Empty;
    StatusCode::NO_CONTENT
}

async fn request_lists(
    State(svc): State<Arc<RecommenderService>>,
    body: Result<Json<RecommendRequest>, JsonRejection>,
) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => {
            return (
                StatusCode::BAD_REQUEST,
                Json(RecommendationStatus::failed(e.body_text())),
            )
                .into_response()
        }
    };
    if let Err(e) = req.validate() {
        return (
            StatusCode::BAD_REQUEST,
            Json(RecommendationStatus::failed(e.to_string())),
        )
            .into_response();
    }
    let (model, generation) = {
        let mut slots = svc.slots.lock().unwrap();
        let ModelSlot::Ready(model) = &slots.model else {
            return (
                StatusCode::CONFLICT,
                Json(RecommendationStatus::failed(
                    "no trained model: create one with POST /model and wait until it is ready",
                )),
            )
                .into_response();
        };
        let model = model.clone();
        slots.list_generation += 1;
        slots.lists = ListSlot::Computing;
        (model, slots.list_generation)
    };
    let svc2 = svc.clone();
    tokio::spawn(async move {
        let lists = tokio::task::spawn_blocking(move || {
            req.users
                .iter()
                .map(|u| {
                    let list = model.recommend(u, req.k);
                    WireList {
                        user: list.user,
                        items: list.items,
                    }
                })
                .collect::<Vec<_>>()
        })
        .await;
        let mut slots = svc2.slots.lock().unwrap();
        if slots.list_generation == generation {
            slots.lists = match lists {
                Ok(l) => ListSlot::Ready(l),
                Err(e) => ListSlot::Failed(format!("recommendation task aborted: {e}")),
            };
        }
    });
    (StatusCode::ACCEPTED, Json(RecommendationStatus::computing())).into_response()
}

async fn list_status(State(svc): State<Arc<RecommenderService>>) -> Response {
    let slots = svc.slots.lock().unwrap();
    let status = match &slots.lists {
        ListSlot::Empty => {
            return (
                StatusCode::NOT_FOUND,
                Json(RecommendationStatus::failed("no recommendation was requested")),
            )
                .into_response()
        }
        ListSlot::Computing => RecommendationStatus::computing(),
        ListSlot::Ready(lists) => RecommendationStatus::ready(lists.clone()),
        ListSlot::Failed(d) => RecommendationStatus::failed(d.clone()),
    };
    Json(status).into_response()
}
