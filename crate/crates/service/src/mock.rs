//! Scriptable recommender for protocol tests.
//!
//! The mock speaks the recommender protocol, records every request it
//! receives together with the training bytes it downloaded, and can be told
//! to misbehave: stay in training, fail, drop a user, or seed list
//! violations.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use reclab_core::protocol::{
    read_training_set, CreateModelRequest, ModelStatus, RecommendRequest, RecommendationStatus,
    WireList,
};
use reclab_core::RatingSet;

/// How the mock behaves.
#[derive(Debug, Clone, Default)]
pub struct MockBehavior {
    /// `GET /model` answers training this many times before ready.
    pub ready_after_polls: usize,
    /// Never leave the training state.
    pub never_ready: bool,
    /// Report a failed model with this detail.
    pub fail_training: Option<String>,
    /// `GET /recommendation` answers computing this many times before ready.
    pub lists_after_polls: usize,
    /// Leave this user out of the response.
    pub omit_user: Option<String>,
    /// For the first requested user, add one train-rated item, one
    /// duplicate and up to two items beyond k.
    pub seed_violations: bool,
    /// Answer `DELETE /model` with 500.
    pub fail_delete: bool,
}

/// One captured request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub method: Method,
    pub path: &'static str,
    pub body: Vec<u8>,
}

impl Interaction {
    /// Short label such as `POST /model`.
    pub fn label(&self) -> String {
        format!("{} {}", self.method, self.path)
    }
}

#[derive(Default)]
struct MockState {
    log: Vec<Interaction>,
    training_sets: Vec<Bytes>,
    model: Option<RatingSet>,
    model_polls: usize,
    failed: bool,
    created: bool,
    list_request: Option<RecommendRequest>,
    list_polls: usize,
}

/// Handle to a running mock. Dropping it stops the server.
pub struct MockRecommender {
    addr: SocketAddr,
    state: Arc<Mutex<MockState>>,
    task: JoinHandle<()>,
}

impl Drop for MockRecommender {
    fn drop(&mut self) {
        self.task.abort();
    }
}

#[derive(Clone)]
struct Shared {
    behavior: Arc<MockBehavior>,
    state: Arc<Mutex<MockState>>,
    http: reqwest::Client,
}

impl MockRecommender {
    /// Binds an ephemeral local port and starts serving.
    pub async fn start(behavior: MockBehavior) -> std::io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let state = Arc::new(Mutex::new(MockState::default()));
        let shared = Shared {
            behavior: Arc::new(behavior),
            state: state.clone(),
            http: reqwest::Client::new(),
        };
        let app = Router::new()
            .route("/model", post(create).get(status).delete(delete))
            .route("/recommendation", post(recommend).get(lists))
            .with_state(shared);
        let task = tokio::spawn(async move {
            let _ = axum::serve(listener, app).await;
        });
        Ok(Self { addr, state, task })
    }

    pub fn base_uri(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn interactions(&self) -> Vec<Interaction> {
        self.state.lock().unwrap().log.clone()
    }

    /// `METHOD /path` labels in arrival order.
    pub fn labels(&self) -> Vec<String> {
        self.interactions().iter().map(Interaction::label).collect()
    }

    /// Raw bytes of every training set downloaded.
    pub fn training_sets(&self) -> Vec<Bytes> {
        self.state.lock().unwrap().training_sets.clone()
    }

    /// Bodies of every `POST /recommendation`, parsed.
    pub fn recommend_requests(&self) -> Vec<RecommendRequest> {
        self.interactions()
            .iter()
            .filter(|i| i.method == Method::POST && i.path == "/recommendation")
            .filter_map(|i| serde_json::from_slice(&i.body).ok())
            .collect()
    }
}

fn record(shared: &Shared, method: Method, path: &'static str, body: &[u8]) {
    shared.state.lock().unwrap().log.push(Interaction {
        method,
        path,
        body: body.to_vec(),
    });
}

async fn create(State(shared): State<Shared>, body: Bytes) -> Response {
    record(&shared, Method::POST, "/model", &body);
    let req: CreateModelRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            return (StatusCode::BAD_REQUEST, Json(ModelStatus::failed(e.to_string())))
                .into_response()
        }
    };
    let fetched = async {
        let resp = shared.http.get(&req.training_set_uri).send().await.ok()?;
        if !resp.status().is_success() {
            return None;
        }
        resp.bytes().await.ok()
    }
    .await;
    let mut st = shared.state.lock().unwrap();
    st.created = true;
    st.model_polls = 0;
    st.list_request = None;
    st.failed = shared.behavior.fail_training.is_some();
    match fetched {
        Some(bytes) => {
            st.model = read_training_set(bytes.as_ref()).ok();
            st.failed |= st.model.is_none();
            st.training_sets.push(bytes);
        }
        None => st.failed = true,
    }
    (StatusCode::ACCEPTED, Json(ModelStatus::training())).into_response()
}

async fn status(State(shared): State<Shared>) -> Json<ModelStatus> {
    record(&shared, Method::GET, "/model", &[]);
    let mut st = shared.state.lock().unwrap();
    if !st.created {
        return Json(ModelStatus::none());
    }
    if st.failed {
        let detail = shared
            .behavior
            .fail_training
            .clone()
            .unwrap_or_else(|| "training set unavailable".into());
        return Json(ModelStatus::failed(detail));
    }
    st.model_polls += 1;
    if shared.behavior.never_ready || st.model_polls <= shared.behavior.ready_after_polls {
        Json(ModelStatus::training())
    } else {
        Json(ModelStatus::ready())
    }
}

async fn delete(State(shared): State<Shared>) -> StatusCode {
    record(&shared, Method::DELETE, "/model", &[]);
    if shared.behavior.fail_delete {
        return StatusCode::INTERNAL_SERVER_ERROR;
    }
    let mut st = shared.state.lock().unwrap();
    st.created = false;
    st.model = None;
    st.list_request = None;
    StatusCode::NO_CONTENT
}

async fn recommend(State(shared): State<Shared>, body: Bytes) -> Response {
    record(&shared, Method::POST, "/recommendation", &body);
    let req: RecommendRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            return (
                StatusCode::BAD_REQUEST,
                Json(RecommendationStatus::failed(e.to_string())),
            )
                .into_response()
        }
    };
    let mut st = shared.state.lock().unwrap();
    if st.model.is_none() {
        return (
            StatusCode::CONFLICT,
            Json(RecommendationStatus::failed("no model")),
        )
            .into_response();
    }
    st.list_request = Some(req);
    st.list_polls = 0;
    (StatusCode::ACCEPTED, Json(RecommendationStatus::computing())).into_response()
}

async fn lists(State(shared): State<Shared>) -> Response {
    record(&shared, Method::GET, "/recommendation", &[]);
    let mut st = shared.state.lock().unwrap();
    let Some(req) = st.list_request.clone() else {
        return (
            StatusCode::NOT_FOUND,
            Json(RecommendationStatus::failed("no recommendation was requested")),
        )
            .into_response();
    };
    st.list_polls += 1;
    if st.list_polls <= shared.behavior.lists_after_polls {
        return Json(RecommendationStatus::computing()).into_response();
    }
    let model = st.model.as_ref().expect("lists require a model");
    Json(RecommendationStatus::ready(build_lists(
        model,
        &req,
        &shared.behavior,
    )))
    .into_response()
}

/// First k unseen items by id; deterministic so runs can be compared.
fn build_lists(model: &RatingSet, req: &RecommendRequest, behavior: &MockBehavior) -> Vec<WireList> {
    let catalog: BTreeSet<&str> = model.iter().map(|r| r.item()).collect();
    let rated = model.rated_by_user();
    let empty = HashSet::new();
    let mut out = Vec::with_capacity(req.users.len());
    for (idx, user) in req.users.iter().enumerate() {
        if behavior.omit_user.as_deref() == Some(user.as_str()) {
            continue;
        }
        let seen = rated.get(user.as_str()).unwrap_or(&empty);
        let mut items: Vec<String> = catalog
            .iter()
            .filter(|i| !seen.contains(*i))
            .take(req.k + 2)
            .map(|i| (*i).to_owned())
            .collect();
        if behavior.seed_violations && idx == 0 {
            if let Some(bad) = seen.iter().min() {
                items.insert(0, (*bad).to_owned());
            }
            if let Some(first) = items.get(1).cloned() {
                items.insert(2, first);
            }
        } else {
            items.truncate(req.k);
        }
        out.push(WireList {
            user: user.clone(),
            items,
        });
    }
    out
}

/// Convenience: run several behaviors at once, keyed by id.
pub async fn start_many(
    behaviors: impl IntoIterator<Item = (String, MockBehavior)>,
) -> std::io::Result<HashMap<String, MockRecommender>> {
    let mut out = HashMap::new();
    for (id, b) in behaviors {
        out.insert(id, MockRecommender::start(b).await?);
    }
    Ok(out)
}

/// Polls `cond` every few milliseconds until it holds or `limit` passes.
pub async fn wait_for(limit: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let deadline = tokio::time::Instant::now() + limit;
    while tokio::time::Instant::now() < deadline {
        if cond() {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
    cond()
}
