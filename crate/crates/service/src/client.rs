//! Evaluator side of the recommender protocol.
//!
//! [`RecommenderClient`] wraps the five HTTP resources; [`Session`] drives
//! one model lifecycle and refuses to ask for recommendations before the
//! model reported ready.

use std::collections::{HashMap, HashSet};
use std::time::Duration;

use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use tokio::time::Instant;

use reclab_core::protocol::{
    sanitize, CreateModelRequest, ModelState, ModelStatus, RecommendRequest,
    RecommendationState, RecommendationStatus, SchemaError, ViolationCounts,
};
use reclab_core::RecommendationList;

use crate::config::ProtocolSettings;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("network failure talking to {url}: {message}")]
    Network { url: String, message: String },
    #[error("{method} {url} answered {status}: {body}")]
    Status {
        method: Method,
        url: String,
        status: StatusCode,
        body: String,
    },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("lifecycle violation: {0}")]
    Lifecycle(&'static str),
}

#[derive(Debug, Clone)]
pub struct RecommenderClient {
    base: String,
    http: reqwest::Client,
    settings: ProtocolSettings,
}

impl RecommenderClient {
    pub fn new(base_uri: &str, settings: ProtocolSettings) -> Self {
        let http = reqwest::Client::builder()
            .timeout(settings.request_timeout)
            .build()
            .expect("HTTP client configuration is static");
        Self {
            base: base_uri.trim_end_matches('/').to_owned(),
            http,
            settings,
        }
    }

    pub fn base_uri(&self) -> &str {
        &self.base
    }

    pub fn settings(&self) -> &ProtocolSettings {
        &self.settings
    }

    pub fn session(&self) -> Session<'_> {
        Session {
            client: self,
            state: SessionState::Idle,
        }
    }

    /// Sends one request, retrying network failures with exponential
    /// backoff. Returns the status and body text.
    async fn exchange<B: Serialize>(
        &self,
        method: Method,
        path: &str,
        body: Option<&B>,
    ) -> Result<(StatusCode, String), ClientError> {
        let url = format!("{}{}", self.base, path);
        let mut attempt = 0u32;
        loop {
            let mut req = self.http.request(method.clone(), &url);
            if let Some(b) = body {
                req = req.json(b);
            }
            let outcome = match req.send().await {
                Ok(resp) => {
                    let status = resp.status();
                    match resp.text().await {
                        Ok(text) => Ok((status, text)),
                        Err(e) => Err(e),
                    }
                }
                Err(e) => Err(e),
            };
            match outcome {
                Ok(ok) => return Ok(ok),
                Err(e) if attempt < self.settings.retries => {
                    tracing::debug!(%url, attempt, error = %e, "retrying after network failure");
                    tokio::time::sleep(self.settings.backoff * 2u32.saturating_pow(attempt)).await;
                    attempt += 1;
                }
                Err(e) => {
                    return Err(ClientError::Network {
                        url,
                        message: e.to_string(),
                    })
                }
            }
        }
    }

    async fn call<B: Serialize, R: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        body: Option<&B>,
        expected: &[StatusCode],
    ) -> Result<R, ClientError> {
        let (status, text) = self.exchange(method.clone(), path, body).await?;
        if !expected.contains(&status) {
            return Err(ClientError::Status {
                method,
                url: format!("{}{}", self.base, path),
                status,
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| {
            SchemaError::new(format!("{path} answered an unexpected body ({e}): {text}")).into()
        })
    }

    /// `POST /model`.
    pub async fn create_model(&self, req: &CreateModelRequest) -> Result<ModelStatus, ClientError> {
        let uri = reqwest::Url::parse(&req.training_set_uri)
            .map_err(|e| SchemaError::new(format!("training set uri is not absolute: {e}")))?;
        if !matches!(uri.scheme(), "http" | "https") {
            return Err(SchemaError::new("training set uri must be http or https").into());
        }
        if !req.rating_threshold.is_finite() {
            return Err(SchemaError::new("rating threshold must be finite").into());
        }
        let status: ModelStatus = self
            .call(Method::POST, "/model", Some(req), &[StatusCode::ACCEPTED])
            .await?;
        check_model_status(&status)?;
        Ok(status)
    }

    /// `GET /model`.
    pub async fn model_status(&self) -> Result<ModelStatus, ClientError> {
        let status: ModelStatus = self
            .call::<(), _>(Method::GET, "/model", None, &[StatusCode::OK])
            .await?;
        check_model_status(&status)?;
        Ok(status)
    }

    /// `DELETE /model`; idempotent.
    pub async fn delete_model(&self) -> Result<(), ClientError> {
        let (status, body) = self.exchange::<()>(Method::DELETE, "/model", None).await?;
        if status == StatusCode::NO_CONTENT || status == StatusCode::OK {
            Ok(())
        } else {
            Err(ClientError::Status {
                method: Method::DELETE,
                url: format!("{}/model", self.base),
                status,
                body,
            })
        }
    }

    /// `POST /recommendation`.
    pub async fn request_recommendations(
        &self,
        req: &RecommendRequest,
    ) -> Result<RecommendationStatus, ClientError> {
        req.validate()?;
        let status: RecommendationStatus = self
            .call(Method::POST, "/recommendation", Some(req), &[StatusCode::ACCEPTED])
            .await?;
        status.validate()?;
        Ok(status)
    }

    /// `GET /recommendation`.
    pub async fn recommendation_status(&self) -> Result<RecommendationStatus, ClientError> {
        let status: RecommendationStatus = self
            .call::<(), _>(Method::GET, "/recommendation", None, &[StatusCode::OK])
            .await?;
        status.validate()?;
        Ok(status)
    }

    /// Creates a model and polls until it is ready, failed or the training
    /// timeout expires. Errors are folded into a failed status.
    pub async fn train(&self, req: &CreateModelRequest) -> ModelStatus {
        let deadline = Instant::now() + self.settings.train_timeout;
        let first = match self.create_model(req).await {
            Ok(s) => s,
            Err(e) => return ModelStatus::failed(e.to_string()),
        };
        if first.status == ModelState::Failed {
            return first;
        }
        loop {
            match self.model_status().await {
                Ok(s) => match s.status {
                    ModelState::Ready | ModelState::Failed => return s,
                    ModelState::None => {
                        return ModelStatus::failed("recommender reports no model after create")
                    }
                    ModelState::Training => {}
                },
                Err(e) => return ModelStatus::failed(e.to_string()),
            }
            if !sleep_until_next_poll(deadline, self.settings.poll_interval).await {
                return ModelStatus::failed("training timeout");
            }
        }
    }

    /// Requests lists and polls until they are ready, failed or the
    /// recommendation timeout expires. Ready lists are sanitized against
    /// the request and the users' training ratings.
    pub async fn recommend(
        &self,
        req: &RecommendRequest,
        train_rated: &HashMap<&str, HashSet<&str>>,
    ) -> RecommendOutcome {
        let deadline = Instant::now() + self.settings.recommend_timeout;
        let mut status = match self.request_recommendations(req).await {
            Ok(s) => s,
            Err(e) => return RecommendOutcome::Failed(e.to_string()),
        };
        loop {
            match status.status {
                RecommendationState::Failed => {
                    return RecommendOutcome::Failed(
                        status
                            .detail
                            .unwrap_or_else(|| "recommender reported failure".into()),
                    )
                }
                RecommendationState::Ready => {
                    let lists = status.recommendations.unwrap_or_default();
                    let sanitized = sanitize(lists, &req.users, req.k, train_rated);
                    if !sanitized.missing_users.is_empty() {
                        let shown: Vec<&str> = sanitized
                            .missing_users
                            .iter()
                            .take(5)
                            .map(String::as_str)
                            .collect();
                        return RecommendOutcome::Failed(format!(
                            "no recommendation list for {} requested user(s): {}",
                            sanitized.missing_users.len(),
                            shown.join(", ")
                        ));
                    }
                    return RecommendOutcome::Ready {
                        lists: sanitized.lists,
                        violations: sanitized.violations,
                    };
                }
                RecommendationState::Computing => {}
            }
            if !sleep_until_next_poll(deadline, self.settings.poll_interval).await {
                return RecommendOutcome::Failed("recommendation timeout".into());
            }
            status = match self.recommendation_status().await {
                Ok(s) => s,
                Err(e) => return RecommendOutcome::Failed(e.to_string()),
            };
        }
    }
}

/// Sleeps one poll interval unless that would pass the deadline.
async fn sleep_until_next_poll(deadline: Instant, interval: Duration) -> bool {
    let next = Instant::now() + interval;
    if next > deadline {
        return false;
    }
    tokio::time::sleep_until(next).await;
    true
}

fn check_model_status(s: &ModelStatus) -> Result<(), SchemaError> {
    if s.is_well_formed() {
        Ok(())
    } else {
        Err(SchemaError::new("failed model status without detail"))
    }
}

/// Terminal result of the recommendation phase.
#[derive(Debug, Clone, PartialEq)]
pub enum RecommendOutcome {
    Ready {
        lists: Vec<RecommendationList>,
        violations: ViolationCounts,
    },
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Idle,
    Ready,
    Recommended,
    Failed,
    Deleted,
}

/// One create → poll → recommend → poll → delete cycle against a
/// recommender.
#[derive(Debug)]
pub struct Session<'a> {
    client: &'a RecommenderClient,
    state: SessionState,
}

impl Session<'_> {
    pub fn state(&self) -> SessionState {
        self.state
    }

    pub async fn train(&mut self, req: &CreateModelRequest) -> Result<ModelStatus, ClientError> {
        if self.state != SessionState::Idle {
            return Err(ClientError::Lifecycle("a session trains exactly once"));
        }
        let status = self.client.train(req).await;
        self.state = if status.status == ModelState::Ready {
            SessionState::Ready
        } else {
            SessionState::Failed
        };
        Ok(status)
    }

    pub async fn recommend(
        &mut self,
        req: &RecommendRequest,
        train_rated: &HashMap<&str, HashSet<&str>>,
    ) -> Result<RecommendOutcome, ClientError> {
        if self.state != SessionState::Ready {
            return Err(ClientError::Lifecycle(
                "recommendations requested before the model was ready",
            ));
        }
        let outcome = self.client.recommend(req, train_rated).await;
        self.state = SessionState::Recommended;
        Ok(outcome)
    }

    /// Best-effort teardown; allowed in any state.
    pub async fn delete(&mut self) -> Result<(), ClientError> {
        let result = self.client.delete_model().await;
        self.state = SessionState::Deleted;
        result
    }
}
