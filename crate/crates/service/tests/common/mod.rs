#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokio::net::TcpListener;

use reclab_core::datasets::{DatasetDescriptor, DatasetFormat, DatasetRegistry};
use reclab_core::recommenders::RecommenderKind;
use reclab_service::{router, Evaluator, ProtocolSettings, RecommenderRegistry, Store};

pub fn fast_settings() -> ProtocolSettings {
    ProtocolSettings {
        poll_interval: Duration::from_millis(10),
        train_timeout: Duration::from_secs(5),
        recommend_timeout: Duration::from_secs(5),
        retries: 1,
        backoff: Duration::from_millis(10),
        request_timeout: Duration::from_secs(5),
    }
}

/// Writes a small MovieLens-100K-style file (tab separated, timestamps).
pub fn write_ml100k(path: &Path, users: usize, items: usize, per_user: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    let mut ts = 880_000_000i64;
    for u in 1..=users {
        let mut chosen = std::collections::BTreeSet::new();
        while chosen.len() < per_user.min(items) {
            // skewed towards low item ids
            let x: f64 = rng.gen();
            chosen.insert(1 + ((x * x) * items as f64) as usize % items);
        }
        for i in chosen {
            ts += rng.gen_range(1..500);
            out.push_str(&format!("{u}\t{i}\t{}\t{ts}\n", rng.gen_range(1..=5)));
        }
    }
    std::fs::write(path, out).unwrap();
}

/// Writes a HetRec-style file (header, no timestamps).
pub fn write_hetrec(path: &Path) {
    let mut out = String::from("userID\tartistID\tweight\n");
    for u in 1..=10 {
        for a in 1..=8 {
            if (u + a) % 3 != 0 {
                out.push_str(&format!("{u}\t{a}\t{}\n", u * 10 + a));
            }
        }
    }
    std::fs::write(path, out).unwrap();
}

pub struct Harness {
    pub evaluator: Arc<Evaluator>,
    pub base: String,
    pub dir: tempfile::TempDir,
    server: tokio::task::JoinHandle<()>,
}

impl Harness {
    /// Stops serving and hands back the directory holding the store.
    pub fn stop(mut self) -> tempfile::TempDir {
        self.server.abort();
        std::mem::replace(&mut self.dir, tempfile::tempdir().unwrap())
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

impl Drop for Harness {
    fn drop(&mut self) {
        self.server.abort();
    }
}

pub fn registry(dir: &Path) -> DatasetRegistry {
    let ml = dir.join("u.data");
    if !ml.exists() {
        write_ml100k(&ml, 40, 60, 12, 11);
        write_hetrec(&dir.join("user_artists.dat"));
    }
    let mut datasets = DatasetRegistry::default();
    datasets.insert(DatasetDescriptor::new("ml", DatasetFormat::MovieLens100k, ml));
    datasets.insert(DatasetDescriptor::new(
        "lastfm",
        DatasetFormat::HetrecLastfm,
        dir.join("user_artists.dat"),
    ));
    let big = dir.join("big.csv");
    if big.exists() {
        datasets.insert(DatasetDescriptor::generic_csv("big", big, true));
    }
    datasets
}

/// Evaluator on an ephemeral port with its store under a temp dir.
pub async fn start_evaluator(recommenders: RecommenderRegistry) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    start_evaluator_in(dir, recommenders, 1).await
}

pub async fn start_evaluator_in(
    dir: tempfile::TempDir,
    recommenders: RecommenderRegistry,
    parallel: usize,
) -> Harness {
    start_evaluator_with(dir, recommenders, parallel, fast_settings()).await
}

pub async fn start_evaluator_with(
    dir: tempfile::TempDir,
    recommenders: RecommenderRegistry,
    parallel: usize,
    settings: ProtocolSettings,
) -> Harness {
    let datasets = registry(dir.path());
    let store = Arc::new(Store::open(dir.path().join("store")).unwrap());
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let evaluator = Evaluator::start(
        store,
        datasets,
        recommenders,
        settings,
        base.clone(),
        parallel,
    )
    .unwrap();
    let app = router(evaluator.clone());
    let server = tokio::spawn(async move {
        let _ = axum::serve(listener, app).await;
    });
    Harness {
        evaluator,
        base,
        dir,
        server,
    }
}

/// A reference recommender on an ephemeral port; returns its base URI.
pub async fn start_reference(kind: RecommenderKind, seed: u64) -> (String, tokio::task::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let task = tokio::spawn(async move {
        let _ = reclab_service::serve_recommender(kind, listener, seed).await;
    });
    (base, task)
}
