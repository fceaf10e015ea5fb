use std::collections::HashMap;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::Value;

use reclab_core::datasets::{load_dataset, DatasetDescriptor};
use reclab_core::metrics::{build_context, evaluate_all};
use reclab_core::RecommendationList;

fn reclab() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_reclab"));
    cmd.env_remove("RECLAB_API").env("RECLAB_LOG", "warn");
    cmd
}

fn exec(args: &[&str]) -> Output {
    reclab().args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// Kills the child process on drop.
struct Running(Child);

impl Drop for Running {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn(args: &[&str]) -> Running {
    Running(
        reclab()
            .args(args)
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .expect("binary starts"),
    )
}

fn wait_until_up(url: &str) {
    let deadline = Instant::now() + Duration::from_secs(15);
    while Instant::now() < deadline {
        if reqwest::blocking::get(url).is_ok() {
            return;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    panic!("{url} never came up");
}

fn write_ml100k(path: &Path) {
    let mut out = String::new();
    let mut ts = 880_000_000;
    for u in 1..=40 {
        for j in 0..12 {
            let item = 1 + (u * 7 + j * j * 3 + j) % 60;
            ts += 17;
            out.push_str(&format!("{u}\t{item}\t{}\t{ts}\n", 1 + (u + j) % 5));
        }
    }
    std::fs::write(path, out).unwrap();
}

struct Deployment {
    api: String,
    _evaluator: Running,
    _recommenders: Vec<Running>,
}

/// Writes config files into `dir` and starts an evaluator plus the given
/// reference recommenders.
fn deploy(dir: &Path, recs: &[(&str, &str)]) -> Deployment {
    write_ml100k(&dir.join("u.data"));
    std::fs::write(
        dir.join("lastfm.dat"),
        "userID\tartistID\tweight\n1\t1\t10\n1\t2\t20\n2\t1\t5\n2\t3\t7\n3\t2\t9\n",
    )
    .unwrap();
    std::fs::write(
        dir.join("datasets.toml"),
        "[datasets.ml100k]\nformat = \"movielens_100k\"\npath = \"u.data\"\n\n\
         [datasets.lastfm]\nformat = \"hetrec_lastfm\"\npath = \"lastfm.dat\"\n",
    )
    .unwrap();

    let mut running = Vec::new();
    let mut registry = String::new();
    for (id, kind) in recs {
        let port = free_port();
        running.push(spawn(&["recommender", "--kind", kind, "--port", &port.to_string(), "--seed", "3"]));
        registry.push_str(&format!("[recommenders.{id}]\nuri = \"http://127.0.0.1:{port}\"\n"));
        wait_until_up(&format!("http://127.0.0.1:{port}/model"));
    }
    std::fs::write(dir.join("recommenders.toml"), registry).unwrap();

    let port = free_port();
    std::fs::write(
        dir.join("reclab.toml"),
        format!(
            "bind = \"127.0.0.1:{port}\"\ndata_dir = \"store\"\ndatasets = \"datasets.toml\"\n\
             recommenders = \"recommenders.toml\"\n\n[protocol]\npoll_interval_ms = 20\n"
        ),
    )
    .unwrap();
    let config = dir.join("reclab.toml");
    let evaluator = spawn(&["serve", "--config", config.to_str().unwrap()]);
    let api = format!("http://127.0.0.1:{port}");
    wait_until_up(&format!("{api}/datasets"));
    Deployment {
        api,
        _evaluator: evaluator,
        _recommenders: running,
    }
}

fn run_args<'a>(api: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "run", "--api", api, "--dataset", "ml100k", "--split", "random", "--test", "0.2",
        "--threshold", "3", "--seed", "7", "--poll-interval-ms", "20",
    ];
    args.extend_from_slice(extra);
    args
}

#[test]
fn bad_config_path_is_a_usage_error() {
    let out = exec(&["serve", "--config", "/nonexistent/reclab.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/nonexistent/reclab.toml"));
}

#[test]
fn unknown_kind_lists_valid_kinds() {
    let out = exec(&["recommender", "--kind", "svd", "--port", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for kind in ["random", "most-popular", "item-knn", "user-knn"] {
        assert!(err.contains(kind), "{err}");
    }
}

#[test]
fn busy_port_is_an_environment_error() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let out = exec(&["recommender", "--kind", "random", "--port", &port]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));

    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("datasets.toml"), "").unwrap();
    std::fs::write(dir.path().join("recommenders.toml"), "").unwrap();
    let config = dir.path().join("reclab.toml");
    std::fs::write(
        &config,
        format!("bind = \"127.0.0.1:{port}\"\ndatasets = \"datasets.toml\"\nrecommenders = \"recommenders.toml\"\n"),
    )
    .unwrap();
    let out = exec(&["serve", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn invalid_k_is_rejected_before_submission() {
    // nothing listens on this port; validation must fail first
    let api = format!("http://127.0.0.1:{}", free_port());
    let out = exec(&run_args(&api, &["--k", "0", "--rec", "random"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("k: must be at least 1"), "{}", stderr(&out));
}

#[test]
fn unreachable_evaluator_is_a_runtime_error() {
    let api = format!("http://127.0.0.1:{}", free_port());
    let out = exec(&run_args(&api, &["--rec", "random"]));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("unreachable"));
}

#[test]
fn run_export_and_import_across_deployments() {
    let dir = tempfile::tempdir().unwrap();
    let dep = deploy(dir.path(), &[("random", "random"), ("most_popular", "most-popular")]);
    let record_path = dir.path().join("record.json");

    let out = exec(&run_args(&dep.api, &["--k", "5", "--rec", "random,most_popular", "--output", record_path.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = stdout(&out);
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(
        header,
        ["Recommender", "Coverage", "Precision", "Recall", "NDCG", "Novelty", "Diversity", "Serendipity"]
    );
    let rows: Vec<&str> = table.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(rows, ["most_popular", "random"]);
    let record: Value = serde_json::from_str(&std::fs::read_to_string(&record_path).unwrap()).unwrap();
    assert_eq!(record["status"], "done");
    assert!(record["digest"].is_string());

    let out = exec(&run_args(&dep.api, &["--k", "5", "--rec", "random", "--format", "json-lines"]));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let lines: Vec<Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["recommender"], "random");
    assert!(lines[0]["metrics"]["coverage"].is_f64());

    // timestamp split on a dataset without timestamps
    let out = exec(&[
        "run", "--api", &dep.api, "--dataset", "lastfm", "--split", "timestamp", "--rec", "random",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("has no timestamps"), "{}", stderr(&out));

    let out = exec(&["run", "--api", &dep.api, "--dataset", "ml100k", "--rec", "nope"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    // export
    let export_dir = dir.path().join("out");
    let out = exec(&["export", "--api", &dep.api, "--all", export_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let mut files: Vec<PathBuf> = std::fs::read_dir(&export_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    assert_eq!(files.len(), 2);
    let index = std::fs::read_to_string(export_dir.join("index.jsonl")).unwrap();
    assert_eq!(index.lines().count(), 2);

    let out = exec(&["export", "--api", &dep.api, "20990101T000000000Z-deadbeef", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    // import into a fresh deployment
    let other = tempfile::tempdir().unwrap();
    let fresh = deploy(other.path(), &[]);
    let out = exec(&["import", "--api", &fresh.api, export_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let out = exec(&["import", "--api", &fresh.api, export_dir.to_str().unwrap(), "--format", "json-lines"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).lines().all(|l| l.contains("already present")));

    for file in &files {
        let id = file.file_stem().unwrap().to_str().unwrap();
        let get = |api: &str| reqwest::blocking::get(format!("{api}/experiments/{id}")).unwrap().text().unwrap();
        assert_eq!(get(&dep.api), get(&fresh.api));
    }

    // a tampered record is refused
    let forged = other.path().join("forged.json");
    let text = std::fs::read_to_string(&files[0]).unwrap().replacen("\"k\":5", "\"k\":6", 1);
    std::fs::write(&forged, text).unwrap();
    let out = exec(&["import", "--api", &fresh.api, forged.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

fn offline_fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let train = dir.join("train.csv");
    let test = dir.join("test.csv");
    let recs = dir.join("recs.csv");
    std::fs::write(&train, "user,item,value\na,x,5\na,y,4\nb,x,4\nb,z,5\nc,y,2\n").unwrap();
    std::fs::write(&test, "a,z,5\nb,y,1\nc,x,4\nc,z,5\n").unwrap();
    // a lists z twice; b lists x, which it rated in training
    std::fs::write(&recs, "user,item,rank\na,z,1\na,z,2\na,q,3\nb,x,1\nb,y,2\nc,z,2\nc,x,1\n").unwrap();
    (train, test, recs)
}

#[test]
fn eval_offline_matches_in_process_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test, recs) = offline_fixture(dir.path());
    let out = exec(&[
        "eval-offline", "--train", train.to_str().unwrap(), "--test", test.to_str().unwrap(),
        "--recs", recs.to_str().unwrap(), "--k", "2", "--threshold", "3", "--format", "json-lines",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stderr(&out).contains("sanitization removed"), "{}", stderr(&out));
    let line: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(line["violations"]["duplicates"], 1);
    assert_eq!(line["violations"]["train_rated"], 1);

    let load = |p: &Path| load_dataset::<f64>(&DatasetDescriptor::generic_csv("t", p, false)).unwrap().ratings;
    let ctx = build_context(&load(&train), &load(&test), 3.0, 2).unwrap();
    let lists = HashMap::from([
        ("a".to_string(), RecommendationList::new("a", vec!["z".into(), "q".into()]).unwrap()),
        ("b".to_string(), RecommendationList::new("b", vec!["y".into()]).unwrap()),
        ("c".to_string(), RecommendationList::new("c", vec!["x".into(), "z".into()]).unwrap()),
    ]);
    let expected = serde_json::to_value(evaluate_all(&ctx, &lists)).unwrap();
    assert_eq!(line["metrics"], expected);

    let out = exec(&[
        "eval-offline", "--train", train.to_str().unwrap(), "--test", test.to_str().unwrap(),
        "--recs", recs.to_str().unwrap(), "--k", "2",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let table = stdout(&out);
    assert!(table.starts_with("Recommender"));
    assert!(table.lines().nth(1).unwrap().starts_with("offline"));
}

#[test]
fn eval_offline_missing_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _, recs) = offline_fixture(dir.path());
    let out = exec(&[
        "eval-offline", "--train", train.to_str().unwrap(), "--test", "/nonexistent/test.csv",
        "--recs", recs.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/nonexistent/test.csv"));
}
