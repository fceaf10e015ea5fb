//! `reclab`: run the evaluator and reference recommenders, submit
//! experiments, score lists offline and move records between deployments.
//!
//! Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration error,
//! 3 environment error (for example an address already in use).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use tokio::net::TcpListener;

use reclab_core::datasets::{load_dataset, DatasetDescriptor, DatasetError};
use reclab_core::metrics::{build_context, evaluate_all};
use reclab_core::protocol::{sanitize, WireList};
use reclab_core::recommenders::RecommenderKind;
use reclab_core::{validate_config, ExperimentConfig, MetricsReport, SplitMethod};
use reclab_service::store::{ExperimentSummary, Page, RecommenderStatus};
use reclab_service::{
    bind_evaluator, serve_recommender, EvaluatorConfig, ExperimentRecord, ExperimentStatus,
    ServeError,
};

#[derive(Debug, Parser)]
#[command(name = "reclab", version, about = "Offline evaluation of recommender systems")]
struct Cli {
    /// Output style of result-producing commands.
    #[arg(long, value_enum, global = true, default_value_t = Format::Table)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    JsonLines,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the evaluator service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a reference recommender service.
    Recommender {
        /// random, most-popular, item-knn or user-knn
        #[arg(long)]
        kind: String,
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Submit an experiment, wait for it and print the metrics table.
    Run(RunArgs),
    /// Score precomputed recommendation lists against train and test files.
    EvalOffline(OfflineArgs),
    /// Copy experiment records out of a deployment: `export <id> <dest>`
    /// or `export --all <dest>`.
    Export {
        #[arg(required_unless_present = "all", conflicts_with = "all")]
        id: Option<String>,
        /// Destination directory.
        #[arg(required_unless_present = "all", conflicts_with = "all")]
        dest: Option<PathBuf>,
        /// Export every record into this directory.
        #[arg(long, value_name = "DEST")]
        all: Option<PathBuf>,
        #[command(flatten)]
        api: Api,
    },
    /// Load exported records into a deployment.
    Import {
        /// A record file or a directory of them.
        src: PathBuf,
        #[command(flatten)]
        api: Api,
    },
}

#[derive(Debug, Args)]
struct Api {
    /// Evaluator base URI.
    #[arg(long = "api", env = "RECLAB_API", default_value = "http://127.0.0.1:7000")]
    url: String,
}

impl Api {
    fn base(&self) -> &str {
        self.url.trim_end_matches('/')
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value = "random")]
    split: String,
    /// Test fraction.
    #[arg(long, default_value_t = 0.2)]
    test: f64,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 3.0)]
    threshold: f64,
    /// Comma-separated recommender ids.
    #[arg(long, value_delimiter = ',', required = true)]
    rec: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the finished record as JSON.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    poll_interval_ms: u64,
    #[command(flatten)]
    api: Api,
}

#[derive(Debug, Args)]
struct OfflineArgs {
    /// `user,item,value[,timestamp]`
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// `user,item,rank`
    #[arg(long)]
    recs: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 3.0)]
    threshold: f64,
}

#[derive(Debug)]
enum Failure {
    Runtime(String),
    Usage(String),
    Environment(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Environment(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Runtime(m) | Failure::Usage(m) | Failure::Environment(m) => m,
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("RECLAB_LOG")
                .unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(3);
        }
    };
    let format = cli.format;
    let result = runtime.block_on(async move {
        match cli.command {
            Command::Serve { config } => serve(&config).await,
            Command::Recommender {
                kind,
                port,
                host,
                seed,
            } => recommender(&kind, &host, port, seed).await,
            Command::Run(args) => run(args, format).await,
            Command::EvalOffline(args) => eval_offline(&args, format),
            Command::Export { id, dest, all, api } => {
                let dest = all.or(dest).expect("clap requires a destination");
                export(id.as_deref(), &dest, &api, format).await
            }
            Command::Import { src, api } => import(&src, &api, format).await,
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

async fn serve(path: &Path) -> CmdResult {
    let config = EvaluatorConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?;
    let server = bind_evaluator(&config).await.map_err(|e| match e {
        ServeError::Config(_) | ServeError::Datasets(_) => Failure::Usage(e.to_string()),
        ServeError::Bind { .. } => Failure::Environment(e.to_string()),
        ServeError::Store(_) | ServeError::Serve(_) => Failure::Runtime(e.to_string()),
    })?;
    if let Ok(addr) = server.local_addr() {
        eprintln!("evaluator listening on http://{addr}");
    }
    server.serve().await.map_err(|e| Failure::Runtime(e.to_string()))
}

async fn recommender(kind: &str, host: &str, port: u16, seed: u64) -> CmdResult {
    let kind = RecommenderKind::from_str(kind).map_err(|e| Failure::Usage(e.to_string()))?;
    let addr = format!("{host}:{port}");
    let listener = TcpListener::bind(&addr)
        .await
        .map_err(|e| Failure::Environment(format!("cannot bind {addr}: {e}")))?;
    if let Ok(local) = listener.local_addr() {
        eprintln!("{kind} recommender listening on http://{local}");
    }
    serve_recommender(kind, listener, seed)
        .await
        .map_err(|e| Failure::Runtime(e.to_string()))
}

// ---------------------------------------------------------------------- run

fn http() -> reqwest::Client {
    reqwest::Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .expect("http client builds")
}

fn unreachable(base: &str, e: reqwest::Error) -> Failure {
    Failure::Runtime(format!("evaluator at {base} unreachable: {e}"))
}

/// Message of an error response: the `error` field plus any violations.
fn error_text(body: &str) -> String {
    let Ok(v) = serde_json::from_str::<Value>(body) else {
        return body.trim().to_owned();
    };
    let mut text = v["error"].as_str().unwrap_or("request rejected").to_owned();
    for violation in v["violations"].as_array().into_iter().flatten() {
        let _ = write!(
            text,
            "\n  {}: {}",
            violation["field"].as_str().unwrap_or("?"),
            violation["message"].as_str().unwrap_or("?")
        );
    }
    text
}

async fn get_record(client: &reqwest::Client, base: &str, id: &str) -> Result<(String, ExperimentRecord), Failure> {
    let resp = client
        .get(format!("{base}/experiments/{id}"))
        .send()
        .await
        .map_err(|e| unreachable(base, e))?;
    let status = resp.status();
    let body = resp.text().await.map_err(|e| unreachable(base, e))?;
    if !status.is_success() {
        return Err(Failure::Runtime(format!("experiment {id}: {}", error_text(&body))));
    }
    let record = serde_json::from_str(&body)
        .map_err(|e| Failure::Runtime(format!("experiment {id}: malformed record: {e}")))?;
    Ok((body, record))
}

async fn run(args: RunArgs, format: Format) -> CmdResult {
    let split_method = SplitMethod::from_str(&args.split).map_err(Failure::Usage)?;
    let config = ExperimentConfig {
        dataset_id: args.dataset.clone(),
        split_method,
        test_fraction: args.test,
        k: args.k,
        rating_threshold: args.threshold,
        recommender_ids: args.rec.iter().map(|r| r.trim().to_owned()).collect(),
        seed: args.seed,
    };
    let violations = validate_config(&config);
    if !violations.is_empty() {
        let lines: Vec<String> = violations.iter().map(|v| format!("  {v}")).collect();
        return Err(Failure::Usage(format!("invalid experiment:\n{}", lines.join("\n"))));
    }

    let base = args.api.base();
    let client = http();
    let resp = client
        .post(format!("{base}/experiments"))
        .json(&config)
        .send()
        .await
        .map_err(|e| unreachable(base, e))?;
    let status = resp.status();
    let body = resp.text().await.map_err(|e| unreachable(base, e))?;
    if status.is_client_error() {
        return Err(Failure::Usage(format!("experiment rejected: {}", error_text(&body))));
    }
    if !status.is_success() {
        return Err(Failure::Runtime(format!("submission failed ({status}): {}", error_text(&body))));
    }
    let id = serde_json::from_str::<Value>(&body)
        .ok()
        .and_then(|v| v["id"].as_str().map(str::to_owned))
        .ok_or_else(|| Failure::Runtime(format!("unexpected submission answer: {body}")))?;
    if format == Format::Table {
        eprintln!("submitted experiment {id}");
    }

    let interval = Duration::from_millis(args.poll_interval_ms.max(1));
    let mut last = None;
    let (raw, record) = loop {
        let (raw, record) = get_record(&client, base, &id).await?;
        if matches!(record.status, ExperimentStatus::Done | ExperimentStatus::Failed) {
            break (raw, record);
        }
        if format == Format::Table && last != Some(record.status) {
            eprintln!("experiment {id}: {}", record.status);
            last = Some(record.status);
        }
        tokio::time::sleep(interval).await;
    };

    if let Some(path) = &args.output {
        std::fs::write(path, &raw)
            .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
    }
    report_run(&record, format);

    if record.status == ExperimentStatus::Failed {
        return Err(Failure::Runtime(format!(
            "experiment {id} failed: {}",
            record.detail.as_deref().unwrap_or("no detail")
        )));
    }
    let failed: Vec<String> = record
        .per_recommender
        .iter()
        .filter(|(_, o)| o.status == RecommenderStatus::Failed)
        .map(|(r, o)| format!("{r}: {}", o.detail.as_deref().unwrap_or("no detail")))
        .collect();
    if !failed.is_empty() {
        return Err(Failure::Runtime(format!(
            "experiment {id}: {} recommender(s) failed\n  {}",
            failed.len(),
            failed.join("\n  ")
        )));
    }
    Ok(())
}

fn report_run(record: &ExperimentRecord, format: Format) {
    match format {
        Format::JsonLines => {
            for (rec, o) in &record.per_recommender {
                let line = json!({
                    "experiment": record.id,
                    "recommender": rec,
                    "status": o.status,
                    "metrics": o.metrics,
                    "violations": o.violations,
                    "detail": o.detail,
                });
                println!("{line}");
            }
        }
        Format::Table => {
            let rows: Vec<(String, Option<MetricsReport>)> = record
                .per_recommender
                .iter()
                .map(|(r, o)| (r.clone(), o.metrics))
                .collect();
            print!("{}", metrics_table(&rows));
            for (rec, o) in &record.per_recommender {
                if o.violations.total() > 0 {
                    eprintln!("note: {rec}: {} list items removed by sanitization", o.violations.total());
                }
                if let Some(w) = &o.teardown_warning {
                    eprintln!("note: {rec}: {w}");
                }
            }
        }
    }
}

/// One row per recommender; metric-less rows print dashes.
fn metrics_table(rows: &[(String, Option<MetricsReport>)]) -> String {
    let name_width = rows
        .iter()
        .map(|(r, _)| r.len())
        .chain(["Recommender".len()])
        .max()
        .unwrap_or(0);
    let mut out = format!("{:<name_width$}", "Recommender");
    for col in MetricsReport::COLUMNS {
        let _ = write!(out, "  {col:>11}");
    }
    out.push('\n');
    for (rec, metrics) in rows {
        let _ = write!(out, "{rec:<name_width$}");
        let values = metrics.map(|m| m.values()).unwrap_or([None; 7]);
        for v in values {
            match v {
                Some(v) => {
                    let _ = write!(out, "  {v:>11.6}");
                }
                None => {
                    let _ = write!(out, "  {:>11}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

// ------------------------------------------------------------- eval-offline

fn load_ratings(path: &Path) -> Result<reclab_core::RatingSet, Failure> {
    let descriptor = DatasetDescriptor::generic_csv("offline", path, false);
    let loaded = load_dataset::<f64>(&descriptor).map_err(|e| match e {
        DatasetError::Io { .. } => Failure::Usage(e.to_string()),
        other => Failure::Runtime(other.to_string()),
    })?;
    if loaded.malformed > 0 {
        eprintln!("warning: {}: {} malformed lines skipped", path.display(), loaded.malformed);
    }
    Ok(loaded.ratings)
}

/// Reads `user,item,rank` lines into per-user lists ordered by rank.
fn load_lists(path: &Path) -> Result<Vec<WireList>, Failure> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut by_user: BTreeMap<String, Vec<(f64, usize, String)>> = BTreeMap::new();
    let mut malformed = 0usize;
    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
        if row.iter().all(str::is_empty) {
            continue;
        }
        let rank = row.get(2).and_then(|r| r.parse::<f64>().ok());
        match (row.len(), rank) {
            (3, Some(rank)) => by_user
                .entry(row[0].to_owned())
                .or_default()
                .push((rank, line, row[1].to_owned())),
            // a header line
            _ if line == 0 => {}
            _ => malformed += 1,
        }
    }
    if malformed > 0 {
        eprintln!("warning: {}: {malformed} malformed lines skipped", path.display());
    }
    Ok(by_user
        .into_iter()
        .map(|(user, mut entries)| {
            entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            WireList {
                user,
                items: entries.into_iter().map(|e| e.2).collect(),
            }
        })
        .collect())
}

fn eval_offline(args: &OfflineArgs, format: Format) -> CmdResult {
    if args.k < 1 {
        return Err(Failure::Usage("k must be at least 1".into()));
    }
    let train = load_ratings(&args.train)?;
    let test = load_ratings(&args.test)?;
    let lists = load_lists(&args.recs)?;
    let ctx = build_context(&train, &test, args.threshold, args.k)
        .map_err(|e| Failure::Runtime(e.to_string()))?;

    let rated = train.rated_by_user();
    let sanitized = sanitize(lists, ctx.test_users(), args.k, &rated);
    let v = sanitized.violations;
    if v.total() > 0 {
        eprintln!(
            "warning: sanitization removed {} items: {} rated in training, {} duplicates, {} beyond k; {} lists for users outside the test set ignored",
            v.train_rated + v.duplicates + v.overlong,
            v.train_rated,
            v.duplicates,
            v.overlong,
            v.unexpected_users
        );
    }
    if !sanitized.missing_users.is_empty() {
        eprintln!(
            "warning: {} test users have no list and score as empty",
            sanitized.missing_users.len()
        );
    }
    let recs: HashMap<_, _> = sanitized
        .lists
        .into_iter()
        .map(|l| (l.user.clone(), l))
        .collect();
    let report = evaluate_all(&ctx, &recs);
    match format {
        Format::Table => print!("{}", metrics_table(&[("offline".into(), Some(report))])),
        Format::JsonLines => println!(
            "{}",
            json!({
                "metrics": report,
                "violations": v,
                "test_users": ctx.test_users().len(),
                "missing_users": sanitized.missing_users.len(),
            })
        ),
    }
    Ok(())
}

// ----------------------------------------------------------- export/import

async fn all_ids(client: &reqwest::Client, base: &str) -> Result<Vec<ExperimentSummary>, Failure> {
    let mut out = Vec::new();
    for page in 1.. {
        let resp = client
            .get(format!("{base}/experiments?page={page}"))
            .send()
            .await
            .map_err(|e| unreachable(base, e))?;
        if !resp.status().is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(Failure::Runtime(format!("listing failed: {}", error_text(&body))));
        }
        let page: Page = resp
            .json()
            .await
            .map_err(|e| Failure::Runtime(format!("malformed listing: {e}")))?;
        let done = page.experiments.is_empty() || out.len() + page.experiments.len() >= page.total;
        out.extend(page.experiments);
        if done {
            break;
        }
    }
    Ok(out)
}

async fn export(id: Option<&str>, dest: &Path, api: &Api, format: Format) -> CmdResult {
    let base = api.base();
    let client = http();
    let ids: Vec<String> = match id {
        Some(id) => vec![id.to_owned()],
        None => all_ids(&client, base).await?.into_iter().map(|s| s.id).collect(),
    };
    let mut fetched = Vec::with_capacity(ids.len());
    for id in &ids {
        fetched.push(get_record(&client, base, id).await?);
    }
    std::fs::create_dir_all(dest)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dest.display())))?;
    let mut index = String::new();
    for (raw, record) in &fetched {
        let path = dest.join(format!("{}.json", record.id));
        std::fs::write(&path, raw)
            .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
        let summary = json!(record.summary());
        index.push_str(&summary.to_string());
        index.push('\n');
        match format {
            Format::Table => println!("{}", path.display()),
            Format::JsonLines => println!("{}", json!({"id": record.id, "path": path})),
        }
    }
    let index_path = dest.join("index.jsonl");
    std::fs::write(&index_path, index)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", index_path.display())))?;
    if format == Format::Table {
        eprintln!("exported {} record(s)", fetched.len());
    }
    Ok(())
}

async fn import(src: &Path, api: &Api, format: Format) -> CmdResult {
    let files: Vec<PathBuf> = if src.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(src)
            .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", src.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        files
    } else if src.is_file() {
        vec![src.to_owned()]
    } else {
        return Err(Failure::Usage(format!("{} does not exist", src.display())));
    };

    let base = api.base();
    let client = http();
    let mut failures = Vec::new();
    for path in &files {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", path.display())))?;
        let resp = client
            .post(format!("{base}/experiments/import"))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(raw)
            .send()
            .await
            .map_err(|e| unreachable(base, e))?;
        let status = resp.status();
        let body = resp.text().await.unwrap_or_default();
        let outcome = match status.as_u16() {
            201 => "imported".to_owned(),
            200 => "already present".to_owned(),
            _ => {
                let reason = error_text(&body);
                failures.push(format!("{}: {reason}", path.display()));
                format!("rejected: {reason}")
            }
        };
        match format {
            Format::Table => println!("{}: {outcome}", path.display()),
            Format::JsonLines => println!(
                "{}",
                json!({"path": path, "status": status.as_u16(), "outcome": outcome})
            ),
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "{} of {} record(s) rejected",
            failures.len(),
            files.len()
        )))
    }
}
