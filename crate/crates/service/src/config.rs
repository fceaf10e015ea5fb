//! Evaluator configuration file and the recommender registry.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

/// Timing of the evaluator/recommender conversation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolSettings {
    pub poll_interval: Duration,
    pub train_timeout: Duration,
    pub recommend_timeout: Duration,
    /// Retries after a network failure, with exponential backoff.
    pub retries: u32,
    pub backoff: Duration,
    /// Timeout of one HTTP exchange.
    pub request_timeout: Duration,
}

impl Default for ProtocolSettings {
    fn default() -> Self {
        Self {
            poll_interval: Duration::from_secs(2),
            train_timeout: Duration::from_secs(3600),
            recommend_timeout: Duration::from_secs(3600),
            retries: 3,
            backoff: Duration::from_millis(250),
            request_timeout: Duration::from_secs(60),
        }
    }
}

/// `[protocol]` table of the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub poll_interval_ms: u64,
    pub train_timeout_s: u64,
    pub recommend_timeout_s: u64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub request_timeout_s: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        let d = ProtocolSettings::default();
        Self {
            poll_interval_ms: d.poll_interval.as_millis() as u64,
            train_timeout_s: d.train_timeout.as_secs(),
            recommend_timeout_s: d.recommend_timeout.as_secs(),
            retries: d.retries,
            backoff_ms: d.backoff.as_millis() as u64,
            request_timeout_s: d.request_timeout.as_secs(),
        }
    }
}

impl From<&ProtocolConfig> for ProtocolSettings {
    fn from(c: &ProtocolConfig) -> Self {
        Self {
            poll_interval: Duration::from_millis(c.poll_interval_ms),
            train_timeout: Duration::from_secs(c.train_timeout_s),
            recommend_timeout: Duration::from_secs(c.recommend_timeout_s),
            retries: c.retries,
            backoff: Duration::from_millis(c.backoff_ms),
            request_timeout: Duration::from_secs(c.request_timeout_s),
        }
    }
}

/// Evaluator service configuration, read from a TOML file:
///
/// ```toml
/// bind = "127.0.0.1:7000"
/// public_url = "http://127.0.0.1:7000"   # base URI recommenders can reach
/// data_dir = "store"
/// datasets = "datasets.toml"
/// recommenders = "recommenders.toml"
/// parallel_recommenders = 1
///
/// [protocol]
/// poll_interval_ms = 2000
/// train_timeout_s = 3600
/// recommend_timeout_s = 3600
/// retries = 3
/// ```
///
/// Relative paths resolve against the config file's directory. Every key
/// can be overridden by an environment variable, see [`ENV_OVERRIDES`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    pub public_url: Option<String>,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    pub datasets: PathBuf,
    pub recommenders: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallel_recommenders: usize,
    #[serde(default)]
    pub protocol: ProtocolConfig,
}

fn default_bind() -> String {
    "127.0.0.1:7000".into()
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("store")
}

fn default_parallelism() -> usize {
    1
}

/// Environment variables that override config file keys.
pub const ENV_OVERRIDES: [(&str, &str); 11] = [
    ("RECLAB_BIND", "bind"),
    ("RECLAB_PUBLIC_URL", "public_url"),
    ("RECLAB_DATA_DIR", "data_dir"),
    ("RECLAB_DATASETS", "datasets"),
    ("RECLAB_RECOMMENDERS", "recommenders"),
    ("RECLAB_PARALLEL_RECOMMENDERS", "parallel_recommenders"),
    ("RECLAB_POLL_INTERVAL_MS", "protocol.poll_interval_ms"),
    ("RECLAB_TRAIN_TIMEOUT_S", "protocol.train_timeout_s"),
    ("RECLAB_RECOMMEND_TIMEOUT_S", "protocol.recommend_timeout_s"),
    ("RECLAB_RETRIES", "protocol.retries"),
    ("RECLAB_BACKOFF_MS", "protocol.backoff_ms"),
];

impl EvaluatorConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::load_with_env(path, |k| std::env::var(k).ok())
    }

    pub fn load_with_env(
        path: &Path,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let invalid = |message: String| ConfigError::Invalid {
            path: path.to_owned(),
            message,
        };
        let mut config: EvaluatorConfig = toml::from_str(&text).map_err(|e| invalid(e.to_string()))?;
        config.apply_env(env).map_err(invalid)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [&mut config.data_dir, &mut config.datasets, &mut config.recommenders] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        config.bind_addr().map_err(invalid)?;
        if config.parallel_recommenders == 0 {
            return Err(invalid("parallel_recommenders must be at least 1".into()));
        }
        Ok(config)
    }

    fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<(), String> {
        fn num<T: std::str::FromStr>(var: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("{var}={v} is not a valid number"))
        }
        for (var, _) in ENV_OVERRIDES {
            let Some(v) = env(var) else { continue };
            match var {
                "RECLAB_BIND" => self.bind = v,
                "RECLAB_PUBLIC_URL" => self.public_url = Some(v),
                "RECLAB_DATA_DIR" => self.data_dir = v.into(),
                "RECLAB_DATASETS" => self.datasets = v.into(),
                "RECLAB_RECOMMENDERS" => self.recommenders = v.into(),
                "RECLAB_PARALLEL_RECOMMENDERS" => self.parallel_recommenders = num(var, &v)?,
                "RECLAB_POLL_INTERVAL_MS" => self.protocol.poll_interval_ms = num(var, &v)?,
                "RECLAB_TRAIN_TIMEOUT_S" => self.protocol.train_timeout_s = num(var, &v)?,
                "RECLAB_RECOMMEND_TIMEOUT_S" => self.protocol.recommend_timeout_s = num(var, &v)?,
                "RECLAB_RETRIES" => self.protocol.retries = num(var, &v)?,
                "RECLAB_BACKOFF_MS" => self.protocol.backoff_ms = num(var, &v)?,
                _ => unreachable!(),
            }
        }
        Ok(())
    }

    pub fn bind_addr(&self) -> Result<SocketAddr, String> {
        self.bind
            .parse()
            .map_err(|_| format!("bind address '{}' is not host:port", self.bind))
    }

    /// Base URI recommenders use to reach the evaluator.
    pub fn public_url(&self) -> String {
        self.public_url
            .clone()
            .unwrap_or_else(|| format!("http://{}", self.bind))
            .trim_end_matches('/')
            .to_owned()
    }

    pub fn protocol_settings(&self) -> ProtocolSettings {
        (&self.protocol).into()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryEntry {
    uri: String,
}

#[derive(Debug, Deserialize)]
struct RegistryFile {
    #[serde(default)]
    recommenders: BTreeMap<String, RegistryEntry>,
}

/// Recommender id to base URI, read from a TOML file:
///
/// ```toml
/// [recommenders.random]
/// uri = "http://127.0.0.1:7001"
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecommenderRegistry {
    entries: BTreeMap<String, String>,
}

impl RecommenderRegistry {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&text).map_err(|message| ConfigError::Invalid {
            path: path.to_owned(),
            message,
        })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let file: RegistryFile = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut registry = Self::default();
        for (id, entry) in file.recommenders {
            let url = reqwest::Url::parse(&entry.uri)
                .map_err(|e| format!("recommender '{id}': bad uri '{}': {e}", entry.uri))?;
            if !matches!(url.scheme(), "http" | "https") {
                return Err(format!("recommender '{id}': uri must be http or https"));
            }
            registry.insert(id, entry.uri);
        }
        Ok(registry)
    }

    pub fn insert(&mut self, id: impl Into<String>, uri: impl Into<String>) {
        let uri: String = uri.into();
        self.entries.insert(id.into(), uri.trim_end_matches('/').to_owned());
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.entries.get(id).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn config_paths_and_env_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reclab.toml");
        std::fs::write(
            &path,
            "datasets = \"d.toml\"\nrecommenders = \"/etc/r.toml\"\n[protocol]\npoll_interval_ms = 50\n",
        )
        .unwrap();
        let env: HashMap<&str, &str> =
            HashMap::from([("RECLAB_BIND", "0.0.0.0:9000"), ("RECLAB_RETRIES", "5")]);
        let c = EvaluatorConfig::load_with_env(&path, |k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(c.bind, "0.0.0.0:9000");
        assert_eq!(c.datasets, dir.path().join("d.toml"));
        assert_eq!(c.recommenders, PathBuf::from("/etc/r.toml"));
        assert_eq!(c.data_dir, dir.path().join("store"));
        let s = c.protocol_settings();
        assert_eq!(s.poll_interval, Duration::from_millis(50));
        assert_eq!(s.retries, 5);
        assert_eq!(s.train_timeout, Duration::from_secs(3600));
        assert_eq!(c.public_url(), "http://0.0.0.0:9000");
    }

    #[test]
    fn bad_env_number_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "datasets = \"d\"\nrecommenders = \"r\"\n").unwrap();
        let err = EvaluatorConfig::load_with_env(&path, |k| {
            (k == "RECLAB_RETRIES").then(|| "many".to_string())
        })
        .unwrap_err();
        assert!(err.to_string().contains("RECLAB_RETRIES"));
    }

    #[test]
    fn missing_config_is_io_error() {
        assert!(matches!(
            EvaluatorConfig::load(Path::new("/nonexistent/reclab.toml")),
            Err(ConfigError::Io { .. })
        ));
    }

    #[test]
    fn registry_parsing() {
        let r = RecommenderRegistry::parse(
            "[recommenders.random]\nuri = \"http://127.0.0.1:7001/\"\n[recommenders.pop]\nuri = \"http://h:7002\"\n",
        )
        .unwrap();
        assert_eq!(r.get("random"), Some("http://127.0.0.1:7001"));
        assert_eq!(r.len(), 2);
        assert!(RecommenderRegistry::parse("[recommenders.x]\nuri = \"ftp://h\"\n").is_err());
        assert!(RecommenderRegistry::parse("[recommenders.x]\nuri = \"not a uri\"\n").is_err());
    }
}
