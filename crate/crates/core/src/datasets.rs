//! Dataset parsing, the dataset registry and the two train/test split
//! protocols.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Rating, RatingSet};
use crate::num::Scalar;

/// Largest tolerated share of unparseable lines before a file is rejected
/// as being in the wrong format.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset file {path} cannot be read: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{malformed} of {lines} lines are malformed; the file does not look like {format}")]
    FormatMismatch {
        format: DatasetFormat,
        malformed: usize,
        lines: usize,
    },
    #[error("dataset registry {path}: {message}")]
    Registry { path: PathBuf, message: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("rating #{index} ({user}, {item}) has no timestamp; timestamp splitting needs timestamps on every rating")]
    MissingTimestamp {
        index: usize,
        user: String,
        item: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// `user<TAB>item<TAB>rating<TAB>timestamp`, no header.
    #[serde(rename = "movielens_100k")]
    MovieLens100k,
    /// `user::item::rating::timestamp`, no header.
    #[serde(rename = "movielens_1m")]
    MovieLens1m,
    /// `userID<TAB>artistID<TAB>weight` with one header line.
    HetrecLastfm,
    /// Delimited `user,item,value[,timestamp]`.
    GenericCsv,
}

impl std::fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetFormat::MovieLens100k => "movielens_100k",
            DatasetFormat::MovieLens1m => "movielens_1m",
            DatasetFormat::HetrecLastfm => "hetrec_lastfm",
            DatasetFormat::GenericCsv => "generic_csv",
        })
    }
}

/// Whether a generic CSV file starts with a header line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeaderMode {
    Present,
    Absent,
    /// Treat the first line as a header when its value column is not numeric.
    #[default]
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub id: String,
    pub format: DatasetFormat,
    pub path: PathBuf,
    pub has_timestamps: bool,
    /// Field delimiter of `generic_csv` files.
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default)]
    pub header: HeaderMode,
}

fn default_delimiter() -> char {
    ','
}

impl DatasetDescriptor {
    pub fn new(id: impl Into<String>, format: DatasetFormat, path: impl Into<PathBuf>) -> Self {
        Self {
            id: id.into(),
            format,
            path: path.into(),
            has_timestamps: !matches!(
                format,
                DatasetFormat::HetrecLastfm | DatasetFormat::GenericCsv
            ),
            delimiter: ',',
            header: HeaderMode::Auto,
        }
    }

    /// A comma-separated `generic_csv` descriptor.
    pub fn generic_csv(id: impl Into<String>, path: impl Into<PathBuf>, has_timestamps: bool) -> Self {
        Self {
            has_timestamps,
            ..Self::new(id, DatasetFormat::GenericCsv, path)
        }
    }
}

/// Entry of the dataset registry file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryEntry {
    format: DatasetFormat,
    path: PathBuf,
    has_timestamps: Option<bool>,
    delimiter: Option<char>,
    header: Option<HeaderMode>,
}

#[derive(Debug, Deserialize)]
struct RegistryFile {
    #[serde(default)]
    datasets: BTreeMap<String, RegistryEntry>,
}

/// Dataset catalog read from a TOML file:
///
/// ```toml
/// [datasets.ml100k]
/// format = "movielens_100k"
/// path = "ml-100k/u.data"
///
/// [datasets.books]
/// format = "generic_csv"
/// path = "books.csv"
/// delimiter = ";"
/// header = "present"
/// has_timestamps = false
/// ```
///
/// Relative paths resolve against the registry file's directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetRegistry {
    datasets: BTreeMap<String, DatasetDescriptor>,
}

impl DatasetRegistry {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_owned(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base).map_err(|message| DatasetError::Registry {
            path: path.to_owned(),
            message,
        })
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, String> {
        let file: RegistryFile = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut registry = Self::default();
        for (id, entry) in file.datasets {
            let path = if entry.path.is_absolute() {
                entry.path
            } else {
                base_dir.join(entry.path)
            };
            let mut descriptor = DatasetDescriptor::new(id.clone(), entry.format, path);
            if let Some(ts) = entry.has_timestamps {
                if ts && entry.format == DatasetFormat::HetrecLastfm {
                    return Err(format!("dataset '{id}': hetrec_lastfm files carry no timestamps"));
                }
                descriptor.has_timestamps = ts;
            }
            if let Some(d) = entry.delimiter {
                descriptor.delimiter = d;
            }
            if let Some(h) = entry.header {
                descriptor.header = h;
            }
            registry.insert(descriptor);
        }
        Ok(registry)
    }

    pub fn insert(&mut self, descriptor: DatasetDescriptor) {
        self.datasets.insert(descriptor.id.clone(), descriptor);
    }

    pub fn get(&self, id: &str) -> Option<&DatasetDescriptor> {
        self.datasets.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &DatasetDescriptor> {
        self.datasets.values()
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }
}

/// A parsed dataset with its parse tallies.
#[derive(Debug, Clone)]
pub struct LoadedDataset<T> {
    pub ratings: RatingSet<T>,
    /// Non-blank data lines seen (header excluded).
    pub lines: usize,
    pub malformed: usize,
    /// Repeated (user, item) pairs dropped in favour of the last one.
    pub duplicates: usize,
}

/// Reads and parses the file a descriptor points to.
pub fn load_dataset<T: Scalar>(descriptor: &DatasetDescriptor) -> Result<LoadedDataset<T>, DatasetError> {
    let file = File::open(&descriptor.path).map_err(|source| DatasetError::Io {
        path: descriptor.path.clone(),
        source,
    })?;
    parse_dataset(BufReader::new(file), descriptor).map_err(|e| match e {
        DatasetError::Io { source, .. } => DatasetError::Io {
            path: descriptor.path.clone(),
            source,
        },
        other => other,
    })
}

/// Parses dataset content in the descriptor's format. The descriptor's path
/// is not consulted.
pub fn parse_dataset<T: Scalar, R: Read>(
    reader: R,
    descriptor: &DatasetDescriptor,
) -> Result<LoadedDataset<T>, DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: descriptor.path.clone(),
        source,
    };
    let mut ratings = Vec::new();
    let mut lines = 0usize;
    let mut malformed = 0usize;
    match descriptor.format {
        DatasetFormat::GenericCsv => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(false)
                .flexible(true)
                .delimiter(u8::try_from(descriptor.delimiter).unwrap_or(b','))
                .from_reader(reader);
            let mut first = true;
            for record in rdr.records() {
                let record = match record {
                    Ok(r) => r,
                    Err(e) if e.is_io_error() => match e.into_kind() {
                        csv::ErrorKind::Io(io) => return Err(io_err(io)),
                        _ => unreachable!(),
                    },
                    Err(_) => {
                        lines += 1;
                        malformed += 1;
                        continue;
                    }
                };
                let is_first = std::mem::take(&mut first);
                if record.iter().all(|f| f.trim().is_empty()) {
                    continue;
                }
                let fields: Vec<&str> = record.iter().collect();
                if is_first {
                    let skip = match descriptor.header {
                        HeaderMode::Present => true,
                        HeaderMode::Absent => false,
                        HeaderMode::Auto => fields
                            .get(2)
                            .is_none_or(|v| v.trim().parse::<f64>().is_err()),
                    };
                    if skip {
                        continue;
                    }
                }
                lines += 1;
                match parse_fields(&fields) {
                    Some(r) => ratings.push(r),
                    None => malformed += 1,
                }
            }
        }
        format => {
            let mut buf = BufReader::new(reader);
            let mut line = String::new();
            let mut skip_header = format == DatasetFormat::HetrecLastfm;
            loop {
                line.clear();
                if buf.read_line(&mut line).map_err(io_err)? == 0 {
                    break;
                }
                let text = line.trim_end_matches(['\n', '\r']);
                if std::mem::take(&mut skip_header) {
                    continue;
                }
                if text.trim().is_empty() {
                    continue;
                }
                lines += 1;
                let parsed = match format {
                    DatasetFormat::MovieLens100k => {
                        let fields: Vec<&str> = text.split('\t').collect();
                        (fields.len() == 4).then(|| parse_fields(&fields)).flatten()
                    }
                    DatasetFormat::MovieLens1m => {
                        let fields: Vec<&str> = text.split("::").collect();
                        (fields.len() == 4).then(|| parse_fields(&fields)).flatten()
                    }
                    DatasetFormat::HetrecLastfm => {
                        let fields: Vec<&str> = text.split('\t').collect();
                        (fields.len() == 3).then(|| parse_fields(&fields)).flatten()
                    }
                    DatasetFormat::GenericCsv => unreachable!(),
                };
                match parsed {
                    Some(r) => ratings.push(r),
                    None => malformed += 1,
                }
            }
        }
    }
    if lines > 0 && malformed as f64 / lines as f64 > MAX_MALFORMED_FRACTION {
        return Err(DatasetError::FormatMismatch {
            format: descriptor.format,
            malformed,
            lines,
        });
    }
    let (ratings, duplicates) = RatingSet::from_ratings(ratings);
    Ok(LoadedDataset {
        ratings,
        lines,
        malformed,
        duplicates,
    })
}

/// `user, item, value[, timestamp]`; an empty timestamp field means absent.
fn parse_fields<T: Scalar>(fields: &[&str]) -> Option<Rating<T>> {
    if !(3..=4).contains(&fields.len()) {
        return None;
    }
    let value: f64 = fields[2].trim().parse().ok()?;
    let timestamp = match fields.get(3).map(|s| s.trim()) {
        None | Some("") => None,
        Some(ts) => Some(ts.parse::<i64>().ok()?),
    };
    Rating::new(
        fields[0].trim(),
        fields[1].trim(),
        T::from_f64(value)?,
        timestamp,
    )
    .ok()
}

/// A partition of a rating set into training and test ratings.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: RatingSet<T>,
    pub test: RatingSet<T>,
}

fn check_fraction(test_fraction: f64) -> Result<(), SplitError> {
    if test_fraction.is_finite() && test_fraction > 0.0 && test_fraction < 1.0 {
        Ok(())
    } else {
        Err(SplitError::InvalidFraction(test_fraction))
    }
}

/// Sends each rating to the test set independently with probability
/// `test_fraction`.
///
/// The generator is ChaCha8 seeded with `seed`; rating `i` (in set order)
/// goes to test iff the `i`-th uniform `f64` draw is below `test_fraction`.
pub fn split_random<T: Scalar>(
    ratings: &RatingSet<T>,
    test_fraction: f64,
    seed: u64,
) -> Result<Split<T>, SplitError> {
    check_fraction(test_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(ratings.len());
    let mut test = Vec::new();
    for r in ratings {
        if rng.gen::<f64>() < test_fraction {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok(Split {
        train: RatingSet::from_unique(train),
        test: RatingSet::from_unique(test),
    })
}

/// Number of training ratings for a timestamp split: the ceiling of
/// `(1 - test_fraction) * n`, ignoring floating-point noise right at an
/// integer.
pub fn timestamp_train_size(n: usize, test_fraction: f64) -> usize {
    let exact = (1.0 - test_fraction) * n as f64;
    let nearest = exact.round();
    let size = if (exact - nearest).abs() <= 1e-9 * (n.max(1) as f64) {
        nearest
    } else {
        exact.ceil()
    };
    (size.max(0.0) as usize).min(n)
}

/// Orders ratings from oldest to newest (ties keep source order) and puts
/// the oldest ones in the training set.
pub fn split_timestamp<T: Scalar>(
    ratings: &RatingSet<T>,
    test_fraction: f64,
) -> Result<Split<T>, SplitError> {
    check_fraction(test_fraction)?;
    let mut keyed = Vec::with_capacity(ratings.len());
    for (index, r) in ratings.iter().enumerate() {
        let ts = r.timestamp().ok_or_else(|| SplitError::MissingTimestamp {
            index,
            user: r.user().to_owned(),
            item: r.item().to_owned(),
        })?;
        keyed.push((ts, r));
    }
    // stable: equal timestamps keep file order
    keyed.sort_by_key(|(ts, _)| *ts);
    let n_train = timestamp_train_size(keyed.len(), test_fraction);
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(keyed.len() - n_train);
    for (pos, (_, r)) in keyed.into_iter().enumerate() {
        if pos < n_train {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    Ok(Split {
        train: RatingSet::from_unique(train),
        test: RatingSet::from_unique(test),
    })
}

/// Items the user rated strictly above the threshold.
pub fn positive_items<'a, T: Scalar>(
    ratings: &'a RatingSet<T>,
    user: &str,
    threshold: T,
) -> HashSet<&'a str> {
    ratings
        .iter()
        .filter(|r| r.user() == user && r.is_positive(threshold))
        .map(|r| r.item())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(format: DatasetFormat, text: &str) -> Result<LoadedDataset<f64>, DatasetError> {
        parse_dataset(text.as_bytes(), &DatasetDescriptor::new("t", format, "mem"))
    }

    fn r(user: &str, item: &str, value: f64, ts: Option<i64>) -> Rating<f64> {
        Rating::new(user, item, value, ts).unwrap()
    }

    fn set(ratings: Vec<Rating<f64>>) -> RatingSet<f64> {
        RatingSet::from_ratings(ratings).0
    }

    #[test]
    fn movielens_100k_line() {
        let d = parse(DatasetFormat::MovieLens100k, "196\t242\t3\t881250949\n").unwrap();
        assert_eq!(d.ratings.as_slice(), &[r("196", "242", 3.0, Some(881250949))]);
    }

    #[test]
    fn movielens_1m_line() {
        let d = parse(DatasetFormat::MovieLens1m, "1::1193::5::978300760\r\n").unwrap();
        assert_eq!(d.ratings.as_slice(), &[r("1", "1193", 5.0, Some(978300760))]);
    }

    #[test]
    fn hetrec_skips_header_and_has_no_timestamps() {
        let d = parse(
            DatasetFormat::HetrecLastfm,
            "userID\tartistID\tweight\n2\t51\t13883\n",
        )
        .unwrap();
        assert_eq!(d.ratings.as_slice(), &[r("2", "51", 13883.0, None)]);
        assert!(!DatasetDescriptor::new("x", DatasetFormat::HetrecLastfm, "p").has_timestamps);
    }

    #[test]
    fn too_many_malformed_lines_is_a_format_mismatch() {
        // a 1M file read as 100K
        let err = parse(DatasetFormat::MovieLens100k, "1::1193::5::978300760\n").unwrap_err();
        assert!(matches!(err, DatasetError::FormatMismatch { malformed: 1, lines: 1, .. }));
    }

    #[test]
    fn a_few_malformed_lines_are_tolerated() {
        let mut text = String::new();
        for i in 0..200 {
            text.push_str(&format!("{i}\t{i}\t4\t100\n"));
        }
        text.push_str("garbage\n");
        let d = parse(DatasetFormat::MovieLens100k, &text).unwrap();
        assert_eq!(d.ratings.len(), 200);
        assert_eq!(d.malformed, 1);
        assert_eq!(d.lines, 201);
    }

    #[test]
    fn duplicates_are_counted() {
        let d = parse(DatasetFormat::MovieLens100k, "1\t2\t3\t10\n1\t2\t5\t11\n").unwrap();
        assert_eq!(d.duplicates, 1);
        assert_eq!(d.ratings.as_slice(), &[r("1", "2", 5.0, Some(11))]);
    }

    #[test]
    fn generic_csv_header_detection_and_delimiter() {
        let d = parse(DatasetFormat::GenericCsv, "user,item,value,timestamp\na,b,4,\nc,d,1.5,7\n").unwrap();
        assert_eq!(
            d.ratings.as_slice(),
            &[r("a", "b", 4.0, None), r("c", "d", 1.5, Some(7))]
        );
        let mut desc = DatasetDescriptor::generic_csv("t", "mem", false);
        desc.delimiter = ';';
        desc.header = HeaderMode::Absent;
        let d: LoadedDataset<f32> = parse_dataset("x;y;2\n".as_bytes(), &desc).unwrap();
        assert_eq!(d.ratings.as_slice()[0].value(), 2.0f32);
    }

    #[test]
    fn missing_file_is_io_error() {
        let desc = DatasetDescriptor::new("x", DatasetFormat::MovieLens100k, "/nonexistent/u.data");
        assert!(matches!(load_dataset::<f64>(&desc), Err(DatasetError::Io { .. })));
    }

    #[test]
    fn registry_resolves_relative_paths() {
        let text = r#"
            [datasets.ml100k]
            format = "movielens_100k"
            path = "ml-100k/u.data"

            [datasets.lastfm]
            format = "hetrec_lastfm"
            path = "/abs/user_artists.dat"

            [datasets.custom]
            format = "generic_csv"
            path = "c.csv"
            delimiter = ";"
            has_timestamps = true
        "#;
        let reg = DatasetRegistry::parse(text, Path::new("/data")).unwrap();
        assert_eq!(reg.len(), 3);
        assert_eq!(reg.get("ml100k").unwrap().path, Path::new("/data/ml-100k/u.data"));
        assert!(reg.get("ml100k").unwrap().has_timestamps);
        assert!(!reg.get("lastfm").unwrap().has_timestamps);
        let custom = reg.get("custom").unwrap();
        assert_eq!(custom.delimiter, ';');
        assert!(custom.has_timestamps);
    }

    #[test]
    fn registry_rejects_timestamped_hetrec() {
        let text = "[datasets.l]\nformat = \"hetrec_lastfm\"\npath = \"a\"\nhas_timestamps = true\n";
        assert!(DatasetRegistry::parse(text, Path::new(".")).is_err());
    }

    #[test]
    fn timestamp_split_orders_by_time() {
        let ratings = set((1..=10).rev().map(|t| r(&format!("u{t}"), "i", 1.0, Some(t))).collect());
        let s = split_timestamp(&ratings, 0.2).unwrap();
        let train: Vec<i64> = s.train.iter().map(|r| r.timestamp().unwrap()).collect();
        let test: Vec<i64> = s.test.iter().map(|r| r.timestamp().unwrap()).collect();
        assert_eq!(train, (1..=8).collect::<Vec<_>>());
        assert_eq!(test, vec![9, 10]);
    }

    #[test]
    fn timestamp_ties_keep_file_order() {
        let ratings = set((0..4).map(|i| r(&format!("u{i}"), "i", 1.0, Some(5))).collect());
        let s = split_timestamp(&ratings, 0.5).unwrap();
        let train: Vec<&str> = s.train.iter().map(|r| r.user()).collect();
        assert_eq!(train, vec!["u0", "u1"]);
    }

    #[test]
    fn timestamp_split_needs_timestamps() {
        let ratings = set(vec![r("u", "a", 1.0, Some(1)), r("u", "b", 1.0, None)]);
        assert_eq!(
            split_timestamp(&ratings, 0.2),
            Err(SplitError::MissingTimestamp {
                index: 1,
                user: "u".into(),
                item: "b".into()
            })
        );
    }

    #[test]
    fn train_size_is_ceiling() {
        assert_eq!(timestamp_train_size(10, 0.2), 8);
        assert_eq!(timestamp_train_size(10, 0.3), 7);
        assert_eq!(timestamp_train_size(10, 0.25), 8);
        assert_eq!(timestamp_train_size(1, 0.2), 1);
        assert_eq!(timestamp_train_size(0, 0.2), 0);
        assert_eq!(timestamp_train_size(3, 0.5), 2);
    }

    #[test]
    fn invalid_fraction_is_rejected() {
        let ratings = set(vec![r("u", "a", 1.0, Some(1))]);
        assert!(split_random(&ratings, 0.0, 1).is_err());
        assert!(split_random(&ratings, 1.0, 1).is_err());
        assert!(split_timestamp(&ratings, f64::NAN).is_err());
    }

    #[test]
    fn positive_items_is_strict() {
        let ratings = set(vec![
            r("u", "a", 2.0, None),
            r("u", "b", 3.0, None),
            r("u", "c", 4.0, None),
            r("u", "d", 5.0, None),
            r("v", "e", 5.0, None),
        ]);
        assert_eq!(positive_items(&ratings, "u", 3.0), HashSet::from(["c", "d"]));
        assert!(positive_items(&ratings, "nobody", 3.0).is_empty());
        let counts = set(vec![r("u", "a", 1.0, None), r("u", "b", 13883.0, None)]);
        assert_eq!(positive_items(&counts, "u", 0.0).len(), 2);
    }
}
