//! Corpus CSV: one row per app with its store metadata and where to find the
//! APK.
//!
//! Columns: `sha256,package_name,category,downloads,last_update,path_or_remote`.
//! The header row is required. `category`, `downloads` and `last_update` may
//! be empty. `path_or_remote` is a file path (relative paths resolve against
//! the CSV's directory), or `remote` / empty to fetch by hash.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::Deserialize;

pub const CORPUS_COLUMNS: [&str; 6] = ["sha256", "package_name", "category", "downloads", "last_update", "path_or_remote"];

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus line {line}: {reason}")]
    InvalidRow { line: u64, reason: String },
    #[error("corpus header must be {expected:?}, found {found:?}")]
    BadHeader { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    LocalPath(PathBuf),
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusEntry {
    /// Lowercase hex digest; `None` only for ad-hoc single-file analyses.
    pub sha256: Option<String>,
    pub expected_package_name: Option<String>,
    pub category: Option<String>,
    pub downloads: Option<u64>,
    pub last_update: Option<NaiveDate>,
    pub source: Source,
}

impl CorpusEntry {
    /// An entry for a local file with no metadata.
    pub fn local(path: impl Into<PathBuf>) -> Self {
        CorpusEntry {
            sha256: None,
            expected_package_name: None,
            category: None,
            downloads: None,
            last_update: None,
            source: Source::LocalPath(path.into()),
        }
    }
}

/// Whether `s` is 64 hex digits.
pub fn is_sha256_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit())
}

#[derive(Deserialize)]
struct Row {
    sha256: String,
    package_name: String,
    category: String,
    downloads: String,
    last_update: String,
    path_or_remote: String,
}

fn non_empty(s: String) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_string())
}

/// Parses corpus CSV text; relative paths resolve against `base_dir`.
pub fn parse_corpus_str(text: &str, base_dir: &Path) -> Result<Vec<CorpusEntry>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| CorpusError::InvalidRow { line: 1, reason: e.to_string() })?
        .clone();
    if header.iter().ne(CORPUS_COLUMNS) {
        return Err(CorpusError::BadHeader {
            expected: CORPUS_COLUMNS.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let mut out = Vec::new();
    for result in reader.records() {
        let record = result.map_err(|e| CorpusError::InvalidRow {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row: Row = record
            .deserialize(Some(&header))
            .map_err(|e| CorpusError::InvalidRow { line, reason: e.to_string() })?;
        let invalid = |reason: String| CorpusError::InvalidRow { line, reason };
        let sha = row.sha256.to_ascii_lowercase();
        if !is_sha256_hex(&sha) {
            return Err(invalid(format!("sha256 {:?} is not 64 hex digits", row.sha256)));
        }
        let downloads = match non_empty(row.downloads) {
            Some(d) => Some(d.parse::<u64>().map_err(|_| invalid(format!("downloads {d:?} is not an integer")))?),
            None => None,
        };
        let last_update = match non_empty(row.last_update) {
            Some(d) => Some(
                NaiveDate::parse_from_str(&d, "%Y-%m-%d")
                    .map_err(|_| invalid(format!("last_update {d:?} is not a YYYY-MM-DD date")))?,
            ),
            None => None,
        };
        let source = match non_empty(row.path_or_remote) {
            None => Source::Remote,
            Some(s) if s == "remote" => Source::Remote,
            Some(p) => Source::LocalPath(base_dir.join(p)),
        };
        out.push(CorpusEntry {
            sha256: Some(sha),
            expected_package_name: non_empty(row.package_name),
            category: non_empty(row.category),
            downloads,
            last_update,
            source,
        });
    }
    Ok(out)
}

pub fn read_corpus_csv(path: &Path) -> Result<Vec<CorpusEntry>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    parse_corpus_str(&text, path.parent().unwrap_or(Path::new(".")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "sha256,package_name,category,downloads,last_update,path_or_remote\n";

    #[test]
    fn rows() {
        let sha = "AB".repeat(32);
        let text = format!(
            "{HEADER}{sha},com.a,Finance,10000,2020-01-01,apks/a.apk\n{},,,,,remote\n",
            "0".repeat(64)
        );
        let entries = parse_corpus_str(&text, Path::new("/data")).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].sha256.as_deref(), Some("ab".repeat(32).as_str()));
        assert_eq!(entries[0].downloads, Some(10_000));
        assert_eq!(entries[0].last_update, NaiveDate::from_ymd_opt(2020, 1, 1));
        assert_eq!(entries[0].source, Source::LocalPath("/data/apks/a.apk".into()));
        assert_eq!(entries[1].category, None);
        assert_eq!(entries[1].source, Source::Remote);
    }

    #[test]
    fn bad_rows() {
        assert!(matches!(parse_corpus_str("a,b\n", Path::new(".")), Err(CorpusError::BadHeader { .. })));
        let bad_sha = format!("{HEADER}abc,com.a,,,,x.apk\n");
        assert!(matches!(parse_corpus_str(&bad_sha, Path::new(".")), Err(CorpusError::InvalidRow { line: 2, .. })));
        let bad_date = format!("{HEADER}{},com.a,,,2020-13-01,x.apk\n", "0".repeat(64));
        assert!(parse_corpus_str(&bad_date, Path::new(".")).is_err());
        let bad_dl = format!("{HEADER}{},com.a,,10k,,x.apk\n", "0".repeat(64));
        assert!(parse_corpus_str(&bad_dl, Path::new(".")).is_err());
    }
}
