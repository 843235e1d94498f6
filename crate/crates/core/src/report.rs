//! Per-app report documents.
//!
//! A report is one JSON object with the keys `meta`, `matches`,
//! `native_libs`, `crypto_libs` and `timing`. Everything except `timing` is a
//! pure function of the APK bytes, the corpus row and the pattern set, so
//! [`AppReport::deterministic_json`] can be compared byte for byte across runs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::PackageName;
use crate::matching::{MatchRecord, NativeHit};
use crate::patterns::TeeApi;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Timeout,
    Error,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Timeout => "timeout",
            Status::Error => "error",
        }
    }
}

/// How the manifest package relates to the package name listed in the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackageCheck {
    Exact,
    /// One name is a whole-segment prefix of the other.
    SharedPrefix,
    Mismatch,
}

impl PackageCheck {
    pub fn compare(manifest: &str, expected: &str) -> Self {
        if manifest == expected {
            return PackageCheck::Exact;
        }
        let (a, b) = (PackageName::parse(manifest), PackageName::parse(expected));
        if a.starts_with(&b) || b.starts_with(&a) {
            PackageCheck::SharedPrefix
        } else {
            PackageCheck::Mismatch
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportMeta {
    /// Package name from the manifest.
    pub package: Option<String>,
    /// Package name from the corpus row.
    pub expected_package: Option<String>,
    pub sha256: String,
    pub status: Status,
    pub message: Option<String>,
    pub package_check: Option<PackageCheck>,
    pub permissions: Vec<String>,
    pub min_sdk: Option<i64>,
    pub dex_files: Vec<String>,
    /// Whether each TEE detector has at least one match.
    pub detectors: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftwareLibHits {
    /// Matching invokes.
    pub invocations: usize,
    /// Matching `method_ids` entries that no invoke uses.
    pub references: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CryptoLibs {
    pub software: BTreeMap<String, SoftwareLibHits>,
    /// Libraries with at least one entry in `native_libs`.
    pub native: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub stages: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppReport {
    pub meta: ReportMeta,
    pub matches: Vec<MatchRecord>,
    pub native_libs: Vec<NativeHit>,
    pub crypto_libs: CryptoLibs,
    pub timing: Timing,
}

#[derive(Serialize)]
struct DeterministicView<'a> {
    meta: &'a ReportMeta,
    matches: &'a [MatchRecord],
    native_libs: &'a [NativeHit],
    crypto_libs: &'a CryptoLibs,
}

fn no_detectors() -> BTreeMap<String, bool> {
    TeeApi::ALL.iter().map(|a| (a.as_str().to_string(), false)).collect()
}

impl AppReport {
    /// A report carrying only a failure status.
    pub fn failed(sha256: &str, expected_package: Option<&str>, status: Status, message: impl Into<String>) -> Self {
        AppReport {
            meta: ReportMeta {
                package: None,
                expected_package: expected_package.map(str::to_string),
                sha256: sha256.to_string(),
                status,
                message: Some(message.into()),
                package_check: None,
                permissions: Vec::new(),
                min_sdk: None,
                dex_files: Vec::new(),
                detectors: no_detectors(),
            },
            matches: Vec::new(),
            native_libs: Vec::new(),
            crypto_libs: CryptoLibs::default(),
            timing: Timing::default(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.meta.status == Status::Ok
    }

    /// Whether any match carries this detector id.
    pub fn has_detector(&self, detector: &str) -> bool {
        self.matches.iter().any(|m| m.detector == detector)
    }

    /// Recomputes `meta.detectors` and `crypto_libs.native` from the match
    /// lists.
    pub fn refresh_summaries(&mut self) {
        let mut detectors = no_detectors();
        for m in &self.matches {
            detectors.insert(m.detector.clone(), true);
        }
        self.meta.detectors = detectors;
        let mut native: Vec<String> = self.native_libs.iter().map(|h| h.library.clone()).collect();
        native.sort();
        native.dedup();
        self.crypto_libs.native = native;
    }

    /// Pretty JSON of the whole report.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Compact JSON without `timing`.
    pub fn deterministic_json(&self) -> String {
        serde_json::to_string(&DeterministicView {
            meta: &self.meta,
            matches: &self.matches,
            native_libs: &self.native_libs,
            crypto_libs: &self.crypto_libs,
        })
        .expect("report serializes")
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

pub fn report_path(dir: &Path, sha256: &str) -> PathBuf {
    dir.join(format!("{sha256}.json"))
}

/// Writes `<dir>/<sha256>.json` through a temporary file and a rename, so
/// readers never observe a partial document.
pub fn write_report_atomic(dir: &Path, report: &AppReport) -> std::io::Result<PathBuf> {
    let target = report_path(dir, &report.meta.sha256);
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(report.to_json().as_bytes())?;
    tmp.write_all(b"\n")?;
    tmp.as_file().sync_all()?;
    tmp.persist(&target).map_err(|e| e.error)?;
    Ok(target)
}

pub fn read_report(path: &Path) -> std::io::Result<AppReport> {
    let text = fs::read_to_string(path)?;
    AppReport::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn package_checks() {
        assert_eq!(PackageCheck::compare("com.package", "com.package"), PackageCheck::Exact);
        assert_eq!(PackageCheck::compare("com.package.xyz", "com.package"), PackageCheck::SharedPrefix);
        assert_eq!(PackageCheck::compare("com.package", "com.package.xyz"), PackageCheck::SharedPrefix);
        assert_eq!(PackageCheck::compare("com.packagexyz", "com.package"), PackageCheck::Mismatch);
    }

    #[test]
    fn top_level_keys() {
        let r = AppReport::failed(&"a".repeat(64), None, Status::Error, "hash mismatch");
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["crypto_libs", "matches", "meta", "native_libs", "timing"]);
        assert_eq!(v["meta"]["status"], "error");
        assert_eq!(v["meta"]["message"], "hash mismatch");
        assert!(!r.deterministic_json().contains("timing"));
    }

    #[test]
    fn atomic_write_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = AppReport::failed(&"b".repeat(64), Some("com.x"), Status::Timeout, "deadline");
        r.timing.total_seconds = 1.5;
        let path = write_report_atomic(dir.path(), &r).unwrap();
        assert_eq!(path.file_name().unwrap().to_str().unwrap(), format!("{}.json", "b".repeat(64)));
        assert_eq!(read_report(&path).unwrap(), r);
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }
}
