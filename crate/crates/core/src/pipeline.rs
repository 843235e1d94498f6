//! Per-app analysis and corpus runs.
//!
//! [`Analyzer::analyze_apk`] takes APK bytes through digest check, archive
//! index, manifest, DEX parsing, pattern matching and attribution. Every
//! failure ends up in the report status; partial results are dropped.
//! [`run_corpus`] fans entries out over a worker pool and writes one report
//! per app.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::archive::{enumerate_dex, enumerate_native_libs, sha256_digest, ArchiveError, ArchiveIndex};
use crate::attribution::{AttributionPolicy, PackageName};
use crate::corpus::{CorpusEntry, Source};
use crate::deadline::{Deadline, Expired};
use crate::dex::{parse_dex_until, DexError};
use crate::exec::{default_workers, map_items, ExecMode};
use crate::fetch::{FetchConfig, Fetcher};
use crate::manifest::{extract_manifest_info, parse_binary_xml, ManifestError};
use crate::matching::{attribute, match_native_libs, CryptoMatcher, TeeMatcher};
use crate::patterns::{PatternBundle, PatternError};
use crate::report::{read_report, report_path, write_report_atomic, AppReport, PackageCheck, ReportMeta, Status, Timing};

pub const DEFAULT_TIMEOUT_SECONDS: u64 = 900;
pub const MANIFEST_ENTRY: &str = "AndroidManifest.xml";
pub const RUN_LOG: &str = "run.log";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("timeout must be at least 1 second")]
    InvalidTimeout,
    #[error("worker count must be at least 1")]
    InvalidWorkers,
    #[error(transparent)]
    Patterns(#[from] PatternError),
    #[error("cannot read known prefixes {path}: {source}")]
    KnownPrefixes {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot set up fetching: {0}")]
    Fetch(String),
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("cannot write {path}: {source}")]
    FatalIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct AnalysisConfig {
    pub timeout_seconds: u64,
    pub worker_count: usize,
    /// Pattern directory; builtin patterns when `None`.
    pub patterns_dir: Option<PathBuf>,
    /// Overrides the known prefix list of the pattern directory.
    pub known_prefixes: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub proguard_as_main: bool,
    /// Re-analyze entries whose report already has status ok.
    pub force: bool,
    pub exec_mode: ExecMode,
    pub fetch: Option<FetchConfig>,
}

impl AnalysisConfig {
    pub fn new(output_dir: impl Into<PathBuf>) -> Self {
        AnalysisConfig {
            timeout_seconds: DEFAULT_TIMEOUT_SECONDS,
            worker_count: default_workers(),
            patterns_dir: None,
            known_prefixes: None,
            output_dir: output_dir.into(),
            proguard_as_main: true,
            force: false,
            exec_mode: ExecMode::default(),
            fetch: None,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.timeout_seconds == 0 {
            return Err(ConfigError::InvalidTimeout);
        }
        if self.worker_count == 0 {
            return Err(ConfigError::InvalidWorkers);
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_seconds)
    }

    pub fn policy(&self) -> AttributionPolicy {
        AttributionPolicy { proguard_as_main: self.proguard_as_main }
    }
}

enum Failure {
    Timeout,
    Error(String),
}

impl From<Expired> for Failure {
    fn from(_: Expired) -> Self {
        Failure::Timeout
    }
}

impl From<ArchiveError> for Failure {
    fn from(e: ArchiveError) -> Self {
        match e {
            ArchiveError::DeadlineExceeded => Failure::Timeout,
            other => Failure::Error(other.to_string()),
        }
    }
}

impl From<DexError> for Failure {
    fn from(e: DexError) -> Self {
        match e {
            DexError::DeadlineExceeded => Failure::Timeout,
            other => Failure::Error(other.to_string()),
        }
    }
}

impl From<ManifestError> for Failure {
    fn from(e: ManifestError) -> Self {
        Failure::Error(e.to_string())
    }
}

/// Accumulated wall time per stage.
#[derive(Default)]
struct StageClock {
    stages: BTreeMap<String, f64>,
}

impl StageClock {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        *self.stages.entry(name.to_string()).or_default() += start.elapsed().as_secs_f64();
        out
    }
}

/// Immutable analysis context shared by all workers.
pub struct Analyzer {
    config: AnalysisConfig,
    patterns: PatternBundle,
    tee: TeeMatcher,
    crypto: CryptoMatcher,
    fetcher: Option<Fetcher>,
}

impl Analyzer {
    pub fn new(config: AnalysisConfig, patterns: PatternBundle) -> Result<Self, ConfigError> {
        config.validate()?;
        let fetcher = match &config.fetch {
            Some(f) => Some(Fetcher::new(f.clone(), config.timeout()).map_err(|e| ConfigError::Fetch(e.to_string()))?),
            None => None,
        };
        Ok(Analyzer {
            tee: TeeMatcher::new(&patterns.tee),
            crypto: CryptoMatcher::new(&patterns.crypto),
            patterns,
            config,
            fetcher,
        })
    }

    /// Loads the patterns named by the config, or the builtin ones.
    pub fn from_config(config: AnalysisConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut patterns = match &config.patterns_dir {
            Some(dir) => PatternBundle::load_dir(dir)?,
            None => PatternBundle::builtin(),
        };
        if let Some(path) = &config.known_prefixes {
            patterns.known_prefixes = crate::attribution::load_known_prefixes(path)
                .map_err(|source| ConfigError::KnownPrefixes { path: path.clone(), source })?;
        }
        Analyzer::new(config, patterns)
    }

    pub fn config(&self) -> &AnalysisConfig {
        &self.config
    }

    pub fn patterns(&self) -> &PatternBundle {
        &self.patterns
    }

    /// Analyzes APK bytes under a fresh deadline of the configured timeout.
    pub fn analyze_apk(&self, bytes: &[u8], entry: &CorpusEntry) -> AppReport {
        self.analyze_apk_until(bytes, entry, &Deadline::after(self.config.timeout()), Instant::now())
    }

    /// Analyzes APK bytes under `deadline`; `started` is when the app's work
    /// began and anchors `timing.total_seconds`.
    pub fn analyze_apk_until(&self, bytes: &[u8], entry: &CorpusEntry, deadline: &Deadline, started: Instant) -> AppReport {
        let mut clock = StageClock::default();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| self.run_stages(bytes, entry, deadline, &mut clock)));
        let mut report = match outcome {
            Ok(Ok(report)) => report,
            Ok(Err(failure)) => self.failure_report(entry, Some(bytes), failure),
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_default();
                self.failure_report(entry, Some(bytes), Failure::Error(format!("internal error: {msg}")))
            }
        };
        report.timing = Timing { total_seconds: started.elapsed().as_secs_f64(), stages: clock.stages };
        report
    }

    fn failure_report(&self, entry: &CorpusEntry, bytes: Option<&[u8]>, failure: Failure) -> AppReport {
        let sha = entry
            .sha256
            .clone()
            .or_else(|| bytes.map(sha256_digest))
            .unwrap_or_default();
        let (status, message) = match failure {
            Failure::Timeout => (Status::Timeout, format!("analysis exceeded the {}s deadline", self.config.timeout_seconds)),
            Failure::Error(m) => (Status::Error, m),
        };
        AppReport::failed(&sha, entry.expected_package_name.as_deref(), status, message)
    }

    fn run_stages(
        &self,
        bytes: &[u8],
        entry: &CorpusEntry,
        deadline: &Deadline,
        clock: &mut StageClock,
    ) -> Result<AppReport, Failure> {
        deadline.check()?;
        let digest = clock.stage("digest", || sha256_digest(bytes));
        if let Some(expected) = &entry.sha256 {
            if !expected.eq_ignore_ascii_case(&digest) {
                return Err(Failure::Error(format!("hash mismatch: expected {expected}, got {digest}")));
            }
        }
        deadline.check()?;
        let index = clock.stage("archive", || ArchiveIndex::open(bytes))?;
        deadline.check()?;
        let manifest = clock.stage("manifest", || -> Result<_, Failure> {
            let raw = index.read_entry_until(MANIFEST_ENTRY, deadline)?;
            Ok(extract_manifest_info(&parse_binary_xml(&raw)?)?)
        })?;
        deadline.check()?;

        let dex_files = enumerate_dex(&index);
        let mut matches = Vec::new();
        let mut software: BTreeMap<String, crate::report::SoftwareLibHits> = BTreeMap::new();
        for name in &dex_files {
            let unit = clock.stage("dex", || -> Result<_, Failure> {
                let raw = index.read_entry_until(name, deadline)?;
                Ok(parse_dex_until(&raw, name, deadline)?)
            })?;
            deadline.check()?;
            clock.stage("matching", || {
                matches.extend(self.tee.match_invocations(&unit.invocations));
                for r in self.crypto.match_unit(&unit) {
                    let hits = software.entry(r.detector).or_default();
                    if r.caller_class.is_empty() {
                        hits.references += 1;
                    } else {
                        hits.invocations += 1;
                    }
                }
            });
            deadline.check()?;
        }
        let native_libs =
            clock.stage("native", || match_native_libs(&enumerate_native_libs(&index), &self.patterns.native));
        let app_pkg = PackageName::parse(&manifest.package_name);
        clock.stage("attribution", || attribute(&mut matches, &app_pkg, self.config.policy()));
        deadline.check()?;

        let sha256 = entry.sha256.clone().unwrap_or(digest);
        let mut report = AppReport {
            meta: ReportMeta {
                package_check: entry
                    .expected_package_name
                    .as_deref()
                    .map(|expected| PackageCheck::compare(&manifest.package_name, expected)),
                package: Some(manifest.package_name),
                expected_package: entry.expected_package_name.clone(),
                sha256,
                status: Status::Ok,
                message: None,
                permissions: manifest.permissions,
                min_sdk: manifest.min_sdk,
                dex_files,
                detectors: BTreeMap::new(),
            },
            matches,
            native_libs,
            crypto_libs: crate::report::CryptoLibs { software, native: Vec::new() },
            timing: Timing::default(),
        };
        report.refresh_summaries();
        Ok(report)
    }

    /// Reads or downloads the entry's APK and analyzes it. The deadline
    /// covers the download as well.
    pub fn analyze_entry(&self, entry: &CorpusEntry) -> AppReport {
        let started = Instant::now();
        let deadline = Deadline::after(self.config.timeout());
        let load_start = Instant::now();
        let (stage, loaded) = match &entry.source {
            Source::LocalPath(path) => {
                ("read", fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display())))
            }
            Source::Remote => ("fetch", self.fetch(entry)),
        };
        let load_seconds = load_start.elapsed().as_secs_f64();
        let mut report = match loaded {
            Ok(bytes) => self.analyze_apk_until(&bytes, entry, &deadline, started),
            Err(message) => {
                let mut r = self.failure_report(entry, None, Failure::Error(message));
                r.timing.total_seconds = started.elapsed().as_secs_f64();
                r
            }
        };
        report.timing.stages.insert(stage.to_string(), load_seconds);
        report
    }

    fn fetch(&self, entry: &CorpusEntry) -> Result<Vec<u8>, String> {
        let sha = entry.sha256.as_deref().ok_or("remote entry without sha256")?;
        let fetcher = self.fetcher.as_ref().ok_or("remote entry but no fetch endpoint configured")?;
        fetcher.fetch(sha).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    /// Entries analyzed in this run.
    pub analyzed: usize,
    /// Entries skipped because an ok report already existed.
    pub skipped: usize,
    pub ok: usize,
    pub timeout: usize,
    pub error: usize,
}

impl RunSummary {
    fn add(&mut self, status: Status) {
        self.analyzed += 1;
        match status {
            Status::Ok => self.ok += 1,
            Status::Timeout => self.timeout += 1,
            Status::Error => self.error += 1,
        }
    }
}

/// Append-only log with one tab-separated line per analyzed app.
struct RunLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl RunLog {
    fn open(path: PathBuf) -> Result<Self, PipelineError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| PipelineError::FatalIo { path: path.clone(), source })?;
        Ok(RunLog { path, file: Mutex::new(file) })
    }

    fn append(&self, report: &AppReport) -> Result<(), PipelineError> {
        let line = format!(
            "{}\t{}\t{}\t{:.3}\t{}\n",
            chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            report.meta.sha256,
            report.meta.status.as_str(),
            report.timing.total_seconds,
            report.meta.message.as_deref().unwrap_or("").replace(['\t', '\n'], " "),
        );
        let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
        file.write_all(line.as_bytes())
            .map_err(|source| PipelineError::FatalIo { path: self.path.clone(), source })
    }
}

fn has_ok_report(dir: &Path, sha256: &str) -> bool {
    read_report(&report_path(dir, sha256)).is_ok_and(|r| r.is_ok())
}

enum Outcome {
    Skipped,
    Done(Status),
}

/// Analyzes every entry and writes `<sha256>.json` reports into the
/// configured output directory. Entries with an existing ok report are
/// skipped unless `force` is set. Only output I/O failures abort the run.
pub fn run_corpus(entries: &[CorpusEntry], analyzer: &Analyzer) -> Result<RunSummary, PipelineError> {
    let config = analyzer.config();
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|source| PipelineError::FatalIo { path: out.clone(), source })?;
    let log = RunLog::open(out.join(RUN_LOG))?;
    let results = map_items(entries, config.exec_mode, config.worker_count, |entry| {
        if !config.force {
            if let Some(sha) = &entry.sha256 {
                if has_ok_report(out, sha) {
                    return Ok(Outcome::Skipped);
                }
            }
        }
        let report = analyzer.analyze_entry(entry);
        write_report_atomic(out, &report).map_err(|source| PipelineError::FatalIo {
            path: report_path(out, &report.meta.sha256),
            source,
        })?;
        log.append(&report)?;
        log::info!("{} {}", report.meta.sha256, report.meta.status.as_str());
        Ok(Outcome::Done(report.meta.status))
    });
    let mut summary = RunSummary::default();
    for r in results {
        match r? {
            Outcome::Skipped => summary.skipped += 1,
            Outcome::Done(status) => summary.add(status),
        }
    }
    Ok(summary)
}
