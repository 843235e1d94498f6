//! Corpus statistics over a directory of reports joined with corpus
//! metadata.
//!
//! Only reports with status ok contribute to match statistics; failed
//! reports count towards the totals. Shares are fractions in `[0, 1]` and are
//! 0 when their denominator is 0.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::Serialize;

use crate::attribution::{normalize_library, LocationClass, PackageName};
use crate::corpus::{read_corpus_csv, CorpusEntry, CorpusError};
use crate::exec::{map_items, ExecMode};
use crate::patterns::TeeApi;
use crate::report::{read_report, AppReport, PackageCheck, Status};

const BUILTIN_GAME_CATEGORIES: &str = include_str!("../data/game_categories.txt");

pub const DEFAULT_MIN_DOWNLOADS: u64 = 10_000;
pub const DEFAULT_TOP_N: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum AggregateError {
    #[error("cannot read {path}: {source}")]
    IoError {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sha256 {0} appears more than once")]
    DuplicateSha256(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("report {path}: {reason}")]
    BadReport { path: PathBuf, reason: String },
}

pub fn default_min_last_update() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date")
}

/// One category per line; `#` starts a comment line.
pub fn parse_category_list(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

pub fn builtin_game_categories() -> BTreeSet<String> {
    parse_category_list(BUILTIN_GAME_CATEGORIES)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SelectionFilter {
    pub min_downloads: u64,
    pub min_last_update: NaiveDate,
    pub excluded_categories: BTreeSet<String>,
}

impl SelectionFilter {
    /// At least 10,000 downloads, updated on or after 2020-01-01, no game
    /// categories.
    pub fn defaults() -> Self {
        SelectionFilter {
            min_downloads: DEFAULT_MIN_DOWNLOADS,
            min_last_update: default_min_last_update(),
            excluded_categories: builtin_game_categories(),
        }
    }

    /// Keeps everything.
    pub fn none() -> Self {
        SelectionFilter { min_downloads: 0, min_last_update: NaiveDate::MIN, excluded_categories: BTreeSet::new() }
    }

    /// Whether a record passes. Missing metadata fields do not exclude.
    pub fn keeps(&self, record: &AppRecord) -> bool {
        record.downloads.is_none_or(|d| d >= self.min_downloads)
            && record.last_update.is_none_or(|d| d >= self.min_last_update)
            && record.category.as_ref().is_none_or(|c| !self.excluded_categories.contains(c))
    }
}

/// The facts of one match that statistics need.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchFacts {
    pub detector: String,
    pub location: LocationClass,
    pub package: PackageName,
}

/// One app: report essentials plus its corpus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct AppRecord {
    pub sha256: String,
    pub status: Status,
    pub has_metadata: bool,
    pub category: Option<String>,
    pub downloads: Option<u64>,
    pub last_update: Option<NaiveDate>,
    pub package_check: Option<PackageCheck>,
    pub total_seconds: f64,
    pub matches: Vec<MatchFacts>,
    pub software_libs: BTreeSet<String>,
    pub native_libs: BTreeSet<String>,
}

impl AppRecord {
    pub fn from_report(report: &AppReport, metadata: Option<&CorpusEntry>) -> Result<Self, String> {
        let mut matches = Vec::with_capacity(report.matches.len());
        for m in &report.matches {
            let location = m.location.ok_or_else(|| format!("match at {}:{} has no location", m.dex_file, m.code_offset))?;
            let package = PackageName::parse(m.attributed_package.as_deref().unwrap_or(""));
            matches.push(MatchFacts { detector: m.detector.clone(), location, package });
        }
        Ok(AppRecord {
            sha256: report.meta.sha256.clone(),
            status: report.meta.status,
            has_metadata: metadata.is_some(),
            category: metadata.and_then(|m| m.category.clone()),
            downloads: metadata.and_then(|m| m.downloads),
            last_update: metadata.and_then(|m| m.last_update),
            package_check: report.meta.package_check,
            total_seconds: report.timing.total_seconds,
            matches,
            software_libs: report.crypto_libs.software.keys().cloned().collect(),
            native_libs: report.native_libs.iter().map(|h| h.library.clone()).collect(),
        })
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    fn has(&self, detector: &str) -> bool {
        self.matches.iter().any(|m| m.detector == detector)
    }

    fn has_at(&self, detector: &str, location: LocationClass) -> bool {
        self.matches.iter().any(|m| m.detector == detector && m.location == location)
    }

    fn any_at(&self, location: LocationClass) -> bool {
        self.matches.iter().any(|m| m.location == location)
    }
}

/// Reports joined with corpus metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub records: Vec<AppRecord>,
    /// Metadata rows for which no report exists.
    pub metadata_without_report: usize,
}

impl Corpus {
    pub fn ok_records(&self) -> impl Iterator<Item = &AppRecord> {
        self.records.iter().filter(|r| r.is_ok())
    }
}

/// Joins reports and metadata rows on sha256.
pub fn join(reports: &[AppReport], metadata: &[CorpusEntry]) -> Result<Corpus, AggregateError> {
    let mut by_sha: HashMap<&str, &CorpusEntry> = HashMap::new();
    for entry in metadata {
        let sha = entry.sha256.as_deref().unwrap_or("");
        if by_sha.insert(sha, entry).is_some() {
            return Err(AggregateError::DuplicateSha256(sha.to_string()));
        }
    }
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut records = Vec::with_capacity(reports.len());
    for report in reports {
        let sha = report.meta.sha256.as_str();
        if !seen.insert(sha) {
            return Err(AggregateError::DuplicateSha256(sha.to_string()));
        }
        let record = AppRecord::from_report(report, by_sha.get(sha).copied())
            .map_err(|reason| AggregateError::BadReport { path: PathBuf::from(format!("{sha}.json")), reason })?;
        records.push(record);
    }
    records.sort_by(|a, b| a.sha256.cmp(&b.sha256));
    let metadata_without_report = by_sha.keys().filter(|s| !seen.contains(*s)).count();
    Ok(Corpus { records, metadata_without_report })
}

/// Reads every `*.json` report in `report_dir`.
pub fn read_reports(report_dir: &Path, mode: ExecMode, workers: usize) -> Result<Vec<AppReport>, AggregateError> {
    let listing = fs::read_dir(report_dir)
        .map_err(|source| AggregateError::IoError { path: report_dir.to_path_buf(), source })?;
    let mut paths: Vec<PathBuf> = listing
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json") && p.is_file())
        .collect();
    paths.sort();
    map_items(&paths, mode, workers, |p| {
        read_report(p).map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => AggregateError::BadReport { path: p.clone(), reason: e.to_string() },
            _ => AggregateError::IoError { path: p.clone(), source: e },
        })
    })
    .into_iter()
    .collect()
}

pub fn load_corpus(report_dir: &Path, corpus_csv: &Path) -> Result<Corpus, AggregateError> {
    let reports = read_reports(report_dir, ExecMode::default(), crate::exec::default_workers())?;
    let metadata = read_corpus_csv(corpus_csv)?;
    join(&reports, &metadata)
}

pub fn apply_filter(corpus: &Corpus, filter: &SelectionFilter) -> Corpus {
    Corpus {
        records: corpus.records.iter().filter(|r| filter.keeps(r)).cloned().collect(),
        metadata_without_report: corpus.metadata_without_report,
    }
}

fn share(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len().is_multiple_of(2) {
        (values[mid - 1] + values[mid]) / 2.0
    } else {
        values[mid]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Totals {
    pub analyzed: usize,
    pub ok: usize,
    pub failed: usize,
    pub timeout: usize,
    pub error: usize,
    pub without_metadata: usize,
}

pub fn totals(corpus: &Corpus) -> Totals {
    let mut t = Totals { analyzed: corpus.records.len(), ..Totals::default() };
    for r in &corpus.records {
        match r.status {
            Status::Ok => t.ok += 1,
            Status::Timeout => t.timeout += 1,
            Status::Error => t.error += 1,
        }
        if !r.has_metadata {
            t.without_metadata += 1;
        }
    }
    t.failed = t.timeout + t.error;
    t
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CountShare {
    pub apps: usize,
    pub share: f64,
}

impl CountShare {
    fn new(apps: usize, of: usize) -> Self {
        CountShare { apps, share: share(apps, of) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prevalence {
    pub ok_apps: usize,
    pub per_detector: BTreeMap<String, CountShare>,
    pub any: CountShare,
    pub none: CountShare,
    pub all_four: CountShare,
    pub all_except_protected_confirmation: CountShare,
}

pub fn api_prevalence(corpus: &Corpus) -> Prevalence {
    let ok: Vec<&AppRecord> = corpus.ok_records().collect();
    let n = ok.len();
    let count = |f: &dyn Fn(&AppRecord) -> bool| ok.iter().filter(|r| f(r)).count();
    let per_detector = TeeApi::ALL
        .iter()
        .map(|d| (d.as_str().to_string(), CountShare::new(count(&|r| r.has(d.as_str())), n)))
        .collect();
    let any = count(&|r| TeeApi::ALL.iter().any(|d| r.has(d.as_str())));
    let without_pc = [TeeApi::Keystore, TeeApi::Drm, TeeApi::Biometrics];
    Prevalence {
        ok_apps: n,
        per_detector,
        any: CountShare::new(any, n),
        none: CountShare::new(n - any, n),
        all_four: CountShare::new(count(&|r| TeeApi::ALL.iter().all(|d| r.has(d.as_str()))), n),
        all_except_protected_confirmation: CountShare::new(
            count(&|r| without_pc.iter().all(|d| r.has(d.as_str()))),
            n,
        ),
    }
}

/// Location statistics for all TEE matches or those of one detector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocationStats {
    /// `all` or a detector id.
    pub scope: String,
    pub matches: usize,
    pub inmain_matches: usize,
    pub inlib_matches: usize,
    pub obfuscated_matches: usize,
    pub inlib_match_share: f64,
    pub ok_apps: usize,
    /// Ok apps with at least one match in scope.
    pub matched_apps: usize,
    pub apps_with_inlib: usize,
    pub apps_with_inmain: usize,
    pub apps_inmain_only: usize,
    pub apps_with_obfuscated: usize,
    pub apps_with_inlib_share_of_matched: f64,
    pub apps_with_inmain_share_of_matched: f64,
    pub apps_inmain_only_share_of_matched: f64,
    pub apps_with_obfuscated_share_of_matched: f64,
    pub apps_with_inlib_share_of_ok: f64,
    pub apps_with_inmain_share_of_ok: f64,
    /// Distinct libraries with inlib matches per app, over apps with at least
    /// one inlib match.
    pub libs_per_app_mean: f64,
    pub libs_per_app_median: f64,
}

fn location_stats(corpus: &Corpus, scope: Option<&str>, known: &[PackageName]) -> LocationStats {
    let mut s = LocationStats {
        scope: scope.unwrap_or("all").to_string(),
        matches: 0,
        inmain_matches: 0,
        inlib_matches: 0,
        obfuscated_matches: 0,
        inlib_match_share: 0.0,
        ok_apps: 0,
        matched_apps: 0,
        apps_with_inlib: 0,
        apps_with_inmain: 0,
        apps_inmain_only: 0,
        apps_with_obfuscated: 0,
        apps_with_inlib_share_of_matched: 0.0,
        apps_with_inmain_share_of_matched: 0.0,
        apps_inmain_only_share_of_matched: 0.0,
        apps_with_obfuscated_share_of_matched: 0.0,
        apps_with_inlib_share_of_ok: 0.0,
        apps_with_inmain_share_of_ok: 0.0,
        libs_per_app_mean: 0.0,
        libs_per_app_median: 0.0,
    };
    let mut libs_per_app = Vec::new();
    for r in corpus.ok_records() {
        s.ok_apps += 1;
        let in_scope: Vec<&MatchFacts> =
            r.matches.iter().filter(|m| scope.is_none_or(|d| m.detector == d)).collect();
        if in_scope.is_empty() {
            continue;
        }
        s.matched_apps += 1;
        let mut libs = BTreeSet::new();
        let (mut main, mut lib, mut obf) = (0, 0, 0);
        for m in &in_scope {
            match m.location {
                LocationClass::Inmain => main += 1,
                LocationClass::Inlib => {
                    lib += 1;
                    libs.insert(normalize_library(&m.package, known));
                }
                LocationClass::Obfuscated => obf += 1,
            }
        }
        s.matches += in_scope.len();
        s.inmain_matches += main;
        s.inlib_matches += lib;
        s.obfuscated_matches += obf;
        s.apps_with_inmain += usize::from(main > 0);
        s.apps_with_inlib += usize::from(lib > 0);
        s.apps_with_obfuscated += usize::from(obf > 0);
        s.apps_inmain_only += usize::from(main == in_scope.len());
        if !libs.is_empty() {
            libs_per_app.push(libs.len() as f64);
        }
    }
    s.inlib_match_share = share(s.inlib_matches, s.matches);
    s.apps_with_inlib_share_of_matched = share(s.apps_with_inlib, s.matched_apps);
    s.apps_with_inmain_share_of_matched = share(s.apps_with_inmain, s.matched_apps);
    s.apps_inmain_only_share_of_matched = share(s.apps_inmain_only, s.matched_apps);
    s.apps_with_obfuscated_share_of_matched = share(s.apps_with_obfuscated, s.matched_apps);
    s.apps_with_inlib_share_of_ok = share(s.apps_with_inlib, s.ok_apps);
    s.apps_with_inmain_share_of_ok = share(s.apps_with_inmain, s.ok_apps);
    if !libs_per_app.is_empty() {
        s.libs_per_app_mean = libs_per_app.iter().sum::<f64>() / libs_per_app.len() as f64;
        s.libs_per_app_median = median(&mut libs_per_app);
    }
    s
}

/// Location statistics for all matches, then for each TEE detector.
pub fn location_split(corpus: &Corpus, known_prefixes: &[PackageName]) -> Vec<LocationStats> {
    std::iter::once(None)
        .chain(TeeApi::ALL.iter().map(|d| Some(d.as_str())))
        .map(|scope| location_stats(corpus, scope, known_prefixes))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopLibraries {
    pub detector: String,
    /// `(library, apps)`, most apps first, ties by library name.
    pub rows: Vec<(String, usize)>,
    /// Libraries with at least one inlib match for the detector.
    pub distinct_libraries: usize,
}

pub fn top_libraries(corpus: &Corpus, detector: &str, n: usize, known_prefixes: &[PackageName]) -> TopLibraries {
    let mut apps: BTreeMap<String, usize> = BTreeMap::new();
    for r in corpus.ok_records() {
        let libs: BTreeSet<String> = r
            .matches
            .iter()
            .filter(|m| m.detector == detector && m.location == LocationClass::Inlib)
            .map(|m| normalize_library(&m.package, known_prefixes))
            .collect();
        for lib in libs {
            *apps.entry(lib).or_default() += 1;
        }
    }
    let distinct_libraries = apps.len();
    let mut rows: Vec<(String, usize)> = apps.into_iter().collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    rows.truncate(n.max(1));
    TopLibraries { detector: detector.to_string(), rows, distinct_libraries }
}

/// Which matches and which denominator a category breakdown uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CategoryScope {
    /// Any match; shares over the category's ok apps.
    All,
    /// Inmain matches only; shares over the category's ok apps with at least
    /// one inmain match.
    Inmain,
}

impl CategoryScope {
    pub fn as_str(self) -> &'static str {
        match self {
            CategoryScope::All => "all",
            CategoryScope::Inmain => "inmain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryRow {
    pub category: String,
    /// Denominator of the shares.
    pub apps: usize,
    /// Apps per detector, in [`TeeApi::ALL`] order.
    pub matched: [usize; 4],
}

impl CategoryRow {
    pub fn share(&self, i: usize) -> f64 {
        share(self.matched[i], self.apps)
    }
}

pub fn category_breakdown(corpus: &Corpus, scope: CategoryScope) -> Vec<CategoryRow> {
    let mut rows: BTreeMap<&str, CategoryRow> = BTreeMap::new();
    for r in corpus.ok_records() {
        let Some(category) = r.category.as_deref() else { continue };
        if scope == CategoryScope::Inmain && !r.any_at(LocationClass::Inmain) {
            continue;
        }
        let row = rows
            .entry(category)
            .or_insert_with(|| CategoryRow { category: category.to_string(), apps: 0, matched: [0; 4] });
        row.apps += 1;
        for (i, d) in TeeApi::ALL.iter().enumerate() {
            let hit = match scope {
                CategoryScope::All => r.has(d.as_str()),
                CategoryScope::Inmain => r.has_at(d.as_str(), LocationClass::Inmain),
            };
            row.matched[i] += usize::from(hit);
        }
    }
    rows.into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CryptoTable {
    pub ok_apps: usize,
    pub software: Vec<(String, usize)>,
    pub native: Vec<(String, usize)>,
    pub any_software: usize,
    pub any_native: usize,
}

/// Apps per library. Every name in `software_names` and `native_names` gets
/// a row, also with zero apps; libraries found in reports but not named are
/// appended.
pub fn crypto_table(corpus: &Corpus, software_names: &[String], native_names: &[String]) -> CryptoTable {
    fn count(rows: &mut Vec<(String, usize)>, lib: &str) {
        match rows.iter_mut().find(|(l, _)| l == lib) {
            Some(row) => row.1 += 1,
            None => rows.push((lib.to_string(), 1)),
        }
    }
    let names = |list: &[String]| {
        let mut rows: Vec<(String, usize)> = Vec::new();
        for n in list {
            if !rows.iter().any(|(l, _)| l == n) {
                rows.push((n.clone(), 0));
            }
        }
        rows
    };
    let mut t = CryptoTable {
        ok_apps: 0,
        software: names(software_names),
        native: names(native_names),
        any_software: 0,
        any_native: 0,
    };
    for r in corpus.ok_records() {
        t.ok_apps += 1;
        for lib in &r.software_libs {
            count(&mut t.software, lib);
        }
        for lib in &r.native_libs {
            count(&mut t.native, lib);
        }
        t.any_software += usize::from(!r.software_libs.is_empty());
        t.any_native += usize::from(!r.native_libs.is_empty());
    }
    t
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DurationStats {
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub median_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PackageCheckCounts {
    pub exact: usize,
    pub shared_prefix: usize,
    pub mismatch: usize,
}

/// Inputs beyond the corpus itself.
#[derive(Debug, Clone)]
pub struct StatsOptions {
    pub known_prefixes: Vec<PackageName>,
    pub top_n: usize,
    pub software_libraries: Vec<String>,
    pub native_libraries: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub totals: Totals,
    pub metadata_without_report: usize,
    pub prevalence: Prevalence,
    pub locations: Vec<LocationStats>,
    /// Among ok apps with an inmain match, the share with an inmain match of
    /// each detector.
    pub inmain_detector_shares: BTreeMap<String, f64>,
    pub top_libraries: Vec<TopLibraries>,
    pub categories: Vec<CategoryRow>,
    pub categories_inmain: Vec<CategoryRow>,
    pub crypto: CryptoTable,
    pub durations: DurationStats,
    pub package_checks: PackageCheckCounts,
}

pub fn compute_stats(corpus: &Corpus, options: &StatsOptions) -> CorpusStats {
    let ok: Vec<&AppRecord> = corpus.ok_records().collect();
    let inmain_apps: Vec<&&AppRecord> = ok.iter().filter(|r| r.any_at(LocationClass::Inmain)).collect();
    let inmain_detector_shares = TeeApi::ALL
        .iter()
        .map(|d| {
            let n = inmain_apps.iter().filter(|r| r.has_at(d.as_str(), LocationClass::Inmain)).count();
            (d.as_str().to_string(), share(n, inmain_apps.len()))
        })
        .collect();
    let mut seconds: Vec<f64> = ok.iter().map(|r| r.total_seconds).collect();
    let durations = DurationStats {
        min_seconds: seconds.iter().copied().reduce(f64::min).unwrap_or(0.0),
        max_seconds: seconds.iter().copied().reduce(f64::max).unwrap_or(0.0),
        median_seconds: median(&mut seconds),
    };
    let mut package_checks = PackageCheckCounts::default();
    for r in &ok {
        match r.package_check {
            Some(PackageCheck::Exact) => package_checks.exact += 1,
            Some(PackageCheck::SharedPrefix) => package_checks.shared_prefix += 1,
            Some(PackageCheck::Mismatch) => package_checks.mismatch += 1,
            None => {}
        }
    }
    CorpusStats {
        totals: totals(corpus),
        metadata_without_report: corpus.metadata_without_report,
        prevalence: api_prevalence(corpus),
        locations: location_split(corpus, &options.known_prefixes),
        inmain_detector_shares,
        top_libraries: TeeApi::ALL
            .iter()
            .map(|d| top_libraries(corpus, d.as_str(), options.top_n, &options.known_prefixes))
            .collect(),
        categories: category_breakdown(corpus, CategoryScope::All),
        categories_inmain: category_breakdown(corpus, CategoryScope::Inmain),
        crypto: crypto_table(corpus, &options.software_libraries, &options.native_libraries),
        durations,
        package_checks,
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, AggregateError> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: csv::Error) -> AggregateError {
    let source = match e.into_kind() {
        csv::ErrorKind::Io(io) => io,
        other => std::io::Error::other(format!("{other:?}")),
    };
    AggregateError::IoError { path: path.to_path_buf(), source }
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), AggregateError> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| io_error(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| io_error(path, e))?;
    }
    w.flush().map_err(|source| AggregateError::IoError { path: path.to_path_buf(), source })
}

pub const PREVALENCE_HEADER: [&str; 3] = ["detector", "apps", "share"];
pub const LOCATIONS_HEADER: [&str; 20] = [
    "scope",
    "matches",
    "inmain_matches",
    "inlib_matches",
    "obfuscated_matches",
    "inlib_match_share",
    "ok_apps",
    "matched_apps",
    "apps_with_inlib",
    "apps_with_inmain",
    "apps_inmain_only",
    "apps_with_obfuscated",
    "apps_with_inlib_share_of_matched",
    "apps_with_inmain_share_of_matched",
    "apps_inmain_only_share_of_matched",
    "apps_with_obfuscated_share_of_matched",
    "apps_with_inlib_share_of_ok",
    "apps_with_inmain_share_of_ok",
    "libs_per_app_mean",
    "libs_per_app_median",
];
pub const TOP_LIBS_HEADER: [&str; 3] = ["rank", "library", "apps"];
pub const CATEGORIES_HEADER: [&str; 7] =
    ["scope", "category", "apps", "keystore", "drm", "biometrics", "protected_confirmation"];
pub const CATEGORIES_LONG_HEADER: [&str; 6] = ["scope", "category", "detector", "apps", "matched_apps", "share"];
pub const CRYPTO_HEADER: [&str; 4] = ["kind", "library", "apps", "share"];

/// Writes `prevalence.csv`, `locations.csv`, `top_libs_<detector>.csv`,
/// `categories.csv`, `categories_long.csv`, `crypto.csv` and `summary.json`.
pub fn write_outputs(stats: &CorpusStats, out_dir: &Path) -> Result<Vec<PathBuf>, AggregateError> {
    fs::create_dir_all(out_dir).map_err(|source| AggregateError::IoError { path: out_dir.to_path_buf(), source })?;
    let mut written = Vec::new();
    let mut emit = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<(), AggregateError> {
        let path = out_dir.join(name);
        write_rows(&path, header, &rows)?;
        written.push(path);
        Ok(())
    };
    let cs = |c: &CountShare| vec![c.apps.to_string(), c.share.to_string()];
    let p = &stats.prevalence;
    let mut rows: Vec<Vec<String>> = p
        .per_detector
        .iter()
        .map(|(d, c)| [vec![d.clone()], cs(c)].concat())
        .collect();
    rows.sort_by_key(|r| TeeApi::ALL.iter().position(|d| d.as_str() == r[0]));
    rows.push([vec!["any".into()], cs(&p.any)].concat());
    rows.push([vec!["none".into()], cs(&p.none)].concat());
    rows.push([vec!["all_four".into()], cs(&p.all_four)].concat());
    rows.push([vec!["all_except_protected_confirmation".into()], cs(&p.all_except_protected_confirmation)].concat());
    emit("prevalence.csv", &PREVALENCE_HEADER, rows)?;

    let rows = stats
        .locations
        .iter()
        .map(|l| {
            vec![
                l.scope.clone(),
                l.matches.to_string(),
                l.inmain_matches.to_string(),
                l.inlib_matches.to_string(),
                l.obfuscated_matches.to_string(),
                l.inlib_match_share.to_string(),
                l.ok_apps.to_string(),
                l.matched_apps.to_string(),
                l.apps_with_inlib.to_string(),
                l.apps_with_inmain.to_string(),
                l.apps_inmain_only.to_string(),
                l.apps_with_obfuscated.to_string(),
                l.apps_with_inlib_share_of_matched.to_string(),
                l.apps_with_inmain_share_of_matched.to_string(),
                l.apps_inmain_only_share_of_matched.to_string(),
                l.apps_with_obfuscated_share_of_matched.to_string(),
                l.apps_with_inlib_share_of_ok.to_string(),
                l.apps_with_inmain_share_of_ok.to_string(),
                l.libs_per_app_mean.to_string(),
                l.libs_per_app_median.to_string(),
            ]
        })
        .collect();
    emit("locations.csv", &LOCATIONS_HEADER, rows)?;

    for top in &stats.top_libraries {
        let rows = top
            .rows
            .iter()
            .enumerate()
            .map(|(i, (lib, apps))| vec![(i + 1).to_string(), lib.clone(), apps.to_string()])
            .collect();
        emit(&format!("top_libs_{}.csv", top.detector), &TOP_LIBS_HEADER, rows)?;
    }

    let scoped = [(CategoryScope::All, &stats.categories), (CategoryScope::Inmain, &stats.categories_inmain)];
    let mut wide = Vec::new();
    let mut long = Vec::new();
    for (scope, cats) in scoped {
        for c in cats.iter() {
            let mut row = vec![scope.as_str().to_string(), c.category.clone(), c.apps.to_string()];
            row.extend((0..4).map(|i| c.share(i).to_string()));
            wide.push(row);
            for (i, d) in TeeApi::ALL.iter().enumerate() {
                long.push(vec![
                    scope.as_str().to_string(),
                    c.category.clone(),
                    d.as_str().to_string(),
                    c.apps.to_string(),
                    c.matched[i].to_string(),
                    c.share(i).to_string(),
                ]);
            }
        }
    }
    emit("categories.csv", &CATEGORIES_HEADER, wide)?;
    emit("categories_long.csv", &CATEGORIES_LONG_HEADER, long)?;

    let t = &stats.crypto;
    let mut rows: Vec<Vec<String>> = Vec::new();
    for (kind, list) in [("software", &t.software), ("native", &t.native)] {
        for (lib, apps) in list {
            rows.push(vec![kind.into(), lib.clone(), apps.to_string(), share(*apps, t.ok_apps).to_string()]);
        }
    }
    rows.push(vec!["aggregate".into(), "any_software".into(), t.any_software.to_string(), share(t.any_software, t.ok_apps).to_string()]);
    rows.push(vec!["aggregate".into(), "any_native".into(), t.any_native.to_string(), share(t.any_native, t.ok_apps).to_string()]);
    emit("crypto.csv", &CRYPTO_HEADER, rows)?;

    let summary = out_dir.join("summary.json");
    let mut json = serde_json::to_string_pretty(stats).expect("stats serialize");
    json.push('\n');
    fs::write(&summary, json).map_err(|source| AggregateError::IoError { path: summary.clone(), source })?;
    written.push(summary);
    Ok(written)
}

fn pct(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

/// Human-readable overview with one-decimal percentages.
pub fn render_text(stats: &CorpusStats) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let t = &stats.totals;
    let _ = writeln!(s, "apps analyzed: {} (ok {}, timeout {}, error {})", t.analyzed, t.ok, t.timeout, t.error);
    let p = &stats.prevalence;
    let _ = writeln!(s, "\nTEE API prevalence (of {} ok apps)", p.ok_apps);
    for d in TeeApi::ALL {
        let c = &p.per_detector[d.as_str()];
        let _ = writeln!(s, "  {:<24} {:>8} {:>7}", d.as_str(), c.apps, pct(c.share));
    }
    for (label, c) in [
        ("any", &p.any),
        ("none", &p.none),
        ("all four", &p.all_four),
        ("all but prot. conf.", &p.all_except_protected_confirmation),
    ] {
        let _ = writeln!(s, "  {:<24} {:>8} {:>7}", label, c.apps, pct(c.share));
    }
    if let Some(all) = stats.locations.first() {
        let _ = writeln!(s, "\nmatch locations");
        let _ = writeln!(s, "  inlib share of matches        {}", pct(all.inlib_match_share));
        let _ = writeln!(s, "  apps with inlib (of ok)       {} {}", all.apps_with_inlib, pct(all.apps_with_inlib_share_of_ok));
        let _ = writeln!(s, "  apps with inmain (of matched) {} {}", all.apps_with_inmain, pct(all.apps_with_inmain_share_of_matched));
        let _ = writeln!(s, "  inmain only (of matched)      {} {}", all.apps_inmain_only, pct(all.apps_inmain_only_share_of_matched));
        let _ = writeln!(s, "  with obfuscated (of matched)  {} {}", all.apps_with_obfuscated, pct(all.apps_with_obfuscated_share_of_matched));
        let _ = writeln!(s, "  libraries per app             mean {:.2}, median {:.1}", all.libs_per_app_mean, all.libs_per_app_median);
    }
    for top in &stats.top_libraries {
        let _ = writeln!(s, "\ntop libraries: {} ({} distinct)", top.detector, top.distinct_libraries);
        for (lib, apps) in &top.rows {
            let _ = writeln!(s, "  {lib:<48} {apps:>8}");
        }
    }
    let c = &stats.crypto;
    let _ = writeln!(s, "\ncrypto libraries (of {} ok apps)", c.ok_apps);
    for (lib, apps) in c.software.iter().chain(&c.native) {
        let _ = writeln!(s, "  {:<24} {:>8} {:>7}", lib, apps, pct(share(*apps, c.ok_apps)));
    }
    let _ = writeln!(s, "  {:<24} {:>8} {:>7}", "any software", c.any_software, pct(share(c.any_software, c.ok_apps)));
    let _ = writeln!(s, "  {:<24} {:>8} {:>7}", "any native", c.any_native, pct(share(c.any_native, c.ok_apps)));
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(sha: u8, category: Option<&str>, matches: &[(&str, LocationClass, &str)]) -> AppRecord {
        AppRecord {
            sha256: format!("{sha:064x}"),
            status: Status::Ok,
            has_metadata: category.is_some(),
            category: category.map(str::to_string),
            downloads: Some(50_000),
            last_update: NaiveDate::from_ymd_opt(2021, 5, 1),
            package_check: None,
            total_seconds: 1.0,
            matches: matches
                .iter()
                .map(|(d, l, p)| MatchFacts { detector: d.to_string(), location: *l, package: PackageName::parse(p) })
                .collect(),
            software_libs: BTreeSet::new(),
            native_libs: BTreeSet::new(),
        }
    }

    use LocationClass::*;

    #[test]
    fn prevalence_counts_apps_once() {
        let mut records: Vec<AppRecord> = (0..10).map(|i| record(i, None, &[])).collect();
        for r in records.iter_mut().take(3) {
            r.matches = (0..5)
                .map(|_| MatchFacts { detector: "keystore".into(), location: Inlib, package: PackageName::parse("a.b") })
                .collect();
        }
        let p = api_prevalence(&Corpus { records, metadata_without_report: 0 });
        assert_eq!(p.per_detector["keystore"], CountShare { apps: 3, share: 0.3 });
        assert_eq!(p.any.apps, 3);
    }

    #[test]
    fn no_ok_apps() {
        let mut r = record(1, None, &[]);
        r.status = Status::Error;
        let p = api_prevalence(&Corpus { records: vec![r], metadata_without_report: 0 });
        assert_eq!(p.ok_apps, 0);
        assert!(p.per_detector.values().all(|c| c.apps == 0 && c.share == 0.0));
    }

    #[test]
    fn inlib_match_share() {
        let records = vec![
            record(1, None, &[("drm", Inlib, "com.lib.a"); 4]),
            record(2, None, &[("drm", Inlib, "com.lib.a"); 3]),
            record(3, None, &[("drm", Inlib, "com.lib.a"), ("drm", Inlib, "com.lib.b"), ("keystore", Inmain, "x.y")]),
            record(4, None, &[]),
        ];
        let all = &location_split(&Corpus { records, metadata_without_report: 0 }, &[])[0];
        assert_eq!(all.matches, 10);
        assert!((all.inlib_match_share - 0.9).abs() < 1e-12);
        assert_eq!(all.libs_per_app_mean, 4.0 / 3.0);
        assert_eq!(all.libs_per_app_median, 1.0);
    }

    #[test]
    fn obfuscated_only_app() {
        let records = vec![record(1, None, &[("drm", Obfuscated, "")])];
        let all = &location_split(&Corpus { records, metadata_without_report: 0 }, &[])[0];
        assert_eq!((all.apps_with_obfuscated, all.apps_with_inlib, all.apps_with_inmain), (1, 0, 0));
    }

    #[test]
    fn top_libs_ranked_with_ties() {
        let records = vec![
            record(1, None, &[("keystore", Inlib, "com.appsflyer.internal")]),
            record(2, None, &[("keystore", Inlib, "com.appsflyer"), ("keystore", Inlib, "com.appsflyer")]),
            record(3, None, &[("keystore", Inlib, "com.appsflyer"), ("keystore", Inlib, "androidx.biometric")]),
            record(4, None, &[("keystore", Inlib, "com.zeta.sdk")]),
        ];
        let known = [PackageName::parse("com.appsflyer")];
        let t = top_libraries(&Corpus { records, metadata_without_report: 0 }, "keystore", 10, &known);
        assert_eq!(
            t.rows,
            [("com.appsflyer".to_string(), 3), ("androidx.biometric".to_string(), 1), ("com.zeta.sdk".to_string(), 1)]
        );
        assert_eq!(t.distinct_libraries, 3);
        let none = top_libraries(&Corpus::default(), "drm", 10, &known);
        assert!(none.rows.is_empty());
    }

    #[test]
    fn finance_category() {
        let records = vec![
            record(1, Some("Finance"), &[("keystore", Inlib, "a.bc")]),
            record(2, Some("Finance"), &[("keystore", Inlib, "a.bc"), ("drm", Inlib, "a.bc")]),
            record(3, Some("Finance"), &[("keystore", Inmain, "a.bc")]),
            record(4, Some("Finance"), &[]),
            record(5, None, &[("keystore", Inlib, "a.bc")]),
        ];
        let rows = category_breakdown(&Corpus { records, metadata_without_report: 0 }, CategoryScope::All);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].apps, 4);
        assert_eq!(rows[0].share(0), 0.75);
        assert_eq!(rows[0].share(1), 0.25);
    }

    #[test]
    fn filter_boundaries() {
        let f = SelectionFilter::defaults();
        let mut r = record(1, Some("Education"), &[]);
        r.downloads = Some(10_000);
        r.last_update = NaiveDate::from_ymd_opt(2020, 1, 1);
        assert!(f.keeps(&r));
        r.downloads = Some(9_999);
        assert!(!f.keeps(&r));
        r.downloads = Some(10_000);
        r.last_update = NaiveDate::from_ymd_opt(2019, 12, 31);
        assert!(!f.keeps(&r));
        r.last_update = NaiveDate::from_ymd_opt(2020, 1, 1);
        r.category = Some("Educational".into());
        assert!(!f.keeps(&r));
        assert_eq!(builtin_game_categories().len(), 17);
    }

    #[test]
    fn crypto_zero_rows() {
        let t = crypto_table(&Corpus::default(), &["BouncyCastle".into()], &["OpenSSL".into()]);
        assert_eq!(t.software, [("BouncyCastle".to_string(), 0)]);
        assert_eq!(t.native, [("OpenSSL".to_string(), 0)]);
        assert_eq!((t.any_software, t.any_native), (0, 0));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&mut []), 0.0);
    }
}
