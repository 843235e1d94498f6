//! Pattern files for the TEE API and crypto library detectors.
//!
//! Bytecode patterns are CSV rows `detector_id,kind,class_or_prefix,method_or_*`
//! and native patterns are rows `library,stem`. Neither format has a header;
//! lines starting with `#` are comments.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attribution::{parse_known_prefixes, PackageName};

const BUILTIN_TEE: &str = include_str!("../data/tee_api.csv");
const BUILTIN_CRYPTO: &str = include_str!("../data/crypto_software.csv");
const BUILTIN_NATIVE: &str = include_str!("../data/native_libs.csv");
const BUILTIN_KNOWN_PREFIXES: &str = include_str!("../data/known_prefixes.txt");

/// File name of the native pattern CSV inside a pattern directory.
pub const NATIVE_FILE: &str = "native_libs.csv";
/// File name of the known library prefix list inside a pattern directory.
pub const KNOWN_PREFIXES_FILE: &str = "known_prefixes.txt";

#[derive(Debug, thiserror::Error)]
pub enum PatternError {
    #[error("{origin}:{line}: {reason}")]
    PatternParseError { origin: String, line: u64, reason: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// The four TEE-backed API families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeeApi {
    Keystore,
    Drm,
    Biometrics,
    ProtectedConfirmation,
}

impl TeeApi {
    pub const ALL: [TeeApi; 4] = [TeeApi::Keystore, TeeApi::Drm, TeeApi::Biometrics, TeeApi::ProtectedConfirmation];

    pub fn as_str(self) -> &'static str {
        match self {
            TeeApi::Keystore => "keystore",
            TeeApi::Drm => "drm",
            TeeApi::Biometrics => "biometrics",
            TeeApi::ProtectedConfirmation => "protected_confirmation",
        }
    }
}

impl fmt::Display for TeeApi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TeeApi {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TeeApi::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown TEE detector {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    TeeApi,
    CryptoSoftware,
}

impl FromStr for PatternKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tee_api" => Ok(PatternKind::TeeApi),
            "crypto_software" => Ok(PatternKind::CryptoSoftware),
            other => Err(format!("unknown pattern kind {other:?}")),
        }
    }
}

/// All patterns of one detector: a TEE API or a software crypto library.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternSet {
    /// A [`TeeApi`] name for `tee_api` sets, the library name otherwise.
    pub detector: String,
    pub kind: PatternKind,
    /// Dotted class names (`tee_api`) or package prefixes (`crypto_software`).
    pub class_prefixes: Vec<String>,
    /// `(class, method)` pairs; the method may be `*`.
    pub method_patterns: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NativeLibPattern {
    pub library: String,
    pub stem: String,
}

fn parse_error(origin: &str, line: u64, reason: impl Into<String>) -> PatternError {
    PatternError::PatternParseError { origin: origin.to_string(), line, reason: reason.into() }
}

/// Reads rows of exactly `columns` non-empty, comma-separated fields.
/// Fields are trimmed; blank and `#` lines are skipped.
fn rows(text: &str, origin: &str, columns: usize) -> Result<Vec<(u64, Vec<String>)>, PatternError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i as u64 + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<String> = trimmed.split(',').map(|f| f.trim().to_string()).collect();
        if fields.len() != columns {
            return Err(parse_error(origin, line, format!("expected {columns} columns, found {}", fields.len())));
        }
        if let Some(i) = fields.iter().position(String::is_empty) {
            return Err(parse_error(origin, line, format!("column {} is empty", i + 1)));
        }
        out.push((line, fields));
    }
    Ok(out)
}

/// Parses bytecode pattern CSV text. Rows are grouped into one set per
/// detector in order of first appearance; duplicate rows are dropped.
pub fn parse_pattern_str(text: &str, origin: &str) -> Result<Vec<PatternSet>, PatternError> {
    let mut sets: Vec<PatternSet> = Vec::new();
    for (line, row) in rows(text, origin, 4)? {
        let [detector, kind, class, method]: [String; 4] = row.try_into().expect("column count checked");
        let kind: PatternKind = kind.parse().map_err(|e: String| parse_error(origin, line, e))?;
        if kind == PatternKind::TeeApi {
            detector.parse::<TeeApi>().map_err(|e| parse_error(origin, line, e))?;
        }
        if class.starts_with('.') || class.ends_with('.') || class.contains("..") {
            return Err(parse_error(origin, line, format!("bad class name {class:?}")));
        }
        let set = match sets.iter_mut().position(|s| s.detector == detector && s.kind == kind) {
            Some(i) => &mut sets[i],
            None => {
                sets.push(PatternSet { detector, kind, class_prefixes: Vec::new(), method_patterns: Vec::new() });
                sets.last_mut().unwrap()
            }
        };
        if !set.class_prefixes.contains(&class) {
            set.class_prefixes.push(class.clone());
        }
        if kind == PatternKind::TeeApi || method != "*" {
            let pair = (class, method);
            if !set.method_patterns.contains(&pair) {
                set.method_patterns.push(pair);
            }
        }
    }
    Ok(sets)
}

fn read(path: &Path) -> Result<String, PatternError> {
    fs::read_to_string(path).map_err(|source| PatternError::Io { path: path.to_path_buf(), source })
}

pub fn load_pattern_file(path: &Path) -> Result<Vec<PatternSet>, PatternError> {
    parse_pattern_str(&read(path)?, &path.display().to_string())
}

/// Parses native pattern CSV text (`library,stem`).
pub fn parse_native_str(text: &str, origin: &str) -> Result<Vec<NativeLibPattern>, PatternError> {
    let mut out: Vec<NativeLibPattern> = Vec::new();
    for (line, row) in rows(text, origin, 2)? {
        let [library, stem]: [String; 2] = row.try_into().expect("column count checked");
        if stem.contains(['/', '\\']) {
            return Err(parse_error(origin, line, format!("stem {stem:?} contains a path separator")));
        }
        let p = NativeLibPattern { library, stem };
        if !out.contains(&p) {
            out.push(p);
        }
    }
    Ok(out)
}

pub fn load_native_file(path: &Path) -> Result<Vec<NativeLibPattern>, PatternError> {
    parse_native_str(&read(path)?, &path.display().to_string())
}

/// Merges sets of the same detector and kind, keeping first-seen order.
fn merge(sets: impl IntoIterator<Item = PatternSet>) -> Vec<PatternSet> {
    let mut out: Vec<PatternSet> = Vec::new();
    for s in sets {
        match out.iter_mut().find(|o| o.detector == s.detector && o.kind == s.kind) {
            Some(o) => {
                for c in s.class_prefixes {
                    if !o.class_prefixes.contains(&c) {
                        o.class_prefixes.push(c);
                    }
                }
                for m in s.method_patterns {
                    if !o.method_patterns.contains(&m) {
                        o.method_patterns.push(m);
                    }
                }
            }
            None => out.push(s),
        }
    }
    out
}

/// Every pattern input of one analysis run.
#[derive(Debug, Clone)]
pub struct PatternBundle {
    pub tee: Vec<PatternSet>,
    pub crypto: Vec<PatternSet>,
    pub native: Vec<NativeLibPattern>,
    pub known_prefixes: Vec<PackageName>,
}

impl PatternBundle {
    /// The pattern files shipped with the crate.
    pub fn builtin() -> Self {
        let tee = parse_pattern_str(BUILTIN_TEE, "tee_api.csv").expect("builtin TEE patterns parse");
        let crypto = parse_pattern_str(BUILTIN_CRYPTO, "crypto_software.csv").expect("builtin crypto patterns parse");
        PatternBundle {
            tee,
            crypto,
            native: parse_native_str(BUILTIN_NATIVE, NATIVE_FILE).expect("builtin native patterns parse"),
            known_prefixes: parse_known_prefixes(BUILTIN_KNOWN_PREFIXES),
        }
    }

    fn from_bytecode(sets: Vec<PatternSet>, native: Vec<NativeLibPattern>, known_prefixes: Vec<PackageName>) -> Self {
        let (tee, crypto): (Vec<_>, Vec<_>) = sets.into_iter().partition(|s| s.kind == PatternKind::TeeApi);
        PatternBundle { tee: merge(tee), crypto: merge(crypto), native, known_prefixes }
    }

    /// Loads a pattern directory. Every `*.csv` file other than
    /// `native_libs.csv` holds bytecode patterns of either kind. A directory
    /// without bytecode CSVs, without `native_libs.csv` or without
    /// `known_prefixes.txt` uses the builtin data for that part.
    pub fn load_dir(dir: &Path) -> Result<Self, PatternError> {
        let builtin = PatternBundle::builtin();
        let listing = fs::read_dir(dir).map_err(|source| PatternError::Io { path: dir.to_path_buf(), source })?;
        let mut csvs: Vec<PathBuf> = listing
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "csv"))
            .filter(|p| p.file_name().is_some_and(|n| n != NATIVE_FILE))
            .collect();
        csvs.sort();
        let mut sets = Vec::new();
        for path in &csvs {
            sets.extend(load_pattern_file(path)?);
        }
        if csvs.is_empty() {
            sets.extend(builtin.tee);
            sets.extend(builtin.crypto);
        }
        let native_path = dir.join(NATIVE_FILE);
        let native = if native_path.exists() { load_native_file(&native_path)? } else { builtin.native };
        let prefix_path = dir.join(KNOWN_PREFIXES_FILE);
        let known_prefixes =
            if prefix_path.exists() { parse_known_prefixes(&read(&prefix_path)?) } else { builtin.known_prefixes };
        Ok(PatternBundle::from_bytecode(sets, native, known_prefixes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_row() {
        let sets = parse_pattern_str("keystore,tee_api,android.security.keystore.KeyGenParameterSpec,build\n", "t")
            .unwrap();
        assert_eq!(sets.len(), 1);
        assert_eq!(sets[0].detector, "keystore");
        assert_eq!(sets[0].kind, PatternKind::TeeApi);
        assert_eq!(sets[0].class_prefixes, ["android.security.keystore.KeyGenParameterSpec"]);
        assert_eq!(
            sets[0].method_patterns,
            [("android.security.keystore.KeyGenParameterSpec".to_string(), "build".to_string())]
        );
    }

    #[test]
    fn empty_and_comment_only() {
        assert!(parse_pattern_str("", "t").unwrap().is_empty());
        assert!(parse_pattern_str("# nothing\n\n# here\n", "t").unwrap().is_empty());
        assert!(parse_native_str("", "t").unwrap().is_empty());
    }

    #[test]
    fn wrong_column_count() {
        let err = parse_pattern_str("# c\nkeystore,tee_api\n", "x.csv").unwrap_err();
        match err {
            PatternError::PatternParseError { origin, line, .. } => {
                assert_eq!(origin, "x.csv");
                assert_eq!(line, 2);
            }
            other => panic!("{other}"),
        }
        assert!(parse_native_str("OpenSSL,libssl,extra\n", "t").is_err());
    }

    #[test]
    fn empty_field() {
        assert!(parse_pattern_str("keystore,tee_api,,build\n", "t").is_err());
        assert!(parse_native_str("OpenSSL, \n", "t").is_err());
    }

    #[test]
    fn unknown_detector_or_kind() {
        assert!(parse_pattern_str("tpm,tee_api,a.B,c\n", "t").is_err());
        assert!(parse_pattern_str("keystore,hardware,a.B,c\n", "t").is_err());
    }

    #[test]
    fn duplicates_dropped_and_grouped() {
        let text = "drm,tee_api,android.media.MediaDrm,openSession\n\
                    drm,tee_api,android.media.MediaDrm,openSession\n\
                    drm,tee_api,android.media.MediaDrm,closeSession\n\
                    BouncyCastle,crypto_software,org.bouncycastle,*\n\
                    BouncyCastle,crypto_software,org.bouncycastle,*\n";
        let sets = parse_pattern_str(text, "t").unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].class_prefixes.len(), 1);
        assert_eq!(sets[0].method_patterns.len(), 2);
        assert_eq!(sets[1].class_prefixes, ["org.bouncycastle"]);
        assert!(sets[1].method_patterns.is_empty());
    }

    #[test]
    fn stem_without_separator() {
        assert!(parse_native_str("OpenSSL,lib/libssl\n", "t").is_err());
        let p = parse_native_str("OpenSSL , libssl\nOpenSSL,libssl\n", "t").unwrap();
        assert_eq!(p, [NativeLibPattern { library: "OpenSSL".into(), stem: "libssl".into() }]);
    }

    #[test]
    fn builtin_sets() {
        let b = PatternBundle::builtin();
        let tee: Vec<&str> = b.tee.iter().map(|s| s.detector.as_str()).collect();
        assert_eq!(tee, ["keystore", "drm", "biometrics", "protected_confirmation"]);
        assert!(b.tee.iter().all(|s| !s.method_patterns.is_empty()));
        let mut libs: Vec<&str> = b.crypto.iter().map(|s| s.detector.as_str()).collect();
        libs.sort();
        assert_eq!(libs.len(), 11);
        let mut native: Vec<&str> = b.native.iter().map(|p| p.library.as_str()).collect();
        native.dedup();
        assert_eq!(native.len(), 8);
        assert!(b.known_prefixes.len() >= 30);
    }

    #[test]
    fn load_dir_falls_back_per_part() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("mine.csv"), "drm,tee_api,android.media.MediaDrm,*\n").unwrap();
        let b = PatternBundle::load_dir(dir.path()).unwrap();
        assert_eq!(b.tee.len(), 1);
        assert!(b.crypto.is_empty());
        assert_eq!(b.native, PatternBundle::builtin().native);
    }
}
