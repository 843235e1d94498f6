//! Real open-source APKs (Appium helper apps, Apache-2.0) and the listings
//! frozen from androguard by `tests/oracle/dump_real_apks.py`.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub fn real_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/real")
}

pub fn apks() -> Vec<PathBuf> {
    let mut v: Vec<_> = fs::read_dir(real_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "apk"))
        .collect();
    v.sort();
    v
}

/// `(dex entry, caller class, target class, target method)`.
pub type InvokeKey = (String, String, String, String);

/// Invoke multiplicities from the disassembler listing.
pub fn oracle_invokes(apk: &Path) -> BTreeMap<InvokeKey, usize> {
    let text = fs::read_to_string(apk.with_extension("invokes.tsv")).unwrap();
    text.lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            assert_eq!(f.len(), 5, "bad oracle line {l:?}");
            (
                (f[0].to_string(), f[1].to_string(), f[2].to_string(), f[3].to_string()),
                f[4].parse().unwrap(),
            )
        })
        .collect()
}

/// Entry name (`apk` for the whole file) to hex sha256.
pub fn oracle_digests(apk: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(apk.with_extension("sha256"))
        .unwrap()
        .lines()
        .map(|l| {
            let (d, n) = l.split_once("  ").unwrap();
            (n.to_string(), d.to_string())
        })
        .collect()
}
