//! Matching parsed invocations, method references and native library file
//! names against pattern sets.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::archive::dex_ordinal;
use crate::attribution::{classify_location_with, package_of_class, AttributionPolicy, LocationClass, PackageName};
use crate::dex::{DexUnit, Invocation, MethodRef};
use crate::patterns::{NativeLibPattern, PatternKind, PatternSet};

/// Wildcard accepted in the method column of a pattern.
pub const ANY_METHOD: &str = "*";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub detector: String,
    pub target_class: String,
    pub target_method: String,
    /// Empty for crypto references that no invoke in the unit uses.
    pub caller_class: String,
    pub dex_file: String,
    pub code_offset: u32,
    pub location: Option<LocationClass>,
    /// Package of the caller class.
    pub attributed_package: Option<String>,
}

impl MatchRecord {
    fn new(detector: &str, target: &MethodRef, caller: &str, dex_file: &str, code_offset: u32) -> Self {
        MatchRecord {
            detector: detector.to_string(),
            target_class: target.defining_class.to_string(),
            target_method: target.method_name.to_string(),
            caller_class: caller.to_string(),
            dex_file: dex_file.to_string(),
            code_offset,
            location: None,
            attributed_package: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NativeHit {
    pub library: String,
    pub file: String,
}

fn sort_records(records: &mut [MatchRecord]) {
    records.sort_by(|a, b| {
        let ka = (dex_ordinal(&a.dex_file).unwrap_or(u32::MAX), &a.dex_file, a.code_offset, &a.detector);
        let kb = (dex_ordinal(&b.dex_file).unwrap_or(u32::MAX), &b.dex_file, b.code_offset, &b.detector);
        ka.cmp(&kb)
    });
}

/// `class` itself followed by each enclosing class: `A$B$C`, `A$B`, `A`.
fn class_and_outers(class: &str) -> impl Iterator<Item = &str> {
    std::iter::once(class).chain(class.match_indices('$').map(move |(i, _)| &class[..i]))
}

struct MethodGate {
    detector: String,
    any: bool,
    methods: HashSet<String>,
}

/// TEE API matcher compiled from `tee_api` pattern sets.
pub struct TeeMatcher {
    by_class: HashMap<String, Vec<MethodGate>>,
}

impl TeeMatcher {
    pub fn new(sets: &[PatternSet]) -> Self {
        let mut by_class: HashMap<String, Vec<MethodGate>> = HashMap::new();
        for set in sets.iter().filter(|s| s.kind == PatternKind::TeeApi) {
            for (class, method) in &set.method_patterns {
                let gates = by_class.entry(class.clone()).or_default();
                let gate = match gates.iter_mut().position(|g| g.detector == set.detector) {
                    Some(i) => &mut gates[i],
                    None => {
                        gates.push(MethodGate { detector: set.detector.clone(), any: false, methods: HashSet::new() });
                        gates.last_mut().unwrap()
                    }
                };
                if method == ANY_METHOD {
                    gate.any = true;
                } else {
                    gate.methods.insert(method.clone());
                }
            }
        }
        TeeMatcher { by_class }
    }

    /// Detectors whose patterns accept this call target.
    pub fn detectors_for(&self, target: &MethodRef) -> BTreeSet<&str> {
        let mut found = BTreeSet::new();
        for class in class_and_outers(&target.defining_class) {
            for gate in self.by_class.get(class).into_iter().flatten() {
                if gate.any || gate.methods.contains(&*target.method_name) {
                    found.insert(gate.detector.as_str());
                }
            }
        }
        found
    }

    /// One record per (invocation, detector) pair, ordered by DEX file and
    /// code offset.
    pub fn match_invocations<'a>(&self, invocations: impl IntoIterator<Item = &'a Invocation>) -> Vec<MatchRecord> {
        let mut out = Vec::new();
        for inv in invocations {
            for detector in self.detectors_for(&inv.target) {
                out.push(MatchRecord::new(detector, &inv.target, &inv.caller_class, &inv.dex_file, inv.code_offset));
            }
        }
        sort_records(&mut out);
        out
    }
}

pub fn match_tee_apis(invocations: &[Invocation], sets: &[PatternSet]) -> Vec<MatchRecord> {
    TeeMatcher::new(sets).match_invocations(invocations)
}

/// Whether `class` lies under the package or class prefix `prefix`,
/// respecting name boundaries.
pub fn has_package_prefix(class: &str, prefix: &str) -> bool {
    class
        .strip_prefix(prefix)
        .is_some_and(|rest| rest.is_empty() || rest.starts_with('.') || rest.starts_with('$'))
}

/// Software crypto library matcher compiled from `crypto_software` sets.
pub struct CryptoMatcher {
    prefixes: Vec<(String, String)>,
}

impl CryptoMatcher {
    pub fn new(sets: &[PatternSet]) -> Self {
        let prefixes = sets
            .iter()
            .filter(|s| s.kind == PatternKind::CryptoSoftware)
            .flat_map(|s| s.class_prefixes.iter().map(|p| (p.clone(), s.detector.clone())))
            .collect();
        CryptoMatcher { prefixes }
    }

    /// Libraries whose prefixes cover `class`, without duplicates.
    pub fn libraries_for(&self, class: &str) -> Vec<&str> {
        let mut libs: Vec<&str> = Vec::new();
        for (prefix, lib) in &self.prefixes {
            if has_package_prefix(class, prefix) && !libs.contains(&lib.as_str()) {
                libs.push(lib);
            }
        }
        libs
    }

    /// One record per matching invoke, with its caller, plus one record with
    /// an empty caller per matching `method_ids` entry that no invoke uses.
    pub fn match_unit(&self, unit: &DexUnit) -> Vec<MatchRecord> {
        let mut cache: HashMap<&str, Vec<&str>> = HashMap::new();
        let mut invoked: HashSet<&MethodRef> = HashSet::new();
        let mut out = Vec::new();
        for inv in &unit.invocations {
            let class: &str = &inv.target.defining_class;
            let libs = cache.entry(class).or_insert_with(|| self.libraries_for(class));
            for lib in libs.iter() {
                out.push(MatchRecord::new(lib, &inv.target, &inv.caller_class, &inv.dex_file, inv.code_offset));
            }
            invoked.insert(&inv.target);
        }
        for method in &unit.methods {
            if invoked.contains(method) {
                continue;
            }
            let class: &str = &method.defining_class;
            let libs = cache.entry(class).or_insert_with(|| self.libraries_for(class));
            for lib in libs.iter() {
                out.push(MatchRecord::new(lib, method, "", &unit.entry_name, 0));
            }
        }
        sort_records(&mut out);
        out
    }
}

pub fn match_crypto_packages(unit: &DexUnit, sets: &[PatternSet]) -> Vec<MatchRecord> {
    CryptoMatcher::new(sets).match_unit(unit)
}

fn native_name_matches(base: &str, stem: &str) -> bool {
    let base = base.to_ascii_lowercase();
    let stem = stem.to_ascii_lowercase();
    let Some(rest) = base.strip_prefix(&stem) else {
        return false;
    };
    let boundary = rest.is_empty() || rest.starts_with(".so") || rest.starts_with(['_', '-', '.']);
    boundary && rest.contains(".so")
}

/// `(library, file)` for every file whose base name matches a stem. Input
/// order is kept; each pair appears once.
pub fn match_native_libs<S: AsRef<str>>(filenames: &[S], patterns: &[NativeLibPattern]) -> Vec<NativeHit> {
    let mut out: Vec<NativeHit> = Vec::new();
    for file in filenames {
        let file = file.as_ref();
        let base = file.rsplit('/').next().unwrap_or(file);
        for p in patterns {
            if native_name_matches(base, &p.stem) {
                let hit = NativeHit { library: p.library.clone(), file: file.to_string() };
                if !out.contains(&hit) {
                    out.push(hit);
                }
            }
        }
    }
    out
}

/// Fills `location` and `attributed_package` from each record's caller.
pub fn attribute(records: &mut [MatchRecord], app_pkg: &PackageName, policy: AttributionPolicy) {
    for r in records {
        let pkg = package_of_class(&r.caller_class);
        r.location = Some(classify_location_with(app_pkg, &pkg, policy));
        r.attributed_package = Some(pkg.to_string());
    }
}
