//! Mapping caller classes to packages and classifying them as main app,
//! third-party library, or obfuscated code.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Number of leading segments kept for libraries without a known prefix.
const LIBRARY_SEGMENTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct PackageName {
    segments: Vec<String>,
}

impl PackageName {
    /// Splits a dotted name. The empty string is the empty package.
    pub fn parse(dotted: &str) -> Self {
        if dotted.is_empty() {
            return PackageName::default();
        }
        PackageName { segments: dotted.split('.').map(str::to_string).collect() }
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Whole-segment prefix test: `com.package.xyz` starts with
    /// `com.package`, `com.packageX` does not.
    pub fn starts_with(&self, prefix: &PackageName) -> bool {
        self.segments.starts_with(&prefix.segments)
    }

    /// The first `n` segments.
    pub fn truncate(&self, n: usize) -> PackageName {
        PackageName { segments: self.segments.iter().take(n).cloned().collect() }
    }
}

impl fmt::Display for PackageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.segments.join("."))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocationClass {
    Inmain,
    Inlib,
    Obfuscated,
}

impl LocationClass {
    pub const ALL: [LocationClass; 3] = [LocationClass::Inmain, LocationClass::Inlib, LocationClass::Obfuscated];

    pub fn as_str(self) -> &'static str {
        match self {
            LocationClass::Inmain => "inmain",
            LocationClass::Inlib => "inlib",
            LocationClass::Obfuscated => "obfuscated",
        }
    }
}

/// How ProGuard-shaped packages (every segment at most two characters,
/// e.g. `b.d`) are classified.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttributionPolicy {
    /// `true`: such packages belong to the main app. `false`: they are
    /// obfuscated.
    pub proguard_as_main: bool,
}

impl Default for AttributionPolicy {
    fn default() -> Self {
        AttributionPolicy { proguard_as_main: true }
    }
}

/// Package of a dotted class name; inner-class suffixes are part of the
/// simple name and dropped with it.
pub fn package_of_class(class_name: &str) -> PackageName {
    match class_name.rsplit_once('.') {
        Some((pkg, _)) => PackageName::parse(pkg),
        None => PackageName::default(),
    }
}

/// Android application ID rules: at least two segments, each starting with
/// an ASCII letter and made of ASCII letters, digits and underscores.
pub fn is_valid_application_id(pkg: &PackageName) -> bool {
    pkg.segments.len() >= 2
        && pkg.segments.iter().all(|s| {
            s.as_bytes().first().is_some_and(u8::is_ascii_alphabetic)
                && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
        })
}

fn is_proguard_shaped(pkg: &PackageName) -> bool {
    !pkg.is_empty() && pkg.segments.iter().all(|s| s.chars().count() <= 2)
}

pub fn classify_location(app_pkg: &PackageName, match_pkg: &PackageName) -> LocationClass {
    classify_location_with(app_pkg, match_pkg, AttributionPolicy::default())
}

pub fn classify_location_with(app_pkg: &PackageName, match_pkg: &PackageName, policy: AttributionPolicy) -> LocationClass {
    if match_pkg.is_empty() {
        return LocationClass::Obfuscated;
    }
    if !app_pkg.is_empty() && match_pkg.starts_with(app_pkg) {
        return LocationClass::Inmain;
    }
    if is_proguard_shaped(match_pkg) {
        return if policy.proguard_as_main { LocationClass::Inmain } else { LocationClass::Obfuscated };
    }
    if !is_valid_application_id(match_pkg) {
        return LocationClass::Obfuscated;
    }
    LocationClass::Inlib
}

/// Library grouping key: the longest known prefix of `match_pkg`, else its
/// first four segments.
pub fn normalize_library(match_pkg: &PackageName, known_prefixes: &[PackageName]) -> String {
    known_prefixes
        .iter()
        .filter(|p| !p.is_empty() && match_pkg.starts_with(p))
        .max_by_key(|p| p.segments.len())
        .cloned()
        .unwrap_or_else(|| match_pkg.truncate(LIBRARY_SEGMENTS))
        .to_string()
}

/// One dotted prefix per line; `#` starts a comment line.
pub fn parse_known_prefixes(text: &str) -> Vec<PackageName> {
    let mut out: Vec<PackageName> = Vec::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let p = PackageName::parse(line);
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

pub fn load_known_prefixes(path: &Path) -> std::io::Result<Vec<PackageName>> {
    Ok(parse_known_prefixes(&fs::read_to_string(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(s: &str) -> PackageName {
        PackageName::parse(s)
    }

    #[test]
    fn packages_of_classes() {
        assert_eq!(package_of_class("com.example.xyz.Foo").to_string(), "com.example.xyz");
        assert!(package_of_class("Foo").is_empty());
        assert_eq!(package_of_class("a.b.C$D"), p("a.b"));
    }

    #[test]
    fn application_ids() {
        assert!(is_valid_application_id(&p("com.package")));
        assert!(is_valid_application_id(&p("com.my_app.v2")));
        assert!(!is_valid_application_id(&p("main")));
        assert!(!is_valid_application_id(&p("com.1abc")));
        assert!(!is_valid_application_id(&p("com._x")));
        assert!(!is_valid_application_id(&p("com..x")));
        assert!(!is_valid_application_id(&p("com.ex-ample")));
        assert!(!is_valid_application_id(&p("")));
    }

    #[test]
    fn locations() {
        let app = p("com.package");
        assert_eq!(classify_location(&app, &p("com.package.xyz")), LocationClass::Inmain);
        assert_eq!(classify_location(&app, &p("com.package")), LocationClass::Inmain);
        assert_eq!(classify_location(&p("com.shop.app"), &p("com.appsflyer")), LocationClass::Inlib);
        assert_eq!(classify_location(&p("com.shop.app"), &p("b.d")), LocationClass::Inmain);
        assert_eq!(classify_location(&app, &p("com.packageX")), LocationClass::Inlib);
        assert_eq!(classify_location(&app, &p("")), LocationClass::Obfuscated);
        assert_eq!(classify_location(&app, &p("main")), LocationClass::Obfuscated);
        assert_eq!(classify_location(&app, &p("com.1abc")), LocationClass::Obfuscated);
    }

    #[test]
    fn proguard_policy_off() {
        let policy = AttributionPolicy { proguard_as_main: false };
        let app = p("com.shop.app");
        assert_eq!(classify_location_with(&app, &p("b.d"), policy), LocationClass::Obfuscated);
        assert_eq!(classify_location_with(&app, &p("com.shop.app.ui"), policy), LocationClass::Inmain);
        assert_eq!(classify_location_with(&app, &p("com.appsflyer"), policy), LocationClass::Inlib);
    }

    #[test]
    fn library_keys() {
        let known = [p("com.google.android.exoplayer2.drm"), p("com.google")];
        assert_eq!(
            normalize_library(&p("com.google.android.exoplayer2.drm.internal"), &known),
            "com.google.android.exoplayer2.drm"
        );
        assert_eq!(normalize_library(&p("com.vendor.sdk.crypto.aes"), &known), "com.vendor.sdk.crypto");
        assert_eq!(normalize_library(&p("androidx.biometric"), &known), "androidx.biometric");
    }

    #[test]
    fn prefix_file() {
        let known = parse_known_prefixes("# c\n\ncom.a.b\n  com.c \ncom.a.b\n");
        assert_eq!(known, [p("com.a.b"), p("com.c")]);
    }

    fn segment() -> impl Strategy<Value = String> {
        prop_oneof!["[a-z]{1,2}", "[a-z][a-z0-9_]{2,6}", "[0-9][a-z]{0,3}"]
    }

    fn package() -> impl Strategy<Value = PackageName> {
        prop::collection::vec(segment(), 0..7).prop_map(|segments| PackageName { segments })
    }

    proptest! {
        #[test]
        fn inmain_is_prefix_monotone(app in package(), pkg in package(), deeper in prop::collection::vec(segment(), 1..3)) {
            prop_assume!(!app.is_empty());
            let mut sub = pkg.clone();
            sub.segments.extend(deeper);
            if classify_location(&app, &pkg) == LocationClass::Inmain && match_is_sub(&app, &pkg) {
                prop_assert_eq!(classify_location(&app, &sub), LocationClass::Inmain);
            }
        }

        #[test]
        fn normalize_is_idempotent(pkg in package(), known in prop::collection::vec(package(), 0..5)) {
            let once = normalize_library(&pkg, &known);
            let twice = normalize_library(&PackageName::parse(&once), &known);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn segment_boundary(app in package(), extra in "[a-z0-9]{1,3}") {
            prop_assume!(app.segments.len() >= 2);
            let mut glued = app.clone();
            let last = glued.segments.last_mut().unwrap();
            last.push_str(&extra);
            prop_assert!(!glued.starts_with(&app));
        }
    }

    fn match_is_sub(app: &PackageName, pkg: &PackageName) -> bool {
        pkg.starts_with(app)
    }
}
