//! Real APKs checked against the frozen disassembler listings.

mod common;

use std::collections::BTreeMap;
use std::fs;

use common::{apks, oracle_digests, oracle_invokes, InvokeKey};

use analytika::archive::{enumerate_dex, sha256_digest, ArchiveIndex};
use analytika::dex::parse_dex;
use analytika::manifest::{extract_manifest_info, parse_binary_xml};

#[test]
fn smoke_corpus_has_at_least_five_apks() {
    assert!(apks().len() >= 5);
}

#[test]
fn invocations_match_disassembler() {
    for apk in apks() {
        let bytes = fs::read(&apk).unwrap();
        let index = ArchiveIndex::open(&bytes).unwrap();
        let mut ours: BTreeMap<InvokeKey, usize> = BTreeMap::new();
        for name in enumerate_dex(&index) {
            let unit = parse_dex(&index.read_entry(&name).unwrap(), &name).unwrap();
            assert_eq!(unit.strings.len(), unit.header.string_ids.size as usize);
            assert_eq!(unit.types.len(), unit.header.type_ids.size as usize);
            assert_eq!(unit.methods.len(), unit.header.method_ids.size as usize);
            for inv in unit.invocations {
                *ours
                    .entry((
                        name.clone(),
                        inv.caller_class.to_string(),
                        inv.target.defining_class.to_string(),
                        inv.target.method_name.to_string(),
                    ))
                    .or_default() += 1;
            }
        }
        let expected = oracle_invokes(&apk);
        let missing: Vec<_> = expected.keys().filter(|k| !ours.contains_key(*k)).take(5).collect();
        let extra: Vec<_> = ours.keys().filter(|k| !expected.contains_key(*k)).take(5).collect();
        assert!(missing.is_empty() && extra.is_empty(), "{}: missing {missing:?} extra {extra:?}", apk.display());
        assert_eq!(ours, expected, "{}: invoke multiplicities differ", apk.display());
    }
}

#[test]
fn digests_match_independent_hashing() {
    for apk in apks() {
        let bytes = fs::read(&apk).unwrap();
        let digests = oracle_digests(&apk);
        assert_eq!(sha256_digest(&bytes), digests["apk"]);
        let index = ArchiveIndex::open(&bytes).unwrap();
        for name in enumerate_dex(&index) {
            let entry = index.read_entry(&name).unwrap();
            assert_eq!(entry.len() as u64, index.get(&name).unwrap().uncompressed_size);
            assert_eq!(sha256_digest(&entry), digests[&name], "{}:{name}", apk.display());
        }
    }
}

#[test]
fn manifests_match_axml_dumper() {
    for apk in apks() {
        let bytes = fs::read(&apk).unwrap();
        let index = ArchiveIndex::open(&bytes).unwrap();
        let tree = parse_binary_xml(&index.read_entry("AndroidManifest.xml").unwrap()).unwrap();
        let info = extract_manifest_info(&tree).unwrap();
        let expected: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(apk.with_extension("manifest.json")).unwrap()).unwrap();
        assert_eq!(info.package_name, expected["package"].as_str().unwrap());
        let perms: Vec<String> = expected["permissions"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| p.as_str().unwrap().to_string())
            .collect();
        assert_eq!(info.permissions, perms, "{}", apk.display());
        assert_eq!(info.min_sdk, expected["min_sdk"].as_i64(), "{}", apk.display());
    }
}
