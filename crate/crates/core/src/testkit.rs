//! Fixture builders: a minimal ZIP writer, a binary-XML manifest encoder and
//! an APK assembler on top of both.
//!
//! These exist so tests and benchmarks can plant exact ground truth. They are
//! not used on any analysis path.

use std::io::Write;

use flate2::write::DeflateEncoder;
use flate2::Compression;

use crate::dex::builder::FixtureDex;

struct PendingEntry {
    name: String,
    method: u16,
    payload: Vec<u8>,
    uncompressed_size: u32,
    crc32: u32,
    local_alias: Option<usize>,
}

/// Writes classic (non-ZIP64) archives with stored or deflated entries.
#[derive(Default)]
pub struct ZipBuilder {
    entries: Vec<PendingEntry>,
}

fn crc32(bytes: &[u8]) -> u32 {
    let mut c = flate2::Crc::new();
    c.update(bytes);
    c.sum()
}

fn deflate(bytes: &[u8]) -> Vec<u8> {
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).expect("in-memory write");
    enc.finish().expect("in-memory write")
}

impl ZipBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stored(&mut self, name: &str, bytes: &[u8]) -> &mut Self {
        self.raw_entry(name, 0, bytes, bytes.len() as u32, crc32(bytes))
    }

    pub fn deflated(&mut self, name: &str, bytes: &[u8]) -> &mut Self {
        let payload = deflate(bytes);
        self.raw_entry(name, 8, &payload, bytes.len() as u32, crc32(bytes))
    }

    /// A deflated entry whose central-directory size disagrees with its
    /// stream.
    pub fn deflated_with_declared_size(&mut self, name: &str, bytes: &[u8], declared: u32) -> &mut Self {
        let payload = deflate(bytes);
        self.raw_entry(name, 8, &payload, declared, crc32(bytes))
    }

    pub fn raw_entry(&mut self, name: &str, method: u16, payload: &[u8], uncompressed_size: u32, crc32: u32) -> &mut Self {
        self.entries.push(PendingEntry {
            name: name.to_string(),
            method,
            payload: payload.to_vec(),
            uncompressed_size,
            crc32,
            local_alias: None,
        });
        self
    }

    /// Points entry `entry`'s central-directory record at the local header of
    /// entry `target`, producing overlapping data.
    pub fn alias_local_offset(&mut self, entry: usize, target: usize) -> &mut Self {
        self.entries[entry].local_alias = Some(target);
        self
    }

    pub fn finish(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut offsets = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            offsets.push(out.len() as u32);
            out.extend_from_slice(&0x0403_4b50u32.to_le_bytes());
            out.extend_from_slice(&20u16.to_le_bytes());
            out.extend_from_slice(&0u16.to_le_bytes());
            out.extend_from_slice(&e.method.to_le_bytes());
            out.extend_from_slice(&0u16.to_le_bytes());
            out.extend_from_slice(&0x21u16.to_le_bytes());
            out.extend_from_slice(&e.crc32.to_le_bytes());
            out.extend_from_slice(&(e.payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&e.uncompressed_size.to_le_bytes());
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(&0u16.to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&e.payload);
        }
        let cd_start = out.len() as u32;
        for (i, e) in self.entries.iter().enumerate() {
            let local = offsets[e.local_alias.unwrap_or(i)];
            out.extend_from_slice(&0x0201_4b50u32.to_le_bytes());
            out.extend_from_slice(&20u16.to_le_bytes());
            out.extend_from_slice(&20u16.to_le_bytes());
            out.extend_from_slice(&0u16.to_le_bytes());
            out.extend_from_slice(&e.method.to_le_bytes());
            out.extend_from_slice(&0u16.to_le_bytes());
            out.extend_from_slice(&0x21u16.to_le_bytes());
            out.extend_from_slice(&e.crc32.to_le_bytes());
            out.extend_from_slice(&(e.payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&e.uncompressed_size.to_le_bytes());
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(&0u16.to_le_bytes());
            out.extend_from_slice(&0u16.to_le_bytes());
            out.extend_from_slice(&0u16.to_le_bytes());
            out.extend_from_slice(&0u16.to_le_bytes());
            out.extend_from_slice(&0u32.to_le_bytes());
            out.extend_from_slice(&local.to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
        }
        let cd_size = out.len() as u32 - cd_start;
        let n = self.entries.len() as u16;
        out.extend_from_slice(&0x0605_4b50u32.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(&n.to_le_bytes());
        out.extend_from_slice(&cd_size.to_le_bytes());
        out.extend_from_slice(&cd_start.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out
    }
}

pub const ANDROID_NS: &str = "http://schemas.android.com/apk/res/android";

/// Attribute value for [`AxmlBuilder`].
#[derive(Debug, Clone)]
pub enum FixtureAttr {
    Str(String),
    Int(i32),
    Bool(bool),
}

#[derive(Debug, Clone)]
struct FixtureElement {
    name: String,
    attrs: Vec<(bool, String, FixtureAttr)>,
    children: Vec<FixtureElement>,
}

/// Encodes a small element tree in the binary XML chunk format used for
/// `AndroidManifest.xml`.
///
/// Attributes flagged `android` are placed in the Android namespace and given
/// their framework resource id, mirroring what the platform packager emits.
#[derive(Debug, Clone)]
pub struct AxmlBuilder {
    root: FixtureElement,
    utf8: bool,
}

fn framework_attr_id(name: &str) -> Option<u32> {
    Some(match name {
        "name" => 0x0101_0003,
        "versionCode" => 0x0101_021b,
        "versionName" => 0x0101_021c,
        "minSdkVersion" => 0x0101_020c,
        "targetSdkVersion" => 0x0101_0270,
        "label" => 0x0101_0001,
        "debuggable" => 0x0101_000f,
        _ => return None,
    })
}

impl AxmlBuilder {
    pub fn manifest(package: &str) -> Self {
        AxmlBuilder {
            root: FixtureElement {
                name: "manifest".into(),
                attrs: vec![(false, "package".into(), FixtureAttr::Str(package.into()))],
                children: Vec::new(),
            },
            utf8: false,
        }
    }

    /// Encode the string pool as UTF-8 instead of UTF-16.
    pub fn utf8(mut self, yes: bool) -> Self {
        self.utf8 = yes;
        self
    }

    pub fn permission(mut self, name: &str) -> Self {
        self.root.children.push(FixtureElement {
            name: "uses-permission".into(),
            attrs: vec![(true, "name".into(), FixtureAttr::Str(name.into()))],
            children: Vec::new(),
        });
        self
    }

    pub fn min_sdk(mut self, level: i32) -> Self {
        self.root.children.push(FixtureElement {
            name: "uses-sdk".into(),
            attrs: vec![(true, "minSdkVersion".into(), FixtureAttr::Int(level))],
            children: Vec::new(),
        });
        self
    }

    pub fn root_attr(mut self, android: bool, name: &str, value: FixtureAttr) -> Self {
        self.root.attrs.push((android, name.into(), value));
        self
    }

    pub fn child(mut self, name: &str, attrs: Vec<(bool, &str, FixtureAttr)>) -> Self {
        self.root.children.push(FixtureElement {
            name: name.into(),
            attrs: attrs.into_iter().map(|(a, n, v)| (a, n.to_string(), v)).collect(),
            children: Vec::new(),
        });
        self
    }

    pub fn build(&self) -> Vec<u8> {
        // Resource-mapped attribute names must occupy the lowest pool indices.
        let mut mapped: Vec<(String, u32)> = Vec::new();
        let mut plain: Vec<String> = Vec::new();
        fn walk(e: &FixtureElement, mapped: &mut Vec<(String, u32)>, plain: &mut Vec<String>) {
            for (android, name, value) in &e.attrs {
                match framework_attr_id(name).filter(|_| *android) {
                    Some(id) if !mapped.iter().any(|(n, _)| n == name) => mapped.push((name.clone(), id)),
                    Some(_) => {}
                    None => plain.push(name.clone()),
                }
                if let FixtureAttr::Str(s) = value {
                    plain.push(s.clone());
                }
            }
            plain.push(e.name.clone());
            for c in &e.children {
                walk(c, mapped, plain);
            }
        }
        walk(&self.root, &mut mapped, &mut plain);
        let mut pool: Vec<String> = mapped.iter().map(|(n, _)| n.clone()).collect();
        plain.push("android".into());
        plain.push(ANDROID_NS.into());
        for s in plain {
            if !pool.contains(&s) {
                pool.push(s);
            }
        }
        let idx = |s: &str| pool.iter().position(|p| p == s).expect("interned") as u32;

        let mut body = Vec::new();
        body.extend(string_pool_chunk(&pool, self.utf8));
        let mut resmap = Vec::new();
        for (_, id) in &mapped {
            resmap.extend_from_slice(&id.to_le_bytes());
        }
        body.extend(chunk(0x0180, 8, &[], &resmap));

        let ns_prefix = idx("android");
        let ns_uri = idx(ANDROID_NS);
        let ns_body = [ns_prefix.to_le_bytes(), ns_uri.to_le_bytes()].concat();
        body.extend(chunk(0x0100, 16, &node_header(1), &ns_body));
        encode_element(&self.root, &idx, ns_uri, &mut body);
        body.extend(chunk(0x0101, 16, &node_header(1), &ns_body));

        chunk(0x0003, 8, &[], &body)
    }
}

fn node_header(line: u32) -> Vec<u8> {
    let mut h = line.to_le_bytes().to_vec();
    h.extend_from_slice(&u32::MAX.to_le_bytes());
    h
}

fn chunk(kind: u16, header_size: u16, extra_header: &[u8], body: &[u8]) -> Vec<u8> {
    let total = 8 + extra_header.len() + body.len();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&kind.to_le_bytes());
    out.extend_from_slice(&header_size.to_le_bytes());
    out.extend_from_slice(&(total as u32).to_le_bytes());
    out.extend_from_slice(extra_header);
    out.extend_from_slice(body);
    out
}

fn string_pool_chunk(pool: &[String], utf8: bool) -> Vec<u8> {
    let mut data = Vec::new();
    let mut offsets = Vec::new();
    for s in pool {
        offsets.push(data.len() as u32);
        if utf8 {
            let chars = s.encode_utf16().count();
            push_len8(&mut data, chars);
            push_len8(&mut data, s.len());
            data.extend_from_slice(s.as_bytes());
            data.push(0);
        } else {
            let units: Vec<u16> = s.encode_utf16().collect();
            let n = units.len();
            if n > 0x7fff {
                data.extend_from_slice(&(((n >> 16) as u16) | 0x8000).to_le_bytes());
            }
            data.extend_from_slice(&((n & 0xffff) as u16).to_le_bytes());
            for u in units {
                data.extend_from_slice(&u.to_le_bytes());
            }
            data.extend_from_slice(&0u16.to_le_bytes());
        }
    }
    while data.len() % 4 != 0 {
        data.push(0);
    }
    let header_size = 28u32;
    let strings_start = header_size + 4 * pool.len() as u32;
    let mut hdr = Vec::new();
    hdr.extend_from_slice(&(pool.len() as u32).to_le_bytes());
    hdr.extend_from_slice(&0u32.to_le_bytes());
    hdr.extend_from_slice(&(if utf8 { 1u32 << 8 } else { 0 }).to_le_bytes());
    hdr.extend_from_slice(&strings_start.to_le_bytes());
    hdr.extend_from_slice(&0u32.to_le_bytes());
    let mut body = Vec::new();
    for o in offsets {
        body.extend_from_slice(&o.to_le_bytes());
    }
    body.extend(data);
    chunk(0x0001, header_size as u16, &hdr, &body)
}

fn push_len8(out: &mut Vec<u8>, n: usize) {
    if n > 0x7f {
        out.push(((n >> 8) as u8) | 0x80);
    }
    out.push((n & 0xff) as u8);
}

fn encode_element(e: &FixtureElement, idx: &dyn Fn(&str) -> u32, ns_uri: u32, out: &mut Vec<u8>) {
    let mut ext = Vec::new();
    ext.extend_from_slice(&u32::MAX.to_le_bytes());
    ext.extend_from_slice(&idx(&e.name).to_le_bytes());
    ext.extend_from_slice(&20u16.to_le_bytes());
    ext.extend_from_slice(&20u16.to_le_bytes());
    ext.extend_from_slice(&(e.attrs.len() as u16).to_le_bytes());
    ext.extend_from_slice(&0u16.to_le_bytes());
    ext.extend_from_slice(&0u16.to_le_bytes());
    ext.extend_from_slice(&0u16.to_le_bytes());
    for (android, name, value) in &e.attrs {
        let ns = if *android { ns_uri } else { u32::MAX };
        ext.extend_from_slice(&ns.to_le_bytes());
        ext.extend_from_slice(&idx(name).to_le_bytes());
        let (raw, kind, data) = match value {
            FixtureAttr::Str(s) => (idx(s), 0x03u8, idx(s)),
            FixtureAttr::Int(v) => (u32::MAX, 0x10, *v as u32),
            FixtureAttr::Bool(b) => (u32::MAX, 0x12, if *b { u32::MAX } else { 0 }),
        };
        ext.extend_from_slice(&raw.to_le_bytes());
        ext.extend_from_slice(&8u16.to_le_bytes());
        ext.push(0);
        ext.push(kind);
        ext.extend_from_slice(&data.to_le_bytes());
    }
    out.extend(chunk(0x0102, 16, &node_header(1), &ext));
    for c in &e.children {
        encode_element(c, idx, ns_uri, out);
    }
    let mut end = Vec::new();
    end.extend_from_slice(&u32::MAX.to_le_bytes());
    end.extend_from_slice(&idx(&e.name).to_le_bytes());
    out.extend(chunk(0x0103, 16, &node_header(1), &end));
}

/// Assembles an APK-shaped archive: binary manifest, any number of DEX
/// entries and arbitrary extra files.
#[derive(Clone)]
pub struct ApkBuilder {
    manifest: AxmlBuilder,
    dex: Vec<FixtureDex>,
    raw_dex: Vec<Vec<u8>>,
    files: Vec<(String, Vec<u8>)>,
}

impl ApkBuilder {
    pub fn new(package: &str) -> Self {
        ApkBuilder {
            manifest: AxmlBuilder::manifest(package),
            dex: Vec::new(),
            raw_dex: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn manifest(mut self, m: AxmlBuilder) -> Self {
        self.manifest = m;
        self
    }

    /// Appends a DEX unit; the first becomes `classes.dex`, then
    /// `classes2.dex` and so on.
    pub fn dex(mut self, d: FixtureDex) -> Self {
        self.dex.push(d);
        self
    }

    /// Appends pre-encoded DEX bytes after the builder-generated units.
    pub fn raw_dex(mut self, bytes: Vec<u8>) -> Self {
        self.raw_dex.push(bytes);
        self
    }

    pub fn file(mut self, name: &str, bytes: &[u8]) -> Self {
        self.files.push((name.to_string(), bytes.to_vec()));
        self
    }

    pub fn build(&self) -> Vec<u8> {
        let mut z = ZipBuilder::new();
        z.deflated("AndroidManifest.xml", &self.manifest.build());
        let encoded = self
            .dex
            .iter()
            .map(|d| d.build().expect("fixture dex spec is valid"))
            .chain(self.raw_dex.iter().cloned());
        for (i, bytes) in encoded.enumerate() {
            let name = if i == 0 {
                "classes.dex".to_string()
            } else {
                format!("classes{}.dex", i + 1)
            };
            z.deflated(&name, &bytes);
        }
        for (name, bytes) in &self.files {
            z.stored(name, bytes);
        }
        z.finish()
    }
}
