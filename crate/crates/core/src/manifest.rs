//! Binary XML (`AndroidManifest.xml`) decoding.
//!
//! Interprets the string pool, resource map, namespace and element chunks;
//! every other chunk type is skipped by its declared size.

use serde::Serialize;

const RES_XML: u16 = 0x0003;
const RES_STRING_POOL: u16 = 0x0001;
const RES_XML_RESOURCE_MAP: u16 = 0x0180;
const RES_XML_START_NAMESPACE: u16 = 0x0100;
const RES_XML_END_NAMESPACE: u16 = 0x0101;
const RES_XML_START_ELEMENT: u16 = 0x0102;
const RES_XML_END_ELEMENT: u16 = 0x0103;

const TYPE_STRING: u8 = 0x03;
const TYPE_INT_DEC: u8 = 0x10;
const TYPE_INT_HEX: u8 = 0x11;
const TYPE_INT_BOOLEAN: u8 = 0x12;

const NO_INDEX: u32 = u32::MAX;
const MAX_DEPTH: usize = 256;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ManifestError {
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("manifest has no package attribute")]
    MissingPackageName,
}

fn malformed(msg: impl Into<String>) -> ManifestError {
    ManifestError::MalformedManifest(msg.into())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum AttrValue {
    String(String),
    Int(i64),
    Bool(bool),
    /// Typed values the framework does not interpret (references,
    /// dimensions, colours, ...), surfaced as the raw data word.
    Raw(u32),
}

impl AttrValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            AttrValue::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            AttrValue::Int(v) => Some(*v),
            AttrValue::String(s) => s.trim().parse().ok(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Attribute {
    pub namespace: Option<String>,
    pub name: String,
    pub value: AttrValue,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Element {
    pub name: String,
    pub attributes: Vec<Attribute>,
    pub children: Vec<Element>,
}

impl Element {
    /// First attribute with this local name, regardless of namespace.
    pub fn attr(&self, name: &str) -> Option<&AttrValue> {
        self.attributes.iter().find(|a| a.name == name).map(|a| &a.value)
    }

    pub fn children_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Element> + 'a {
        self.children.iter().filter(move |c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestInfo {
    pub package_name: String,
    pub permissions: Vec<String>,
    pub min_sdk: Option<i64>,
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn u16(&self, at: usize) -> Result<u16, ManifestError> {
        self.buf
            .get(at..at + 2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .ok_or_else(|| malformed(format!("truncated at offset {at}")))
    }

    fn u32(&self, at: usize) -> Result<u32, ManifestError> {
        self.buf
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| malformed(format!("truncated at offset {at}")))
    }
}

#[derive(Default)]
struct StringPool {
    strings: Vec<String>,
}

impl StringPool {
    fn parse(chunk: &[u8], header_size: usize) -> Result<Self, ManifestError> {
        let r = Reader { buf: chunk };
        let count = r.u32(8)? as usize;
        let flags = r.u32(16)?;
        let strings_start = r.u32(20)? as usize;
        let utf8 = flags & (1 << 8) != 0;
        let offsets_at = header_size;
        if count > chunk.len() / 4 {
            return Err(malformed("string pool count exceeds chunk size"));
        }
        let mut strings = Vec::with_capacity(count);
        for i in 0..count {
            let off = r.u32(offsets_at + 4 * i)? as usize;
            let at = strings_start
                .checked_add(off)
                .filter(|&a| a < chunk.len())
                .ok_or_else(|| malformed(format!("string {i} outside pool")))?;
            strings.push(if utf8 {
                decode_utf8_entry(chunk, at)?
            } else {
                decode_utf16_entry(chunk, at)?
            });
        }
        Ok(StringPool { strings })
    }

    fn get(&self, idx: u32) -> Result<&str, ManifestError> {
        self.strings
            .get(idx as usize)
            .map(String::as_str)
            .ok_or_else(|| malformed(format!("string index {idx} out of pool bounds")))
    }

    fn opt(&self, idx: u32) -> Result<Option<&str>, ManifestError> {
        if idx == NO_INDEX {
            Ok(None)
        } else {
            self.get(idx).map(Some)
        }
    }
}

fn decode_utf8_entry(chunk: &[u8], mut at: usize) -> Result<String, ManifestError> {
    let len8 = |at: &mut usize| -> Result<usize, ManifestError> {
        let b0 = *chunk.get(*at).ok_or_else(|| malformed("truncated string length"))? as usize;
        *at += 1;
        if b0 & 0x80 != 0 {
            let b1 = *chunk.get(*at).ok_or_else(|| malformed("truncated string length"))? as usize;
            *at += 1;
            Ok(((b0 & 0x7f) << 8) | b1)
        } else {
            Ok(b0)
        }
    };
    let _utf16_len = len8(&mut at)?;
    let n = len8(&mut at)?;
    let bytes = chunk
        .get(at..at + n)
        .ok_or_else(|| malformed("string data overruns pool"))?;
    Ok(String::from_utf8_lossy(bytes).into_owned())
}

fn decode_utf16_entry(chunk: &[u8], mut at: usize) -> Result<String, ManifestError> {
    let r = Reader { buf: chunk };
    let mut n = r.u16(at)? as usize;
    at += 2;
    if n & 0x8000 != 0 {
        n = ((n & 0x7fff) << 16) | r.u16(at)? as usize;
        at += 2;
    }
    let end = n
        .checked_mul(2)
        .and_then(|b| b.checked_add(at))
        .filter(|&e| e <= chunk.len())
        .ok_or_else(|| malformed("string data overruns pool"))?;
    let units: Vec<u16> = chunk[at..end]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok(String::from_utf16_lossy(&units))
}

/// Local names for framework attribute resource ids, used when a compiled
/// manifest has stripped the attribute name strings.
fn framework_attr_name(id: u32) -> Option<&'static str> {
    Some(match id {
        0x0101_0003 => "name",
        0x0101_020c => "minSdkVersion",
        0x0101_0270 => "targetSdkVersion",
        0x0101_021b => "versionCode",
        0x0101_021c => "versionName",
        0x0101_0001 => "label",
        0x0101_0002 => "icon",
        0x0101_000f => "debuggable",
        _ => return None,
    })
}

/// Decodes a binary XML document into an element tree rooted at its first
/// top-level element.
pub fn parse_binary_xml(bytes: &[u8]) -> Result<Element, ManifestError> {
    let r = Reader { buf: bytes };
    if bytes.len() < 8 || r.u16(0)? != RES_XML {
        return Err(malformed("missing binary XML file header"));
    }
    let header_size = r.u16(2)? as usize;
    let declared = r.u32(4)? as usize;
    if header_size < 8 || declared < header_size || declared > bytes.len() {
        return Err(malformed("bad file header sizes"));
    }
    let doc = &bytes[..declared];

    let mut pool = StringPool::default();
    let mut resource_ids: Vec<u32> = Vec::new();
    let mut stack: Vec<Element> = Vec::new();
    let mut root: Option<Element> = None;

    let mut pos = header_size;
    while pos < doc.len() {
        let r = Reader { buf: doc };
        let kind = r.u16(pos)?;
        let chunk_header = r.u16(pos + 2)? as usize;
        let size = r.u32(pos + 4)? as usize;
        if size < 8 || chunk_header < 8 || chunk_header > size || pos + size > doc.len() {
            return Err(malformed(format!("bad chunk size at offset {pos}")));
        }
        let chunk = &doc[pos..pos + size];
        let c = Reader { buf: chunk };
        match kind {
            RES_STRING_POOL => pool = StringPool::parse(chunk, chunk_header)?,
            RES_XML_RESOURCE_MAP => {
                resource_ids = chunk[chunk_header..]
                    .chunks_exact(4)
                    .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
            }
            RES_XML_START_NAMESPACE | RES_XML_END_NAMESPACE => {}
            RES_XML_START_ELEMENT => {
                if root.is_some() {
                    return Err(malformed("content after the root element"));
                }
                if stack.len() >= MAX_DEPTH {
                    return Err(malformed("element nesting too deep"));
                }
                let ext = chunk_header;
                let name = pool.get(c.u32(ext + 4)?)?.to_string();
                let attr_start = c.u16(ext + 8)? as usize;
                let attr_size = c.u16(ext + 10)? as usize;
                let attr_count = c.u16(ext + 12)? as usize;
                if attr_size < 20 && attr_count > 0 {
                    return Err(malformed("attribute records too small"));
                }
                let mut attributes = Vec::with_capacity(attr_count.min(64));
                for i in 0..attr_count {
                    let at = ext + attr_start + i * attr_size;
                    let ns = pool.opt(c.u32(at)?)?.map(str::to_string);
                    let name_idx = c.u32(at + 4)?;
                    let raw = c.u32(at + 8)?;
                    let data_type = *chunk.get(at + 15).ok_or_else(|| malformed("truncated attribute"))?;
                    let data = c.u32(at + 16)?;
                    let mut attr_name = pool.get(name_idx)?.to_string();
                    if attr_name.is_empty() {
                        if let Some(n) = resource_ids.get(name_idx as usize).copied().and_then(framework_attr_name) {
                            attr_name = n.to_string();
                        }
                    }
                    let value = match data_type {
                        TYPE_STRING => AttrValue::String(pool.get(data)?.to_string()),
                        TYPE_INT_DEC | TYPE_INT_HEX => AttrValue::Int(data as i32 as i64),
                        TYPE_INT_BOOLEAN => AttrValue::Bool(data != 0),
                        _ if raw != NO_INDEX => AttrValue::String(pool.get(raw)?.to_string()),
                        _ => AttrValue::Raw(data),
                    };
                    attributes.push(Attribute {
                        namespace: ns,
                        name: attr_name,
                        value,
                    });
                }
                stack.push(Element {
                    name,
                    attributes,
                    children: Vec::new(),
                });
            }
            RES_XML_END_ELEMENT => {
                let name = pool.get(c.u32(chunk_header + 4)?)?;
                let el = stack.pop().ok_or_else(|| malformed("end element without start"))?;
                if el.name != name {
                    return Err(malformed(format!("mismatched end element {name} for {}", el.name)));
                }
                match stack.last_mut() {
                    Some(parent) => parent.children.push(el),
                    None => root = Some(el),
                }
            }
            _ => {}
        }
        pos += size;
    }
    if !stack.is_empty() {
        return Err(malformed("unclosed elements at end of document"));
    }
    root.ok_or_else(|| malformed("document has no root element"))
}

pub fn extract_manifest_info(root: &Element) -> Result<ManifestInfo, ManifestError> {
    if root.name != "manifest" {
        return Err(malformed(format!("root element is {}, expected manifest", root.name)));
    }
    let package_name = root
        .attr("package")
        .and_then(AttrValue::as_str)
        .filter(|p| !p.is_empty())
        .ok_or(ManifestError::MissingPackageName)?
        .to_string();
    let permissions = root
        .children_named("uses-permission")
        .filter_map(|e| e.attr("name").and_then(AttrValue::as_str).map(str::to_string))
        .collect();
    let min_sdk = root
        .children_named("uses-sdk")
        .find_map(|e| e.attr("minSdkVersion").and_then(AttrValue::as_int));
    Ok(ManifestInfo {
        package_name,
        permissions,
        min_sdk,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::{AxmlBuilder, FixtureAttr};

    #[test]
    fn minimal_manifest() {
        let bytes = AxmlBuilder::manifest("com.example.app").build();
        let tree = parse_binary_xml(&bytes).unwrap();
        assert_eq!(tree.name, "manifest");
        assert_eq!(tree.attr("package"), Some(&AttrValue::String("com.example.app".into())));
        let info = extract_manifest_info(&tree).unwrap();
        assert_eq!(info.package_name, "com.example.app");
        assert!(info.permissions.is_empty());
        assert_eq!(info.min_sdk, None);
    }

    #[test]
    fn permissions_in_document_order() {
        for utf8 in [false, true] {
            let bytes = AxmlBuilder::manifest("com.package")
                .utf8(utf8)
                .min_sdk(23)
                .permission("android.permission.INTERNET")
                .permission("android.permission.USE_BIOMETRIC")
                .build();
            let info = extract_manifest_info(&parse_binary_xml(&bytes).unwrap()).unwrap();
            assert_eq!(info.package_name, "com.package");
            assert_eq!(
                info.permissions,
                ["android.permission.INTERNET", "android.permission.USE_BIOMETRIC"]
            );
            assert_eq!(info.min_sdk, Some(23));
        }
    }

    #[test]
    fn plain_text_rejected() {
        assert!(matches!(
            parse_binary_xml(b"<manifest package=\"a.b\"/>"),
            Err(ManifestError::MalformedManifest(_))
        ));
    }

    #[test]
    fn truncated_rejected() {
        let bytes = AxmlBuilder::manifest("com.example.app").permission("p.q").build();
        let half = &bytes[..bytes.len() / 2];
        assert!(matches!(parse_binary_xml(half), Err(ManifestError::MalformedManifest(_))));
    }

    #[test]
    fn missing_package() {
        let bytes = AxmlBuilder::manifest("")
            .root_attr(true, "versionCode", FixtureAttr::Int(3))
            .build();
        let tree = parse_binary_xml(&bytes).unwrap();
        assert_eq!(extract_manifest_info(&tree), Err(ManifestError::MissingPackageName));
    }

    #[test]
    fn typed_values() {
        let bytes = AxmlBuilder::manifest("a.b")
            .child("application", vec![(true, "debuggable", FixtureAttr::Bool(true))])
            .build();
        let tree = parse_binary_xml(&bytes).unwrap();
        let app = tree.children_named("application").next().unwrap();
        assert_eq!(app.attr("debuggable"), Some(&AttrValue::Bool(true)));
    }

    #[test]
    fn unknown_chunks_are_skipped() {
        let mut bytes = AxmlBuilder::manifest("a.b").build();
        // splice an unknown 12-byte chunk right after the file header
        let unknown = [0x77u8, 0x07, 8, 0, 12, 0, 0, 0, 1, 2, 3, 4];
        bytes.splice(8..8, unknown);
        let total = bytes.len() as u32;
        bytes[4..8].copy_from_slice(&total.to_le_bytes());
        let tree = parse_binary_xml(&bytes).unwrap();
        assert_eq!(extract_manifest_info(&tree).unwrap().package_name, "a.b");
    }

    #[test]
    fn every_truncation_is_total() {
        let bytes = AxmlBuilder::manifest("com.example.app")
            .permission("android.permission.INTERNET")
            .min_sdk(21)
            .build();
        for cut in 0..bytes.len() {
            let _ = parse_binary_xml(&bytes[..cut]);
        }
    }
}
