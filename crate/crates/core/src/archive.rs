//! Read-only ZIP container access for APK files.
//!
//! Only the central directory is trusted for entry metadata. Stored and
//! deflated entries are supported; ZIP64 archives are rejected.

use std::collections::HashMap;
use std::io::Read;

use flate2::read::DeflateDecoder;
use sha2::{Digest, Sha256};

use crate::deadline::{Deadline, Expired};

const EOCD_SIG: u32 = 0x0605_4b50;
const CDH_SIG: u32 = 0x0201_4b50;
const LFH_SIG: u32 = 0x0403_4b50;
const EOCD_LEN: usize = 22;
const LFH_LEN: usize = 30;
const MAX_COMMENT: usize = 0xffff;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ArchiveError {
    #[error("malformed archive: {0}")]
    MalformedArchive(String),
    #[error("entry not found: {0}")]
    EntryNotFound(String),
    #[error("cannot decompress {name}: {reason}")]
    DecompressionError { name: String, reason: String },
    #[error("{name}: inflated {actual} bytes, central directory declares {declared}")]
    SizeMismatch {
        name: String,
        declared: u64,
        actual: u64,
    },
    #[error("deadline exceeded while reading archive")]
    DeadlineExceeded,
}

impl From<Expired> for ArchiveError {
    fn from(_: Expired) -> Self {
        ArchiveError::DeadlineExceeded
    }
}

fn malformed(msg: impl Into<String>) -> ArchiveError {
    ArchiveError::MalformedArchive(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompressionMethod {
    Stored,
    Deflated,
    /// Any other method id; reading such an entry fails.
    Other(u16),
}

impl CompressionMethod {
    fn from_id(id: u16) -> Self {
        match id {
            0 => CompressionMethod::Stored,
            8 => CompressionMethod::Deflated,
            other => CompressionMethod::Other(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryMeta {
    pub name: String,
    pub compressed_size: u64,
    pub uncompressed_size: u64,
    pub method: CompressionMethod,
    pub crc32: u32,
    /// Byte range of the (possibly compressed) payload inside the source.
    data_start: usize,
    data_end: usize,
}

/// Central-directory index over an in-memory ZIP archive.
///
/// Immutable once built; `read_entry` may be called from many threads.
#[derive(Debug, Clone)]
pub struct ArchiveIndex<'a> {
    data: &'a [u8],
    entries: Vec<EntryMeta>,
    by_name: HashMap<String, usize>,
    warnings: Vec<String>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn at(buf: &'a [u8], pos: usize) -> Self {
        Cursor { buf, pos }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ArchiveError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| malformed(format!("truncated record at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ArchiveError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, ArchiveError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn find_eocd(data: &[u8]) -> Result<usize, ArchiveError> {
    if data.len() < EOCD_LEN {
        return Err(malformed("input shorter than an end-of-central-directory record"));
    }
    let lowest = data.len().saturating_sub(EOCD_LEN + MAX_COMMENT);
    let mut pos = data.len() - EOCD_LEN;
    loop {
        if u32::from_le_bytes([data[pos], data[pos + 1], data[pos + 2], data[pos + 3]]) == EOCD_SIG {
            let comment_len = u16::from_le_bytes([data[pos + 20], data[pos + 21]]) as usize;
            if pos + EOCD_LEN + comment_len <= data.len() {
                return Ok(pos);
            }
        }
        if pos == lowest {
            return Err(malformed("no end-of-central-directory record"));
        }
        pos -= 1;
    }
}

impl<'a> ArchiveIndex<'a> {
    /// Builds the index from the end-of-central-directory record and the
    /// central directory it points at.
    pub fn open(data: &'a [u8]) -> Result<Self, ArchiveError> {
        if data.is_empty() {
            return Err(malformed("empty input"));
        }
        let eocd = find_eocd(data)?;
        let mut c = Cursor::at(data, eocd + 4);
        let disk = c.u16()?;
        let cd_disk = c.u16()?;
        let disk_entries = c.u16()?;
        let total_entries = c.u16()?;
        let cd_size = c.u32()?;
        let cd_offset = c.u32()?;
        if total_entries == 0xffff || cd_size == u32::MAX || cd_offset == u32::MAX {
            return Err(malformed("ZIP64 archives are not supported"));
        }
        if disk != 0 || cd_disk != 0 || disk_entries != total_entries {
            return Err(malformed("multi-disk archives are not supported"));
        }
        let cd_start = cd_offset as usize;
        let cd_end = cd_start
            .checked_add(cd_size as usize)
            .filter(|&e| e <= eocd)
            .ok_or_else(|| malformed("central directory lies outside the archive"))?;

        let mut raw = Vec::with_capacity(total_entries as usize);
        let mut c = Cursor::at(&data[..cd_end], cd_start);
        for i in 0..total_entries {
            if c.u32()? != CDH_SIG {
                return Err(malformed(format!("bad central directory signature at entry {i}")));
            }
            let _made_by = c.u16()?;
            let _needed = c.u16()?;
            let flags = c.u16()?;
            let method = c.u16()?;
            let _time = c.u16()?;
            let _date = c.u16()?;
            let crc32 = c.u32()?;
            let compressed = c.u32()?;
            let uncompressed = c.u32()?;
            let name_len = c.u16()? as usize;
            let extra_len = c.u16()? as usize;
            let comment_len = c.u16()? as usize;
            let _disk_start = c.u16()?;
            let _internal = c.u16()?;
            let _external = c.u32()?;
            let local_offset = c.u32()?;
            let name_bytes = c.take(name_len)?;
            c.take(extra_len)?;
            c.take(comment_len)?;

            if compressed == u32::MAX || uncompressed == u32::MAX || local_offset == u32::MAX {
                return Err(malformed("ZIP64 entries are not supported"));
            }
            if flags & 1 != 0 {
                return Err(malformed("encrypted entries are not supported"));
            }
            let name = String::from_utf8_lossy(name_bytes).into_owned();
            let method = CompressionMethod::from_id(method);
            if method == CompressionMethod::Stored && compressed != uncompressed {
                return Err(malformed(format!(
                    "{name}: stored entry with differing compressed/uncompressed sizes"
                )));
            }
            raw.push((name, compressed as u64, uncompressed as u64, method, crc32, local_offset as usize));
        }

        let mut entries = Vec::with_capacity(raw.len());
        for (name, compressed, uncompressed, method, crc32, local) in raw {
            let mut l = Cursor::at(data, local);
            if l.u32()? != LFH_SIG {
                return Err(malformed(format!("{name}: bad local header signature")));
            }
            l.take(LFH_LEN - 4 - 4)?;
            let lname = l.u16()? as usize;
            let lextra = l.u16()? as usize;
            let data_start = local + LFH_LEN + lname + lextra;
            let data_end = data_start
                .checked_add(compressed as usize)
                .filter(|&e| e <= cd_start)
                .ok_or_else(|| malformed(format!("{name}: entry data out of bounds")))?;
            entries.push((
                local,
                EntryMeta {
                    name,
                    compressed_size: compressed,
                    uncompressed_size: uncompressed,
                    method,
                    crc32,
                    data_start,
                    data_end,
                },
            ));
        }

        // Every record (local header + payload) must be disjoint.
        let mut spans: Vec<(usize, usize)> = entries.iter().map(|(l, e)| (*l, e.data_end)).collect();
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(malformed(format!(
                    "overlapping entry data at offsets {} and {}",
                    w[0].0, w[1].0
                )));
            }
        }

        let mut warnings = Vec::new();
        let mut last: HashMap<&str, usize> = HashMap::new();
        for (i, (_, e)) in entries.iter().enumerate() {
            if last.insert(e.name.as_str(), i).is_some() {
                warnings.push(format!("duplicate entry name {:?}; keeping the last occurrence", e.name));
            }
        }
        let keep: Vec<bool> = entries
            .iter()
            .enumerate()
            .map(|(i, (_, e))| last[e.name.as_str()] == i)
            .collect();
        let entries: Vec<EntryMeta> = entries
            .into_iter()
            .zip(keep)
            .filter_map(|((_, e), k)| k.then_some(e))
            .collect();
        let by_name = entries.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();

        Ok(ArchiveIndex {
            data,
            entries,
            by_name,
            warnings,
        })
    }

    pub fn entries(&self) -> &[EntryMeta] {
        &self.entries
    }

    pub fn source_size(&self) -> u64 {
        self.data.len() as u64
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn get(&self, name: &str) -> Option<&EntryMeta> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    pub fn read_entry(&self, name: &str) -> Result<Vec<u8>, ArchiveError> {
        self.read_entry_until(name, &Deadline::none())
    }

    /// Reads and fully decompresses one entry, polling `deadline` between
    /// inflate chunks.
    pub fn read_entry_until(&self, name: &str, deadline: &Deadline) -> Result<Vec<u8>, ArchiveError> {
        let meta = self
            .get(name)
            .ok_or_else(|| ArchiveError::EntryNotFound(name.to_string()))?;
        let payload = &self.data[meta.data_start..meta.data_end];
        let out = match meta.method {
            CompressionMethod::Stored => payload.to_vec(),
            CompressionMethod::Deflated => inflate(meta, payload, deadline)?,
            CompressionMethod::Other(id) => {
                return Err(ArchiveError::DecompressionError {
                    name: meta.name.clone(),
                    reason: format!("unsupported compression method {id}"),
                })
            }
        };
        if out.len() as u64 != meta.uncompressed_size {
            return Err(ArchiveError::SizeMismatch {
                name: meta.name.clone(),
                declared: meta.uncompressed_size,
                actual: out.len() as u64,
            });
        }
        let mut crc = flate2::Crc::new();
        crc.update(&out);
        if crc.sum() != meta.crc32 {
            return Err(ArchiveError::DecompressionError {
                name: meta.name.clone(),
                reason: "CRC-32 mismatch".to_string(),
            });
        }
        Ok(out)
    }
}

fn inflate(meta: &EntryMeta, payload: &[u8], deadline: &Deadline) -> Result<Vec<u8>, ArchiveError> {
    const CHUNK: usize = 1 << 16;
    // One byte past the declared size is enough to detect overlong streams.
    let limit = meta.uncompressed_size + 1;
    let mut decoder = DeflateDecoder::new(payload).take(limit);
    let mut out = Vec::with_capacity(meta.uncompressed_size.min(64 << 20) as usize);
    let mut buf = vec![0u8; CHUNK];
    loop {
        deadline.check()?;
        let n = decoder.read(&mut buf).map_err(|e| ArchiveError::DecompressionError {
            name: meta.name.clone(),
            reason: e.to_string(),
        })?;
        if n == 0 {
            break;
        }
        out.extend_from_slice(&buf[..n]);
    }
    Ok(out)
}

/// Top-level `classes.dex`, `classes2.dex`, ... in load order.
pub fn enumerate_dex(index: &ArchiveIndex<'_>) -> Vec<String> {
    let mut found: Vec<(u32, &str)> = index
        .entries()
        .iter()
        .filter_map(|e| dex_ordinal(&e.name).map(|n| (n, e.name.as_str())))
        .collect();
    found.sort_unstable();
    found.into_iter().map(|(_, n)| n.to_string()).collect()
}

/// Load position of a top-level DEX entry name (`classes.dex` is 1), or
/// `None` for anything else.
pub fn dex_ordinal(name: &str) -> Option<u32> {
    let digits = name.strip_prefix("classes")?.strip_suffix(".dex")?;
    if digits.is_empty() {
        return Some(1);
    }
    if digits.starts_with('0') || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse::<u32>().ok().filter(|&n| n >= 2)
}

/// Entries under `lib/` whose file name contains `.so`.
pub fn enumerate_native_libs(index: &ArchiveIndex<'_>) -> Vec<String> {
    index
        .entries()
        .iter()
        .filter(|e| {
            e.name.starts_with("lib/")
                && e.name
                    .rsplit('/')
                    .next()
                    .is_some_and(|base| base.contains(".so"))
        })
        .map(|e| e.name.clone())
        .collect()
}

/// Lowercase hex SHA-256.
pub fn sha256_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::ZipBuilder;

    fn one_entry() -> Vec<u8> {
        let mut z = ZipBuilder::new();
        z.stored("a.txt", b"hello");
        z.finish()
    }

    #[test]
    fn opens_single_stored_entry() {
        let bytes = one_entry();
        let idx = ArchiveIndex::open(&bytes).unwrap();
        assert_eq!(idx.entries().len(), 1);
        assert_eq!(idx.entries()[0].name, "a.txt");
        assert_eq!(idx.read_entry("a.txt").unwrap(), b"hello");
    }

    #[test]
    fn empty_input_is_malformed() {
        assert!(matches!(ArchiveIndex::open(&[]), Err(ArchiveError::MalformedArchive(_))));
    }

    #[test]
    fn missing_entry() {
        let bytes = one_entry();
        let idx = ArchiveIndex::open(&bytes).unwrap();
        assert_eq!(
            idx.read_entry("b.txt"),
            Err(ArchiveError::EntryNotFound("b.txt".into()))
        );
    }

    #[test]
    fn deflated_round_trip() {
        let body: Vec<u8> = (0..10_000u32).flat_map(|i| (i % 251).to_le_bytes()).collect();
        let mut z = ZipBuilder::new();
        z.deflated("big.bin", &body);
        let bytes = z.finish();
        let idx = ArchiveIndex::open(&bytes).unwrap();
        assert_eq!(idx.entries()[0].method, CompressionMethod::Deflated);
        assert_eq!(idx.read_entry("big.bin").unwrap(), body);
    }

    #[test]
    fn declared_size_mismatch() {
        let mut z = ZipBuilder::new();
        z.deflated_with_declared_size("x", b"abcdefgh", 4);
        let bytes = z.finish();
        let idx = ArchiveIndex::open(&bytes).unwrap();
        assert!(matches!(idx.read_entry("x"), Err(ArchiveError::SizeMismatch { .. })));
    }

    #[test]
    fn corrupt_deflate_stream() {
        let mut z = ZipBuilder::new();
        z.raw_entry("x", 8, &[0xff, 0xff, 0xff, 0xff], 100, 0);
        let bytes = z.finish();
        let idx = ArchiveIndex::open(&bytes).unwrap();
        assert!(matches!(idx.read_entry("x"), Err(ArchiveError::DecompressionError { .. })));
    }

    #[test]
    fn unsupported_method() {
        let mut z = ZipBuilder::new();
        z.raw_entry("x", 12, b"BZh9", 4, 0);
        let bytes = z.finish();
        let idx = ArchiveIndex::open(&bytes).unwrap();
        assert!(matches!(idx.read_entry("x"), Err(ArchiveError::DecompressionError { .. })));
    }

    #[test]
    fn duplicate_names_keep_last() {
        let mut z = ZipBuilder::new();
        z.stored("dup", b"first");
        z.stored("other", b"o");
        z.stored("dup", b"second");
        let bytes = z.finish();
        let idx = ArchiveIndex::open(&bytes).unwrap();
        let names: Vec<_> = idx.entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["other", "dup"]);
        assert_eq!(idx.read_entry("dup").unwrap(), b"second");
        assert_eq!(idx.warnings().len(), 1);
    }

    #[test]
    fn zip64_marker_rejected() {
        let mut bytes = one_entry();
        let n = bytes.len();
        // total entries field of the EOCD
        bytes[n - 12] = 0xff;
        bytes[n - 11] = 0xff;
        bytes[n - 14] = 0xff;
        bytes[n - 13] = 0xff;
        assert!(matches!(ArchiveIndex::open(&bytes), Err(ArchiveError::MalformedArchive(_))));
    }

    #[test]
    fn overlapping_entries_rejected() {
        let mut z = ZipBuilder::new();
        z.stored("a", b"0123456789");
        z.stored("b", b"0123456789");
        z.alias_local_offset(1, 0);
        let bytes = z.finish();
        assert!(matches!(ArchiveIndex::open(&bytes), Err(ArchiveError::MalformedArchive(_))));
    }

    #[test]
    fn dex_ordering() {
        let mut z = ZipBuilder::new();
        for n in ["classes.dex", "classes3.dex", "classes2.dex", "classes10.dex", "assets/classes2.dex", "classes02.dex", "classes1.dex", "classesX.dex"] {
            z.stored(n, b"");
        }
        let bytes = z.finish();
        let idx = ArchiveIndex::open(&bytes).unwrap();
        assert_eq!(
            enumerate_dex(&idx),
            ["classes.dex", "classes2.dex", "classes3.dex", "classes10.dex"]
        );
    }

    #[test]
    fn no_dex() {
        let mut z = ZipBuilder::new();
        z.stored("resources.arsc", b"");
        let bytes = z.finish();
        assert!(enumerate_dex(&ArchiveIndex::open(&bytes).unwrap()).is_empty());
    }

    #[test]
    fn native_libs_only_under_lib() {
        let mut z = ZipBuilder::new();
        for n in ["lib/arm64-v8a/libcrypto.so", "lib/x86/libfoo.so.1.2", "assets/libbar.so", "lib/x86/readme.txt"] {
            z.stored(n, b"");
        }
        let bytes = z.finish();
        let idx = ArchiveIndex::open(&bytes).unwrap();
        assert_eq!(
            enumerate_native_libs(&idx),
            ["lib/arm64-v8a/libcrypto.so", "lib/x86/libfoo.so.1.2"]
        );
    }

    #[test]
    fn sha256_vectors() {
        assert_eq!(
            sha256_digest(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            sha256_digest(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn every_truncation_is_rejected_or_parsed() {
        let mut z = ZipBuilder::new();
        z.stored("AndroidManifest.xml", b"<manifest/>");
        z.deflated("classes.dex", &[7u8; 300]);
        let bytes = z.finish();
        for cut in 0..bytes.len() {
            let prefix = &bytes[..cut];
            if let Ok(idx) = ArchiveIndex::open(prefix) {
                for e in idx.entries() {
                    let _ = idx.read_entry(&e.name);
                }
            }
        }
    }
}
