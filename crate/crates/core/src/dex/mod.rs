//! DEX parsing down to the invocation level.
//!
//! [`parse_dex`] decodes the header and the string, type, proto and method
//! pools, then walks every method body instruction by instruction and records
//! each invoke that names a `method_ids` entry. Nothing below the invocation
//! level (registers, control flow, debug info) is interpreted.

pub mod builder;
mod instr;

use std::sync::Arc;

use crate::deadline::{Deadline, Expired, Ticker};
use instr::Step;

pub use builder::{build_fixture_dex, build_parse_bomb_dex, FixtureDex, FixtureError};

const HEADER_SIZE: usize = 0x70;
const ENDIAN_CONSTANT: u32 = 0x1234_5678;
const SUPPORTED_VERSIONS: [&[u8; 3]; 4] = [b"035", b"037", b"038", b"039"];
/// Instructions walked between two deadline polls.
const POLL_INTERVAL: u32 = 4096;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DexError {
    #[error("malformed dex: {0}")]
    MalformedDex(String),
    #[error("deadline exceeded while parsing dex")]
    DeadlineExceeded,
}

impl From<Expired> for DexError {
    fn from(_: Expired) -> Self {
        DexError::DeadlineExceeded
    }
}

fn malformed(msg: impl Into<String>) -> DexError {
    DexError::MalformedDex(msg.into())
}

/// A `(size, offset)` pair from the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Section {
    pub size: u32,
    pub off: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DexHeader {
    /// Three-digit format version, e.g. `"035"`.
    pub version: String,
    pub checksum: u32,
    pub file_size: u32,
    pub string_ids: Section,
    pub type_ids: Section,
    pub proto_ids: Section,
    pub field_ids: Section,
    pub method_ids: Section,
    pub class_defs: Section,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MethodRef {
    /// Dotted class name, e.g. `android.media.MediaDrm`.
    pub defining_class: Arc<str>,
    pub method_name: Arc<str>,
    pub shorty: Arc<str>,
}

impl MethodRef {
    /// A reference with shorty `V` (no arguments, void return).
    pub fn new(defining_class: &str, method_name: &str) -> Self {
        Self::with_shorty(defining_class, method_name, "V")
    }

    pub fn with_shorty(defining_class: &str, method_name: &str, shorty: &str) -> Self {
        MethodRef {
            defining_class: defining_class.into(),
            method_name: method_name.into(),
            shorty: shorty.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Invocation {
    pub caller_class: Arc<str>,
    pub target: MethodRef,
    pub dex_file: Arc<str>,
    /// File offset of the invoke instruction.
    pub code_offset: u32,
}

#[derive(Debug, Clone)]
pub struct DexUnit {
    pub entry_name: Arc<str>,
    pub header: DexHeader,
    pub strings: Vec<String>,
    /// Dotted type names, indexed like `type_ids`.
    pub types: Vec<Arc<str>>,
    pub methods: Vec<MethodRef>,
    /// Dotted names of the classes defined in this unit, in `class_defs` order.
    pub classes: Vec<Arc<str>>,
    pub invocations: Vec<Invocation>,
}

/// Renders a type descriptor the way Java source spells it:
/// `Lpkg/Name;` becomes `pkg.Name`, `[I` becomes `int[]`.
pub fn descriptor_to_dotted(desc: &str) -> String {
    let dims = desc.bytes().take_while(|&b| b == b'[').count();
    let base = &desc[dims..];
    let mut out = if let Some(inner) = base.strip_prefix('L').and_then(|b| b.strip_suffix(';')) {
        inner.replace('/', ".")
    } else {
        match base {
            "V" => "void",
            "Z" => "boolean",
            "B" => "byte",
            "S" => "short",
            "C" => "char",
            "I" => "int",
            "J" => "long",
            "F" => "float",
            "D" => "double",
            other => other,
        }
        .to_string()
    };
    for _ in 0..dims {
        out.push_str("[]");
    }
    out
}

/// Inverse of [`descriptor_to_dotted`] for class names.
pub fn dotted_to_descriptor(class: &str) -> String {
    format!("L{};", class.replace('.', "/"))
}

struct Bytes<'a> {
    buf: &'a [u8],
}

impl<'a> Bytes<'a> {
    fn u16(&self, at: usize) -> Result<u16, DexError> {
        self.buf
            .get(at..at.wrapping_add(2))
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .ok_or_else(|| malformed(format!("read past end at offset {at}")))
    }

    fn u32(&self, at: usize) -> Result<u32, DexError> {
        self.buf
            .get(at..at.wrapping_add(4))
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| malformed(format!("read past end at offset {at}")))
    }

    fn uleb128(&self, at: &mut usize) -> Result<u32, DexError> {
        let mut result: u32 = 0;
        for i in 0..5 {
            let b = *self
                .buf
                .get(*at)
                .ok_or_else(|| malformed(format!("ULEB128 runs past end at offset {at}")))?;
            *at += 1;
            if i == 4 && b > 0x0f {
                return Err(malformed("ULEB128 value exceeds 32 bits"));
            }
            result |= ((b & 0x7f) as u32) << (7 * i);
            if b & 0x80 == 0 {
                return Ok(result);
            }
        }
        Err(malformed("ULEB128 longer than 5 bytes"))
    }
}

/// Decodes a MUTF-8 `string_data_item` at `at`.
fn read_string(b: &Bytes<'_>, mut at: usize) -> Result<String, DexError> {
    let utf16_len = b.uleb128(&mut at)? as usize;
    let mut units: Vec<u16> = Vec::with_capacity(utf16_len.min(4096));
    loop {
        let byte = *b.buf.get(at).ok_or_else(|| malformed("unterminated string data"))?;
        at += 1;
        let unit = match byte {
            0 => break,
            0x01..=0x7f => byte as u16,
            0xc0..=0xdf => {
                let b1 = *b.buf.get(at).ok_or_else(|| malformed("truncated MUTF-8 sequence"))?;
                at += 1;
                (((byte & 0x1f) as u16) << 6) | (b1 & 0x3f) as u16
            }
            0xe0..=0xef => {
                let tail = b.buf.get(at..at + 2).ok_or_else(|| malformed("truncated MUTF-8 sequence"))?;
                at += 2;
                (((byte & 0x0f) as u16) << 12) | (((tail[0] & 0x3f) as u16) << 6) | (tail[1] & 0x3f) as u16
            }
            _ => return Err(malformed(format!("invalid MUTF-8 lead byte {byte:#04x}"))),
        };
        units.push(unit);
    }
    Ok(String::from_utf16_lossy(&units))
}

fn read_section(b: &Bytes<'_>, at: usize) -> Result<Section, DexError> {
    Ok(Section {
        size: b.u32(at)?,
        off: b.u32(at + 4)?,
    })
}

fn check_region(name: &str, s: Section, item: usize, file_size: usize) -> Result<(), DexError> {
    if s.size == 0 {
        return Ok(());
    }
    let end = (s.size as usize)
        .checked_mul(item)
        .and_then(|len| len.checked_add(s.off as usize))
        .ok_or_else(|| malformed(format!("{name} region overflows")))?;
    if (s.off as usize) < HEADER_SIZE || end > file_size {
        return Err(malformed(format!("{name} region [{}, {end}) outside file", s.off)));
    }
    Ok(())
}

fn parse_header(bytes: &[u8]) -> Result<DexHeader, DexError> {
    if bytes.len() < HEADER_SIZE {
        return Err(malformed(format!("{} bytes is shorter than a dex header", bytes.len())));
    }
    if &bytes[0..4] != b"dex\n" || bytes[7] != 0 {
        return Err(malformed("bad magic"));
    }
    let version: &[u8; 3] = bytes[4..7].try_into().expect("3 bytes");
    if !SUPPORTED_VERSIONS.contains(&version) {
        return Err(malformed(format!(
            "unsupported dex version {}",
            String::from_utf8_lossy(version)
        )));
    }
    let b = Bytes { buf: bytes };
    if b.u32(40)? != ENDIAN_CONSTANT {
        return Err(malformed("unsupported endianness tag"));
    }
    let file_size = b.u32(32)?;
    if (file_size as usize) < HEADER_SIZE || file_size as usize > bytes.len() {
        return Err(malformed(format!(
            "header file_size {file_size} disagrees with {} available bytes",
            bytes.len()
        )));
    }
    let header = DexHeader {
        version: String::from_utf8_lossy(version).into_owned(),
        checksum: b.u32(8)?,
        file_size,
        string_ids: read_section(&b, 56)?,
        type_ids: read_section(&b, 64)?,
        proto_ids: read_section(&b, 72)?,
        field_ids: read_section(&b, 80)?,
        method_ids: read_section(&b, 88)?,
        class_defs: read_section(&b, 96)?,
    };
    let fs = file_size as usize;
    check_region("string_ids", header.string_ids, 4, fs)?;
    check_region("type_ids", header.type_ids, 4, fs)?;
    check_region("proto_ids", header.proto_ids, 12, fs)?;
    check_region("field_ids", header.field_ids, 8, fs)?;
    check_region("method_ids", header.method_ids, 8, fs)?;
    check_region("class_defs", header.class_defs, 32, fs)?;
    Ok(header)
}

pub fn parse_dex(bytes: &[u8], entry_name: &str) -> Result<DexUnit, DexError> {
    parse_dex_until(bytes, entry_name, &Deadline::none())
}

/// [`parse_dex`] with a deadline polled between classes and every few
/// thousand instructions.
pub fn parse_dex_until(bytes: &[u8], entry_name: &str, deadline: &Deadline) -> Result<DexUnit, DexError> {
    let header = parse_header(bytes)?;
    let data = &bytes[..header.file_size as usize];
    let b = Bytes { buf: data };

    let mut strings = Vec::with_capacity(header.string_ids.size as usize);
    for i in 0..header.string_ids.size as usize {
        let off = b.u32(header.string_ids.off as usize + 4 * i)? as usize;
        strings.push(read_string(&b, off)?);
    }
    let string_at = |idx: u32| -> Result<&str, DexError> {
        strings
            .get(idx as usize)
            .map(String::as_str)
            .ok_or_else(|| malformed(format!("string index {idx} out of range")))
    };

    let mut types: Vec<Arc<str>> = Vec::with_capacity(header.type_ids.size as usize);
    for i in 0..header.type_ids.size as usize {
        let idx = b.u32(header.type_ids.off as usize + 4 * i)?;
        types.push(descriptor_to_dotted(string_at(idx)?).into());
    }
    let type_at = |idx: u32| -> Result<&Arc<str>, DexError> {
        types
            .get(idx as usize)
            .ok_or_else(|| malformed(format!("type index {idx} out of range")))
    };

    let mut shorties: Vec<Arc<str>> = Vec::with_capacity(header.proto_ids.size as usize);
    for i in 0..header.proto_ids.size as usize {
        let idx = b.u32(header.proto_ids.off as usize + 12 * i)?;
        shorties.push(string_at(idx)?.into());
    }

    let mut names: Vec<Option<Arc<str>>> = vec![None; strings.len()];
    let mut methods = Vec::with_capacity(header.method_ids.size as usize);
    for i in 0..header.method_ids.size as usize {
        let at = header.method_ids.off as usize + 8 * i;
        let class_idx = b.u16(at)? as u32;
        let proto_idx = b.u16(at + 2)? as usize;
        let name_idx = b.u32(at + 4)?;
        let name = string_at(name_idx)?;
        let name = names[name_idx as usize].get_or_insert_with(|| name.into()).clone();
        let shorty = shorties
            .get(proto_idx)
            .ok_or_else(|| malformed(format!("proto index {proto_idx} out of range")))?
            .clone();
        methods.push(MethodRef {
            defining_class: type_at(class_idx)?.clone(),
            method_name: name,
            shorty,
        });
    }

    let entry: Arc<str> = entry_name.into();
    let mut classes = Vec::with_capacity(header.class_defs.size as usize);
    let mut invocations = Vec::new();
    let mut ticker = Ticker::new(deadline, POLL_INTERVAL);
    for i in 0..header.class_defs.size as usize {
        deadline.check()?;
        let at = header.class_defs.off as usize + 32 * i;
        let caller = type_at(b.u32(at)?)?.clone();
        let class_data_off = b.u32(at + 24)? as usize;
        classes.push(caller.clone());
        if class_data_off == 0 {
            continue;
        }
        let mut pos = class_data_off;
        let static_fields = b.uleb128(&mut pos)?;
        let instance_fields = b.uleb128(&mut pos)?;
        let direct_methods = b.uleb128(&mut pos)?;
        let virtual_methods = b.uleb128(&mut pos)?;
        for _ in 0..(static_fields as u64 + instance_fields as u64) {
            b.uleb128(&mut pos)?;
            b.uleb128(&mut pos)?;
        }
        for count in [direct_methods, virtual_methods] {
            let mut method_idx: u32 = 0;
            for _ in 0..count {
                ticker.tick()?;
                let diff = b.uleb128(&mut pos)?;
                method_idx = method_idx
                    .checked_add(diff)
                    .ok_or_else(|| malformed("method index overflow"))?;
                if method_idx >= header.method_ids.size {
                    return Err(malformed(format!(
                        "method index {method_idx} >= method_ids_size {}",
                        header.method_ids.size
                    )));
                }
                let _access = b.uleb128(&mut pos)?;
                let code_off = b.uleb128(&mut pos)? as usize;
                if code_off != 0 {
                    walk_code(&b, code_off, &caller, &entry, &methods, &mut invocations, &mut ticker)?;
                }
            }
        }
    }

    Ok(DexUnit {
        entry_name: entry,
        header,
        strings,
        types,
        methods,
        classes,
        invocations,
    })
}

fn walk_code(
    b: &Bytes<'_>,
    code_off: usize,
    caller: &Arc<str>,
    entry: &Arc<str>,
    methods: &[MethodRef],
    out: &mut Vec<Invocation>,
    ticker: &mut Ticker<'_>,
) -> Result<(), DexError> {
    let insns_size = b.u32(code_off.checked_add(12).ok_or_else(|| malformed("code offset overflow"))?)? as usize;
    let start = code_off + 16;
    let end = insns_size
        .checked_mul(2)
        .and_then(|n| n.checked_add(start))
        .filter(|&e| e <= b.buf.len())
        .ok_or_else(|| malformed(format!("code item at {code_off} overruns file")))?;
    let insns: Vec<u16> = b.buf[start..end]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();

    let mut pc = 0usize;
    while pc < insns.len() {
        ticker.tick()?;
        let width = match instr::step(&insns, pc) {
            Some(Step::Insn(w)) | Some(Step::Payload(w)) => w,
            None => return Err(malformed(format!("truncated payload at code offset {code_off}+{pc}"))),
        };
        if pc + width > insns.len() {
            return Err(malformed(format!(
                "instruction at unit {pc} escapes code region of {} units",
                insns.len()
            )));
        }
        let op = (insns[pc] & 0xff) as u8;
        if instr::is_method_invoke(op) {
            let idx = insns[pc + 1] as usize;
            let target = methods.get(idx).ok_or_else(|| {
                malformed(format!("invoke names method {idx} >= method_ids_size {}", methods.len()))
            })?;
            out.push(Invocation {
                caller_class: caller.clone(),
                target: target.clone(),
                dex_file: entry.clone(),
                code_offset: (start + 2 * pc) as u32,
            });
        }
        pc += width;
    }
    Ok(())
}

impl DexUnit {
    /// Every `method_ids` entry, referenced or not.
    pub fn method_refs(&self) -> &[MethodRef] {
        &self.methods
    }

    pub fn type_names(&self) -> &[Arc<str>] {
        &self.types
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(caller: &str, targets: &[(&str, &str)]) -> (String, Vec<MethodRef>) {
        (
            caller.to_string(),
            targets.iter().map(|(c, m)| MethodRef::new(c, m)).collect(),
        )
    }

    #[test]
    fn single_mediadrm_call() {
        let bytes = build_fixture_dex(&[spec("com.test.Main", &[("android.media.MediaDrm", "<init>")])]).unwrap();
        let unit = parse_dex(&bytes, "classes.dex").unwrap();
        assert_eq!(unit.invocations.len(), 1);
        let inv = &unit.invocations[0];
        assert_eq!(&*inv.caller_class, "com.test.Main");
        assert_eq!(&*inv.target.defining_class, "android.media.MediaDrm");
        assert_eq!(&*inv.target.method_name, "<init>");
        assert_eq!(&*inv.dex_file, "classes.dex");
        assert_eq!(unit.classes.len(), 1);
    }

    #[test]
    fn no_class_defs() {
        let bytes = build_fixture_dex(&[]).unwrap();
        let unit = parse_dex(&bytes, "classes.dex").unwrap();
        assert!(unit.invocations.is_empty());
        assert_eq!(unit.header.class_defs.size, 0);
    }

    #[test]
    fn four_bytes_is_malformed() {
        assert!(matches!(parse_dex(b"dex\n", "classes.dex"), Err(DexError::MalformedDex(_))));
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = build_fixture_dex(&[]).unwrap();
        bytes[4..7].copy_from_slice(b"034");
        assert!(matches!(parse_dex(&bytes, "x"), Err(DexError::MalformedDex(_))));
        bytes[4..7].copy_from_slice(b"039");
        assert!(parse_dex(&bytes, "x").is_ok());
    }

    #[test]
    fn pool_sizes_agree_with_header() {
        let bytes = build_fixture_dex(&[
            spec("a.B", &[("java.security.KeyStore", "getInstance"), ("a.B", "run")]),
            spec("c.D", &[("java.lang.Object", "<init>")]),
        ])
        .unwrap();
        let unit = parse_dex(&bytes, "classes.dex").unwrap();
        assert_eq!(unit.strings.len(), unit.header.string_ids.size as usize);
        assert_eq!(unit.types.len(), unit.header.type_ids.size as usize);
        assert_eq!(unit.methods.len(), unit.header.method_ids.size as usize);
        assert_eq!(unit.classes.len(), unit.header.class_defs.size as usize);
    }

    #[test]
    fn code_offsets_point_at_invokes() {
        let bytes = build_fixture_dex(&[spec("a.B", &[("x.Y", "f"), ("x.Y", "g")])]).unwrap();
        let unit = parse_dex(&bytes, "classes.dex").unwrap();
        for inv in &unit.invocations {
            let op = bytes[inv.code_offset as usize];
            assert!(op == 0x71 || op == 0x77, "opcode {op:#x}");
        }
    }

    #[test]
    fn descriptors() {
        assert_eq!(descriptor_to_dotted("Lcom/example/Foo$Bar;"), "com.example.Foo$Bar");
        assert_eq!(descriptor_to_dotted("[I"), "int[]");
        assert_eq!(descriptor_to_dotted("[[Ljava/lang/String;"), "java.lang.String[][]");
        assert_eq!(dotted_to_descriptor("a.b.C"), "La/b/C;");
    }

    #[test]
    fn uleb128_rejects_overlong() {
        let b = Bytes { buf: &[0x80, 0x80, 0x80, 0x80, 0x80, 0x01] };
        let mut at = 0;
        assert!(b.uleb128(&mut at).is_err());
        let b = Bytes { buf: &[0xff, 0xff, 0xff, 0xff, 0x0f] };
        let mut at = 0;
        assert_eq!(b.uleb128(&mut at).unwrap(), u32::MAX);
    }

    #[test]
    fn parse_bomb_honors_deadline() {
        let bytes = build_parse_bomb_dex(4, 64, 60_000);
        let d = Deadline::after(std::time::Duration::from_millis(50));
        let t = std::time::Instant::now();
        assert_eq!(parse_dex_until(&bytes, "classes.dex", &d).unwrap_err(), DexError::DeadlineExceeded);
        assert!(t.elapsed() < std::time::Duration::from_secs(2));
    }
}
