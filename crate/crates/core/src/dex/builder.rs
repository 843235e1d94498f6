//! Emits small, structurally valid DEX files with planted invocations.
//!
//! Each caller class gets a single static `run()V` method whose body is one
//! `invoke-static` (or `invoke-static/range` beyond five argument words) per
//! requested target followed by `return-void`. Pools are sorted as the format
//! requires, a `map_list` is written and the Adler-32 checksum is filled in;
//! the SHA-1 signature field is left zeroed.

use std::collections::{BTreeMap, BTreeSet};

use super::{dotted_to_descriptor, MethodRef};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FixtureError {
    #[error("invalid fixture spec: {0}")]
    InvalidSpec(String),
}

fn invalid(msg: impl Into<String>) -> FixtureError {
    FixtureError::InvalidSpec(msg.into())
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '$')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '$')
}

fn valid_class(name: &str) -> bool {
    !name.is_empty() && name.split('.').all(is_ident)
}

fn valid_method(name: &str) -> bool {
    name == "<init>" || name == "<clinit>" || is_ident(name)
}

fn shorty_type(c: char) -> Option<&'static str> {
    Some(match c {
        'V' => "V",
        'Z' => "Z",
        'B' => "B",
        'S' => "S",
        'C' => "C",
        'I' => "I",
        'J' => "J",
        'F' => "F",
        'D' => "D",
        'L' => "Ljava/lang/Object;",
        _ => return None,
    })
}

/// Register words taken by the arguments of a shorty.
fn arg_words(shorty: &str) -> u16 {
    shorty.chars().skip(1).map(|c| if c == 'J' || c == 'D' { 2 } else { 1 }).sum()
}

/// Builder behind [`build_fixture_dex`] with a few extra knobs for tests.
#[derive(Debug, Clone, Default)]
pub struct FixtureDex {
    classes: Vec<(String, Vec<MethodRef>)>,
    extra_strings: Vec<String>,
    extra_types: Vec<String>,
}

impl FixtureDex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds (or extends) a caller class with invocations of `targets`.
    pub fn class(mut self, caller: &str, targets: Vec<MethodRef>) -> Self {
        match self.classes.iter_mut().find(|(c, _)| c == caller) {
            Some((_, t)) => t.extend(targets),
            None => self.classes.push((caller.to_string(), targets)),
        }
        self
    }

    /// Plants a string in the string pool without referencing it.
    pub fn extra_string(mut self, s: &str) -> Self {
        self.extra_strings.push(s.to_string());
        self
    }

    /// Plants a class in the type pool without any method or invocation.
    pub fn extra_type(mut self, dotted: &str) -> Self {
        self.extra_types.push(dotted.to_string());
        self
    }

    pub fn build(&self) -> Result<Vec<u8>, FixtureError> {
        Layout::plan(self)?.emit()
    }
}

/// Emits a DEX whose invocations are exactly `spec` (one class per distinct
/// caller; repeated callers are merged).
pub fn build_fixture_dex(spec: &[(String, Vec<MethodRef>)]) -> Result<Vec<u8>, FixtureError> {
    spec.iter()
        .fold(FixtureDex::new(), |d, (caller, targets)| d.class(caller, targets.clone()))
        .build()
}

type Proto = (String, Vec<String>);

struct Layout {
    strings: Vec<String>,
    types: Vec<String>,
    protos: Vec<Proto>,
    methods: Vec<(String, String, Proto)>,
    classes: Vec<(String, Vec<MethodRef>)>,
}

fn proto_of(shorty: &str) -> Result<Proto, FixtureError> {
    let mut chars = shorty.chars();
    let ret = chars
        .next()
        .and_then(shorty_type)
        .ok_or_else(|| invalid(format!("bad shorty {shorty:?}")))?;
    let params = chars
        .map(|c| match c {
            'V' => None,
            c => shorty_type(c),
        })
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| invalid(format!("bad shorty {shorty:?}")))?;
    Ok((ret.to_string(), params.into_iter().map(str::to_string).collect()))
}

fn utf16_key(s: &str) -> Vec<u16> {
    s.encode_utf16().collect()
}

impl Layout {
    fn plan(spec: &FixtureDex) -> Result<Self, FixtureError> {
        let run_proto: Proto = ("V".into(), Vec::new());
        let mut strings: BTreeSet<String> = BTreeSet::new();
        let mut types: BTreeSet<String> = BTreeSet::new();
        let mut protos: BTreeSet<Proto> = BTreeSet::new();
        let mut methods: BTreeSet<(String, String, Proto)> = BTreeSet::new();

        types.insert("Ljava/lang/Object;".into());
        types.insert("V".into());
        protos.insert(run_proto.clone());
        for (caller, targets) in &spec.classes {
            if !valid_class(caller) {
                return Err(invalid(format!("bad class name {caller:?}")));
            }
            let desc = dotted_to_descriptor(caller);
            types.insert(desc.clone());
            methods.insert((desc, "run".into(), run_proto.clone()));
            for t in targets {
                if !valid_class(&t.defining_class) {
                    return Err(invalid(format!("bad class name {:?}", t.defining_class)));
                }
                if !valid_method(&t.method_name) {
                    return Err(invalid(format!("bad method name {:?}", t.method_name)));
                }
                if arg_words(&t.shorty) > 255 {
                    return Err(invalid("too many argument words"));
                }
                let proto = proto_of(&t.shorty)?;
                let desc = dotted_to_descriptor(&t.defining_class);
                types.insert(desc.clone());
                types.insert(proto.0.clone());
                types.extend(proto.1.iter().cloned());
                protos.insert(proto.clone());
                methods.insert((desc, t.method_name.to_string(), proto));
            }
        }
        for t in &spec.extra_types {
            if !valid_class(t) {
                return Err(invalid(format!("bad class name {t:?}")));
            }
            types.insert(dotted_to_descriptor(t));
        }

        strings.extend(types.iter().cloned());
        for (ret, params) in &protos {
            strings.insert(shorty_of(ret, params));
        }
        strings.extend(methods.iter().map(|(_, n, _)| n.clone()));
        strings.extend(spec.extra_strings.iter().cloned());

        let mut strings: Vec<String> = strings.into_iter().collect();
        strings.sort_by_key(|s| utf16_key(s));
        let mut types: Vec<String> = types.into_iter().collect();
        types.sort_by_key(|t| utf16_key(t));
        let mut layout = Layout {
            types,
            strings,
            protos: Vec::new(),
            methods: Vec::new(),
            classes: spec.classes.clone(),
        };

        let mut protos: Vec<Proto> = protos.into_iter().collect();
        protos.sort_by_key(|(ret, params)| {
            (
                layout.type_idx(ret),
                params.iter().map(|p| layout.type_idx(p)).collect::<Vec<_>>(),
            )
        });
        layout.protos = protos;
        let mut methods: Vec<_> = methods.into_iter().collect();
        methods.sort_by_key(|(c, n, p)| (layout.type_idx(c), layout.string_idx(n), layout.proto_idx(p)));
        layout.methods = methods;
        if layout.methods.len() > 0xffff || layout.types.len() > 0xffff || layout.protos.len() > 0xffff {
            return Err(invalid("pool exceeds 16-bit index space"));
        }
        Ok(layout)
    }

    fn string_idx(&self, s: &str) -> u32 {
        let key = utf16_key(s);
        self.strings
            .binary_search_by(|p| utf16_key(p).cmp(&key))
            .expect("string interned") as u32
    }

    fn type_idx(&self, desc: &str) -> u32 {
        self.types.iter().position(|t| t == desc).expect("type interned") as u32
    }

    fn proto_idx(&self, p: &Proto) -> u32 {
        self.protos.iter().position(|q| q == p).expect("proto interned") as u32
    }

    fn method_idx(&self, class_desc: &str, name: &str, proto: &Proto) -> u32 {
        self.methods
            .iter()
            .position(|(c, n, p)| c == class_desc && n == name && p == proto)
            .expect("method interned") as u32
    }

    fn emit(&self) -> Result<Vec<u8>, FixtureError> {
        let n_str = self.strings.len();
        let n_types = self.types.len();
        let n_protos = self.protos.len();
        let n_methods = self.methods.len();
        let n_classes = self.classes.len();

        let string_ids_off = 0x70;
        let type_ids_off = string_ids_off + 4 * n_str;
        let proto_ids_off = type_ids_off + 4 * n_types;
        let method_ids_off = proto_ids_off + 12 * n_protos;
        let class_defs_off = method_ids_off + 8 * n_methods;
        let data_off = class_defs_off + 32 * n_classes;

        let mut data: Vec<u8> = Vec::new();
        let at = |data: &Vec<u8>| data_off + data.len();
        let align4 = |data: &mut Vec<u8>| {
            while !(data_off + data.len()).is_multiple_of(4) {
                data.push(0);
            }
        };
        let mut map: BTreeMap<usize, (u16, usize)> = BTreeMap::new();

        // type_lists for protos with parameters
        let mut param_offs = vec![0u32; n_protos];
        let mut type_lists = 0;
        for (i, (_, params)) in self.protos.iter().enumerate() {
            if params.is_empty() {
                continue;
            }
            align4(&mut data);
            if type_lists == 0 {
                map.insert(at(&data), (0x1001, 0));
            }
            type_lists += 1;
            param_offs[i] = at(&data) as u32;
            data.extend_from_slice(&(params.len() as u32).to_le_bytes());
            for p in params {
                data.extend_from_slice(&(self.type_idx(p) as u16).to_le_bytes());
            }
        }
        if let Some((_, (_, count))) = map.iter_mut().find(|(_, (k, _))| *k == 0x1001) {
            *count = type_lists;
        }

        // code items
        let mut code_offs = Vec::with_capacity(n_classes);
        for (i, (_, targets)) in self.classes.iter().enumerate() {
            align4(&mut data);
            if i == 0 {
                map.insert(at(&data), (0x2001, n_classes));
            }
            code_offs.push(at(&data) as u32);
            let mut insns: Vec<u16> = Vec::new();
            let mut regs: u16 = 0;
            for t in targets {
                let proto = proto_of(&t.shorty)?;
                let idx = self.method_idx(&dotted_to_descriptor(&t.defining_class), &t.method_name, &proto) as u16;
                let words = arg_words(&t.shorty);
                regs = regs.max(words);
                if words <= 5 {
                    let g = if words == 5 { 4u16 } else { 0 };
                    insns.push((words << 12) | (g << 8) | 0x71);
                    insns.push(idx);
                    insns.push(0x3210);
                } else {
                    insns.push((words << 8) | 0x77);
                    insns.push(idx);
                    insns.push(0);
                }
            }
            insns.push(0x000e);
            data.extend_from_slice(&regs.to_le_bytes());
            data.extend_from_slice(&0u16.to_le_bytes());
            data.extend_from_slice(&regs.to_le_bytes());
            data.extend_from_slice(&0u16.to_le_bytes());
            data.extend_from_slice(&0u32.to_le_bytes());
            data.extend_from_slice(&(insns.len() as u32).to_le_bytes());
            for u in insns {
                data.extend_from_slice(&u.to_le_bytes());
            }
        }

        // class_data items
        let mut class_data_offs = Vec::with_capacity(n_classes);
        for (i, (caller, _)) in self.classes.iter().enumerate() {
            if i == 0 {
                map.insert(at(&data), (0x2000, n_classes));
            }
            class_data_offs.push(at(&data) as u32);
            let run = self.method_idx(&dotted_to_descriptor(caller), "run", &("V".into(), Vec::new()));
            for v in [0, 0, 1, 0, run, 0x9, code_offs[i]] {
                uleb128(&mut data, v);
            }
        }

        // string data
        let mut string_offs = Vec::with_capacity(n_str);
        for (i, s) in self.strings.iter().enumerate() {
            if i == 0 {
                map.insert(at(&data), (0x2002, n_str));
            }
            string_offs.push(at(&data) as u32);
            uleb128(&mut data, s.encode_utf16().count() as u32);
            mutf8(&mut data, s);
            data.push(0);
        }

        // map_list
        align4(&mut data);
        let map_off = at(&data);
        map.insert(0, (0x0000, 1));
        if n_str > 0 {
            map.insert(string_ids_off, (0x0001, n_str));
        }
        if n_types > 0 {
            map.insert(type_ids_off, (0x0002, n_types));
        }
        if n_protos > 0 {
            map.insert(proto_ids_off, (0x0003, n_protos));
        }
        if n_methods > 0 {
            map.insert(method_ids_off, (0x0005, n_methods));
        }
        if n_classes > 0 {
            map.insert(class_defs_off, (0x0006, n_classes));
        }
        map.insert(map_off, (0x1000, 1));
        data.extend_from_slice(&(map.len() as u32).to_le_bytes());
        for (off, (kind, size)) in &map {
            data.extend_from_slice(&kind.to_le_bytes());
            data.extend_from_slice(&0u16.to_le_bytes());
            data.extend_from_slice(&(*size as u32).to_le_bytes());
            data.extend_from_slice(&(*off as u32).to_le_bytes());
        }

        let file_size = data_off + data.len();
        let mut out = Vec::with_capacity(file_size);
        out.extend_from_slice(b"dex\n035\0");
        out.extend_from_slice(&[0u8; 4]); // checksum, patched below
        out.extend_from_slice(&[0u8; 20]); // signature
        let sec = |out: &mut Vec<u8>, size: usize, off: usize| {
            out.extend_from_slice(&(size as u32).to_le_bytes());
            out.extend_from_slice(&(if size == 0 { 0 } else { off as u32 }).to_le_bytes());
        };
        out.extend_from_slice(&(file_size as u32).to_le_bytes());
        out.extend_from_slice(&0x70u32.to_le_bytes());
        out.extend_from_slice(&0x1234_5678u32.to_le_bytes());
        sec(&mut out, 0, 0); // link
        out.extend_from_slice(&(map_off as u32).to_le_bytes());
        sec(&mut out, n_str, string_ids_off);
        sec(&mut out, n_types, type_ids_off);
        sec(&mut out, n_protos, proto_ids_off);
        sec(&mut out, 0, 0); // field_ids
        sec(&mut out, n_methods, method_ids_off);
        sec(&mut out, n_classes, class_defs_off);
        sec(&mut out, data.len(), data_off);
        debug_assert_eq!(out.len(), 0x70);

        for off in &string_offs {
            out.extend_from_slice(&off.to_le_bytes());
        }
        for t in &self.types {
            out.extend_from_slice(&self.string_idx(t).to_le_bytes());
        }
        for (i, (ret, params)) in self.protos.iter().enumerate() {
            out.extend_from_slice(&self.string_idx(&shorty_of(ret, params)).to_le_bytes());
            out.extend_from_slice(&self.type_idx(ret).to_le_bytes());
            out.extend_from_slice(&param_offs[i].to_le_bytes());
        }
        for (class, name, proto) in &self.methods {
            out.extend_from_slice(&(self.type_idx(class) as u16).to_le_bytes());
            out.extend_from_slice(&(self.proto_idx(proto) as u16).to_le_bytes());
            out.extend_from_slice(&self.string_idx(name).to_le_bytes());
        }
        let object = self.type_idx("Ljava/lang/Object;");
        for (i, (caller, _)) in self.classes.iter().enumerate() {
            out.extend_from_slice(&self.type_idx(&dotted_to_descriptor(caller)).to_le_bytes());
            out.extend_from_slice(&0x1u32.to_le_bytes());
            out.extend_from_slice(&object.to_le_bytes());
            out.extend_from_slice(&0u32.to_le_bytes());
            out.extend_from_slice(&u32::MAX.to_le_bytes());
            out.extend_from_slice(&0u32.to_le_bytes());
            out.extend_from_slice(&class_data_offs[i].to_le_bytes());
            out.extend_from_slice(&0u32.to_le_bytes());
        }
        debug_assert_eq!(out.len(), data_off);
        out.extend_from_slice(&data);

        let checksum = adler32(&out[12..]);
        out[8..12].copy_from_slice(&checksum.to_le_bytes());
        Ok(out)
    }
}

fn shorty_of(ret: &str, params: &[String]) -> String {
    let letter = |d: &str| if d.starts_with('L') || d.starts_with('[') { 'L' } else { d.chars().next().unwrap_or('V') };
    std::iter::once(letter(ret)).chain(params.iter().map(|p| letter(p))).collect()
}

fn uleb128(out: &mut Vec<u8>, mut v: u32) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn mutf8(out: &mut Vec<u8>, s: &str) {
    for u in s.encode_utf16() {
        match u {
            0x01..=0x7f => out.push(u as u8),
            0x00 | 0x80..=0x7ff => {
                out.push(0xc0 | (u >> 6) as u8);
                out.push(0x80 | (u & 0x3f) as u8);
            }
            _ => {
                out.push(0xe0 | (u >> 12) as u8);
                out.push(0x80 | ((u >> 6) & 0x3f) as u8);
                out.push(0x80 | (u & 0x3f) as u8);
            }
        }
    }
}

fn adler32(bytes: &[u8]) -> u32 {
    const MOD: u32 = 65521;
    let (mut a, mut b) = (1u32, 0u32);
    for chunk in bytes.chunks(5552) {
        for &x in chunk {
            a += x as u32;
            b += a;
        }
        a %= MOD;
        b %= MOD;
    }
    (b << 16) | a
}

/// A DEX whose walk cost is `classes * methods * code_units` while its size
/// stays near `2 * code_units` bytes: every method of every class shares one
/// code item made of `nop`s.
pub fn build_parse_bomb_dex(classes: usize, methods: usize, code_units: usize) -> Vec<u8> {
    let base = build_fixture_dex(&[("bomb.Seed".to_string(), Vec::new())]).expect("static spec");
    let header = super::parse_header(&base).expect("builder output parses");

    // Reuse the seed's pools; append a shared code item and a shared
    // class_data, then rewrite class_defs to point at them.
    let mut out = base[..header.class_defs.off as usize].to_vec();
    let seed_def = &base[header.class_defs.off as usize..header.class_defs.off as usize + 32];
    let class_defs_off = out.len();
    out.resize(class_defs_off + 32 * classes, 0);
    while !out.len().is_multiple_of(4) {
        out.push(0);
    }
    let code_off = out.len();
    out.extend_from_slice(&[1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
    out.extend_from_slice(&(code_units as u32).to_le_bytes());
    out.resize(out.len() + 2 * code_units, 0);
    let class_data_off = out.len();
    let mut cd = Vec::new();
    for v in [0u32, 0, methods as u32, 0] {
        uleb128(&mut cd, v);
    }
    for _ in 0..methods {
        // every entry reuses method 0 (diff 0 after the first)
        uleb128(&mut cd, 0);
        uleb128(&mut cd, 0x9);
        uleb128(&mut cd, code_off as u32);
    }
    out.extend_from_slice(&cd);
    // string data lives after class_defs in the seed; copy the seed data
    // section verbatim so string offsets stay valid.
    let seed_data_start = header.class_defs.off as usize + 32;
    let shift = out.len() - seed_data_start;
    out.extend_from_slice(&base[seed_data_start..]);
    // patch string_ids into the relocated data section
    for i in 0..header.string_ids.size as usize {
        let at = header.string_ids.off as usize + 4 * i;
        let old = u32::from_le_bytes(out[at..at + 4].try_into().unwrap());
        out[at..at + 4].copy_from_slice(&(old + shift as u32).to_le_bytes());
    }
    for i in 0..classes {
        let at = class_defs_off + 32 * i;
        out[at..at + 32].copy_from_slice(seed_def);
        out[at + 24..at + 28].copy_from_slice(&(class_data_off as u32).to_le_bytes());
    }
    let file_size = out.len() as u32;
    out[32..36].copy_from_slice(&file_size.to_le_bytes());
    out[96..100].copy_from_slice(&(classes as u32).to_le_bytes());
    out[100..104].copy_from_slice(&(class_defs_off as u32).to_le_bytes());
    // the map_list is stale after relocation; drop it
    out[52..56].copy_from_slice(&0u32.to_le_bytes());
    let checksum = adler32(&out[12..]);
    out[8..12].copy_from_slice(&checksum.to_le_bytes());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dex::parse_dex;

    #[test]
    fn rejects_bad_names() {
        let bad = build_fixture_dex(&[("com..x".into(), vec![])]);
        assert!(matches!(bad, Err(FixtureError::InvalidSpec(_))));
        let bad = build_fixture_dex(&[("a.B".into(), vec![MethodRef::new("x.Y", "no-dash")])]);
        assert!(matches!(bad, Err(FixtureError::InvalidSpec(_))));
        let bad = build_fixture_dex(&[("a.B".into(), vec![MethodRef::with_shorty("x.Y", "f", "Q")])]);
        assert!(matches!(bad, Err(FixtureError::InvalidSpec(_))));
    }

    #[test]
    fn checksum_matches_adler32() {
        let bytes = build_fixture_dex(&[("a.B".into(), vec![MethodRef::new("c.D", "e")])]).unwrap();
        let stored = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        assert_eq!(stored, adler32(&bytes[12..]));
        // Adler-32 of "Wikipedia" is the textbook vector.
        assert_eq!(adler32(b"Wikipedia"), 0x11e6_0398);
    }

    #[test]
    fn wide_and_range_arguments() {
        let targets = vec![
            MethodRef::with_shorty("x.Y", "five", "VIIIII"),
            MethodRef::with_shorty("x.Y", "wide", "VJJJ"),
            MethodRef::with_shorty("x.Y", "objs", "LLL"),
        ];
        let bytes = build_fixture_dex(&[("a.B".into(), targets.clone())]).unwrap();
        let unit = parse_dex(&bytes, "classes.dex").unwrap();
        let got: Vec<_> = unit.invocations.iter().map(|i| i.target.clone()).collect();
        assert_eq!(got, targets);
    }

    #[test]
    fn extra_strings_and_types_are_pooled() {
        let bytes = FixtureDex::new()
            .class("a.B", vec![])
            .extra_string("Landroid/security/ConfirmationPrompt;")
            .extra_type("android.media.MediaDrm")
            .build()
            .unwrap();
        let unit = parse_dex(&bytes, "classes.dex").unwrap();
        assert!(unit.strings.iter().any(|s| s == "Landroid/security/ConfirmationPrompt;"));
        assert!(unit.types.iter().any(|t| &**t == "android.media.MediaDrm"));
        assert!(unit.invocations.is_empty());
    }

    #[test]
    fn bomb_parses_when_small() {
        let bytes = build_parse_bomb_dex(3, 4, 10);
        let unit = parse_dex(&bytes, "classes.dex").unwrap();
        assert_eq!(unit.classes.len(), 3);
        assert!(unit.invocations.is_empty());
    }
}
