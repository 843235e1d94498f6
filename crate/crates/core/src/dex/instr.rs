//! Dalvik instruction widths and invoke decoding.
//!
//! Widths are in 16-bit code units and follow the instruction formats of the
//! Dalvik bytecode reference. Opcodes marked unused there decode as `10x`.

/// Idents of the pseudo-instructions stored in the `nop` opcode slot.
const PACKED_SWITCH_PAYLOAD: u16 = 0x0100;
const SPARSE_SWITCH_PAYLOAD: u16 = 0x0200;
const FILL_ARRAY_DATA_PAYLOAD: u16 = 0x0300;

#[rustfmt::skip]
const WIDTHS: [u8; 256] = {
    let mut w = [1u8; 256];
    let mut op = 0;
    while op < 256 {
        w[op] = match op {
            0x02 | 0x05 | 0x08 => 2,           // move*/from16
            0x03 | 0x06 | 0x09 => 3,           // move*/16
            0x13 | 0x15 | 0x16 | 0x19 => 2,    // const/16, const/high16, const-wide/16, const-wide/high16
            0x14 | 0x17 => 3,                  // const, const-wide/32
            0x18 => 5,                         // const-wide
            0x1a => 2,                         // const-string
            0x1b => 3,                         // const-string/jumbo
            0x1c | 0x1f | 0x20 | 0x22 | 0x23 => 2,
            0x24..=0x26 => 3,           // filled-new-array*, fill-array-data
            0x29 => 2,                         // goto/16
            0x2a..=0x2c => 3,           // goto/32, packed-switch, sparse-switch
            0x2d..=0x3d => 2,                  // cmp*, if-*
            0x44..=0x6d => 2,                  // aget/aput, iget/iput, sget/sput
            0x6e..=0x72 => 3,                  // invoke-kind
            0x74..=0x78 => 3,                  // invoke-kind/range
            0x90..=0xaf => 2,                  // binop
            0xd0..=0xe2 => 2,                  // binop/lit16, binop/lit8
            0xfa | 0xfb => 4,                  // invoke-polymorphic[/range]
            0xfc | 0xfd => 3,                  // invoke-custom[/range]
            0xfe | 0xff => 2,                  // const-method-handle, const-method-type
            _ => 1,
        };
        op += 1;
    }
    w
};

/// Whether an opcode names a `method_ids` entry in its second code unit.
pub(crate) fn is_method_invoke(op: u8) -> bool {
    matches!(op, 0x6e..=0x72 | 0x74..=0x78 | 0xfa | 0xfb)
}

pub(crate) enum Step {
    /// A regular instruction of this many code units.
    Insn(usize),
    /// A payload table of this many code units.
    Payload(usize),
}

/// Width of the instruction at `insns[pc]`, or `None` when its encoded size
/// cannot be read from the remaining units.
pub(crate) fn step(insns: &[u16], pc: usize) -> Option<Step> {
    let unit = *insns.get(pc)?;
    let op = (unit & 0xff) as u8;
    if op == 0x00 {
        let at = |i: usize| insns.get(pc + i).copied();
        match unit {
            PACKED_SWITCH_PAYLOAD => {
                let size = at(1)? as usize;
                return Some(Step::Payload(4 + size * 2));
            }
            SPARSE_SWITCH_PAYLOAD => {
                let size = at(1)? as usize;
                return Some(Step::Payload(2 + size * 4));
            }
            FILL_ARRAY_DATA_PAYLOAD => {
                let width = at(1)? as usize;
                let size = at(2)? as usize | ((at(3)? as usize) << 16);
                let bytes = width.checked_mul(size)?;
                return Some(Step::Payload(4 + bytes.div_ceil(2)));
            }
            _ => {}
        }
    }
    Some(Step::Insn(WIDTHS[op as usize] as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_widths() {
        assert_eq!(WIDTHS[0x0e], 1); // return-void
        assert_eq!(WIDTHS[0x18], 5); // const-wide
        assert_eq!(WIDTHS[0x71], 3); // invoke-static
        assert_eq!(WIDTHS[0x77], 3); // invoke-static/range
        assert_eq!(WIDTHS[0xfa], 4);
        assert_eq!(WIDTHS[0xd8], 2); // add-int/lit8
        assert_eq!(WIDTHS[0xb0], 1); // add-int/2addr
    }

    #[test]
    fn payload_sizes() {
        // packed-switch with 3 targets: ident, size, first_key(2), targets(6)
        let p = [0x0100, 3, 0, 0, 0, 0, 0, 0, 0, 0];
        assert!(matches!(step(&p, 0), Some(Step::Payload(10))));
        // sparse-switch with 2 entries: ident, size, keys(4), targets(4)
        let s = [0x0200, 2, 0, 0, 0, 0, 0, 0, 0, 0];
        assert!(matches!(step(&s, 0), Some(Step::Payload(10))));
        // fill-array-data, width 1, 3 elements: ident, width, size(2), data(2)
        let f = [0x0300, 1, 3, 0, 0, 0];
        assert!(matches!(step(&f, 0), Some(Step::Payload(6))));
    }

    #[test]
    fn invoke_set() {
        let invokes: Vec<u8> = (0..=255u8).filter(|&o| is_method_invoke(o)).collect();
        assert_eq!(invokes, [0x6e, 0x6f, 0x70, 0x71, 0x72, 0x74, 0x75, 0x76, 0x77, 0x78, 0xfa, 0xfb]);
    }
}
