//! Target machine: bit layout of addresses, register conventions, the
//! instruction set and the masking arithmetic used by the sandboxing
//! sequences.
//!
//! An address is split, from the least significant bit, into an in-slot
//! offset, a component identifier and a slot identifier. Odd slots hold
//! data, even slots hold code.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A machine word. Arithmetic is reduced modulo `2^word_bits`.
pub type Word = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IsaError {
    #[error("invalid bit configuration: {0}")]
    BadConfig(String),
    #[error("{field} {value:#x} does not fit in {bits} bits")]
    FieldOverflow { field: &'static str, value: u64, bits: u32 },
    #[error("component 0 is reserved for the runtime")]
    ReservedComponent,
    #[error("bad register `{0}`")]
    BadRegister(String),
    #[error("cannot parse instruction `{0}`")]
    BadInstruction(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComponentId(pub u32);

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Widths of the address fields. All metadata records these so no consumer
/// needs to assume the defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitConfig {
    pub offset_bits: u32,
    pub component_bits: u32,
    pub bundle_bits: u32,
    pub word_bits: u32,
}

impl Default for BitConfig {
    fn default() -> Self {
        BitConfig {
            offset_bits: 12,
            component_bits: 4,
            bundle_bits: 4,
            word_bits: 64,
        }
    }
}

/// Address split into its three fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Decoded {
    pub component: ComponentId,
    pub slot: u64,
    pub offset: u64,
}

impl Decoded {
    pub fn is_data(&self) -> bool {
        self.slot & 1 == 1
    }

    pub fn is_code(&self) -> bool {
        !self.is_data()
    }
}

impl BitConfig {
    pub fn new(offset_bits: u32, component_bits: u32, bundle_bits: u32, word_bits: u32) -> Result<Self, IsaError> {
        let cfg = BitConfig {
            offset_bits,
            component_bits,
            bundle_bits,
            word_bits,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), IsaError> {
        if self.bundle_bits < 1 || self.offset_bits < self.bundle_bits {
            return Err(IsaError::BadConfig(format!(
                "need offset_bits ({}) >= bundle_bits ({}) >= 1",
                self.offset_bits, self.bundle_bits
            )));
        }
        if self.component_bits < 1 {
            return Err(IsaError::BadConfig("component_bits must be at least 1".into()));
        }
        if self.word_bits > 64 {
            return Err(IsaError::BadConfig(format!("word_bits {} exceeds 64", self.word_bits)));
        }
        if self.offset_bits + self.component_bits >= self.word_bits {
            return Err(IsaError::BadConfig(format!(
                "offset_bits + component_bits ({}) leaves no room for the slot field in {} bits",
                self.offset_bits + self.component_bits,
                self.word_bits
            )));
        }
        Ok(())
    }

    pub fn word_mask(&self) -> Word {
        if self.word_bits == 64 {
            u64::MAX
        } else {
            (1u64 << self.word_bits) - 1
        }
    }

    fn slot_shift(&self) -> u32 {
        self.offset_bits + self.component_bits
    }

    pub fn slot_capacity(&self) -> u64 {
        1u64 << self.offset_bits
    }

    pub fn bundle_size(&self) -> u64 {
        1u64 << self.bundle_bits
    }

    /// Number of addressable component ids, including the reserved id 0.
    pub fn component_count(&self) -> u64 {
        1u64 << self.component_bits
    }

    pub fn max_slot(&self) -> u64 {
        self.word_mask() >> self.slot_shift()
    }

    pub fn encode(&self, component: ComponentId, slot: u64, offset: u64) -> Result<Address, IsaError> {
        if offset >= self.slot_capacity() {
            return Err(IsaError::FieldOverflow {
                field: "offset",
                value: offset,
                bits: self.offset_bits,
            });
        }
        if u64::from(component.0) >= self.component_count() {
            return Err(IsaError::FieldOverflow {
                field: "component",
                value: u64::from(component.0),
                bits: self.component_bits,
            });
        }
        if slot > self.max_slot() {
            return Err(IsaError::FieldOverflow {
                field: "slot",
                value: slot,
                bits: self.word_bits - self.slot_shift(),
            });
        }
        Ok(Address(
            offset | (u64::from(component.0) << self.offset_bits) | (slot << self.slot_shift()),
        ))
    }

    pub fn decode(&self, addr: Address) -> Decoded {
        let raw = addr.0 & self.word_mask();
        Decoded {
            offset: raw & (self.slot_capacity() - 1),
            component: ComponentId(((raw >> self.offset_bits) & (self.component_count() - 1)) as u32),
            slot: raw >> self.slot_shift(),
        }
    }

    fn component_field(&self) -> Word {
        (self.component_count() - 1) << self.offset_bits
    }

    fn slot_lsb(&self) -> Word {
        1 << self.slot_shift()
    }

    fn check_component(&self, component: ComponentId) -> Result<(), IsaError> {
        if component.0 == 0 {
            return Err(IsaError::ReservedComponent);
        }
        if u64::from(component.0) >= self.component_count() {
            return Err(IsaError::FieldOverflow {
                field: "component",
                value: u64::from(component.0),
                bits: self.component_bits,
            });
        }
        Ok(())
    }

    /// Mask and tag for store sandboxing: the component field is forced to
    /// `component` and the slot's least significant bit is set.
    pub fn store_mask_constants(&self, component: ComponentId) -> Result<(Word, Word), IsaError> {
        self.check_component(component)?;
        let mask = !(self.component_field() | self.slot_lsb()) & self.word_mask();
        let tag = (u64::from(component.0) << self.offset_bits) | self.slot_lsb();
        Ok((mask, tag))
    }

    /// Mask and tag for jump sandboxing: the component field is forced to
    /// `component`, the slot's least significant bit is cleared and the
    /// offset is aligned down to a bundle start.
    pub fn jump_mask_constants(&self, component: ComponentId) -> Result<(Word, Word), IsaError> {
        self.check_component(component)?;
        let mask = !(self.component_field() | self.slot_lsb() | (self.bundle_size() - 1)) & self.word_mask();
        let tag = u64::from(component.0) << self.offset_bits;
        Ok((mask, tag))
    }

    pub fn is_bundle_aligned(&self, addr: Address) -> bool {
        addr.0 & (self.bundle_size() - 1) == 0
    }

    pub fn bundle_of(&self, addr: Address) -> u64 {
        addr.0 >> self.bundle_bits
    }
}

/// Applies a `(mask, tag)` pair the way the instrumentation does.
pub fn sandbox(addr: Word, (mask, tag): (Word, Word)) -> Word {
    (addr & mask) | tag
}

/// A raw machine address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address(pub u64);

impl Address {
    pub fn offset_by(self, delta: i64) -> Address {
        Address(self.0.wrapping_add(delta as u64))
    }

    pub fn next(self) -> Address {
        Address(self.0.wrapping_add(1))
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

impl FromStr for Address {
    type Err = IsaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_word(s)
            .map(Address)
            .ok_or_else(|| IsaError::BadInstruction(format!("bad address `{s}`")))
    }
}

impl Serialize for Address {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses a decimal or `0x`-prefixed hexadecimal word.
pub fn parse_word(s: &str) -> Option<Word> {
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()
    } else {
        s.parse().ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Register(u8);

impl Register {
    pub const COUNT: usize = 32;
    /// Registers below this index are available to programs.
    pub const FIRST_RESERVED: u8 = 25;

    pub const RA: Register = Register(25);
    pub const SFI: Register = Register(26);
    pub const MASK_DATA: Register = Register(27);
    pub const MASK_CODE: Register = Register(28);
    pub const TAG_DATA: Register = Register(29);
    pub const TAG_CODE: Register = Register(30);
    pub const SP_PROT: Register = Register(31);

    pub fn new(index: u8) -> Result<Register, IsaError> {
        if usize::from(index) < Self::COUNT {
            Ok(Register(index))
        } else {
            Err(IsaError::BadRegister(format!("r{index}")))
        }
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn is_reserved(self) -> bool {
        self.0 >= Self::FIRST_RESERVED
    }

    pub fn conventional_name(self) -> Option<&'static str> {
        Some(match self {
            Register::RA => "ra",
            Register::SFI => "sfi",
            Register::MASK_DATA => "mask_data",
            Register::MASK_CODE => "mask_code",
            Register::TAG_DATA => "tag_data",
            Register::TAG_CODE => "tag_code",
            Register::SP_PROT => "sp_prot",
            _ => return None,
        })
    }
}

impl fmt::Display for Register {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

impl FromStr for Register {
    type Err = IsaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let idx = s
            .strip_prefix('r')
            .and_then(|n| n.parse::<u8>().ok())
            .ok_or_else(|| IsaError::BadRegister(s.to_string()))?;
        Register::new(idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Eq,
    Leq,
    BitAnd,
    BitOr,
    ShiftLeft,
}

impl BinOp {
    pub const ALL: [BinOp; 8] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::Eq,
        BinOp::Leq,
        BinOp::BitAnd,
        BinOp::BitOr,
        BinOp::ShiftLeft,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Eq => "eq",
            BinOp::Leq => "leq",
            BinOp::BitAnd => "and",
            BinOp::BitOr => "or",
            BinOp::ShiftLeft => "shl",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<BinOp> {
        BinOp::ALL.into_iter().find(|op| op.mnemonic() == s)
    }

    /// Word semantics shared by the simulator and the IR interpreter.
    /// `Leq` is an unsigned comparison; shift amounts wrap at the word width.
    pub fn eval(self, a: Word, b: Word, word_mask: Word) -> Word {
        let bits = word_mask.count_ones() as u64;
        let r = match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::Eq => u64::from(a == b),
            BinOp::Leq => u64::from(a <= b),
            BinOp::BitAnd => a & b,
            BinOp::BitOr => a | b,
            BinOp::ShiftLeft => a.wrapping_shl((b % bits) as u32),
        };
        r & word_mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    Nop,
    Const(Word, Register),
    Mov(Register, Register),
    BinOp(BinOp, Register, Register, Register),
    Load(Register, Register),
    Store(Register, Register),
    /// Taken target is `pc + rel`.
    Bnz(Register, i64),
    Jump(Register),
    Jal(Address),
    Halt,
}

impl Instruction {
    /// Register written by the instruction, if any. `Jal` writes the link
    /// register.
    pub fn written_register(&self) -> Option<Register> {
        match *self {
            Instruction::Const(_, rd)
            | Instruction::Mov(_, rd)
            | Instruction::BinOp(_, _, _, rd)
            | Instruction::Load(_, rd) => Some(rd),
            Instruction::Jal(_) => Some(Register::RA),
            _ => None,
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Instruction::Nop => write!(f, "nop"),
            Instruction::Const(imm, rd) => write!(f, "const {imm:#x} -> {rd}"),
            Instruction::Mov(rs, rd) => write!(f, "mov {rs} -> {rd}"),
            Instruction::BinOp(op, a, b, rd) => write!(f, "{} {a}, {b} -> {rd}", op.mnemonic()),
            Instruction::Load(rp, rd) => write!(f, "load [{rp}] -> {rd}"),
            Instruction::Store(rp, rs) => write!(f, "store {rs} -> [{rp}]"),
            Instruction::Bnz(rs, rel) => write!(f, "bnz {rs}, {rel:+}"),
            Instruction::Jump(rt) => write!(f, "jump {rt}"),
            Instruction::Jal(target) => write!(f, "jal {target}"),
            Instruction::Halt => write!(f, "halt"),
        }
    }
}

impl FromStr for Instruction {
    type Err = IsaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || IsaError::BadInstruction(s.to_string());
        let toks: Vec<&str> = s
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .collect();
        let reg = |t: &str| t.parse::<Register>();
        let mem = |t: &str| {
            t.strip_prefix('[')
                .and_then(|t| t.strip_suffix(']'))
                .ok_or_else(bad)
                .and_then(|t| t.parse::<Register>())
        };
        let ins = match toks.as_slice() {
            ["nop"] => Instruction::Nop,
            ["halt"] => Instruction::Halt,
            ["const", imm, "->", rd] => Instruction::Const(parse_word(imm).ok_or_else(bad)?, reg(rd)?),
            ["mov", rs, "->", rd] => Instruction::Mov(reg(rs)?, reg(rd)?),
            ["load", rp, "->", rd] => Instruction::Load(mem(rp)?, reg(rd)?),
            ["store", rs, "->", rp] => Instruction::Store(mem(rp)?, reg(rs)?),
            ["bnz", rs, rel] => Instruction::Bnz(reg(rs)?, rel.parse().map_err(|_| bad())?),
            ["jump", rt] => Instruction::Jump(reg(rt)?),
            ["jal", target] => Instruction::Jal(target.parse()?),
            [op, a, b, "->", rd] => {
                let op = BinOp::from_mnemonic(op).ok_or_else(bad)?;
                Instruction::BinOp(op, reg(a)?, reg(b)?, reg(rd)?)
            }
            _ => return Err(bad()),
        };
        Ok(ins)
    }
}

impl Serialize for Instruction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Instruction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn cfg() -> BitConfig {
        BitConfig::default()
    }

    // Independent oracle: compose fields with multiplication instead of shifts.
    fn compose(component: u64, slot: u64, offset: u64, c: &BitConfig) -> u64 {
        offset + component * 2u64.pow(c.offset_bits) + slot * 2u64.pow(c.offset_bits + c.component_bits)
    }

    #[test]
    fn encode_examples() {
        let c = cfg();
        assert_eq!(c.encode(ComponentId(0), 0, 0).unwrap(), Address(0));
        let a = c.encode(ComponentId(3), 5, 7).unwrap();
        assert_eq!(a.0, compose(3, 5, 7, &c));
        assert_eq!(a.0, 0x53007);
        let d = c.decode(Address(0x53007));
        assert_eq!(d.component, ComponentId(3));
        assert_eq!(d.slot, 5);
        assert_eq!(d.offset, 7);
        assert!(d.is_data());
    }

    #[test]
    fn encode_rejects_overflowing_fields() {
        let c = cfg();
        assert!(matches!(
            c.encode(ComponentId(1), 0, 4096),
            Err(IsaError::FieldOverflow { field: "offset", .. })
        ));
        assert!(matches!(
            c.encode(ComponentId(16), 0, 0),
            Err(IsaError::FieldOverflow { field: "component", .. })
        ));
        assert!(matches!(
            c.encode(ComponentId(1), 1 << 48, 0),
            Err(IsaError::FieldOverflow { field: "slot", .. })
        ));
        let narrow = BitConfig::new(12, 4, 4, 20).unwrap();
        assert!(narrow.encode(ComponentId(1), 15, 0).is_ok());
        assert!(narrow.encode(ComponentId(1), 16, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BitConfig::new(12, 4, 0, 64).is_err());
        assert!(BitConfig::new(3, 4, 4, 64).is_err());
        assert!(BitConfig::new(12, 4, 4, 16).is_err());
        assert!(BitConfig::new(12, 4, 4, 65).is_err());
        assert!(BitConfig::new(12, 4, 4, 17).is_ok());
    }

    #[test]
    fn store_mask_examples() {
        let c = cfg();
        let m = c.store_mask_constants(ComponentId(3)).unwrap();
        // Oracle: clear bits 12..=16, then set comp 3 and slot bit.
        let expected_mask = !((0xFu64 << 12) | (1 << 16));
        assert_eq!(m.0, expected_mask);
        assert_eq!(m.1, (3 << 12) | (1 << 16));
        assert_eq!(0x2ABCD & m.0, 0x20BCD);
        assert_eq!(sandbox(0x2ABCD, m), 0x33BCD);
        let d = c.decode(Address(0x33BCD));
        assert_eq!((d.component, d.slot, d.offset), (ComponentId(3), 3, 0xBCD));

        let m1 = c.store_mask_constants(ComponentId(1)).unwrap();
        let own = c.encode(ComponentId(1), 1, 0).unwrap().0;
        assert_eq!(sandbox(own, m1), own);
        assert_eq!(c.store_mask_constants(ComponentId(0)), Err(IsaError::ReservedComponent));
    }

    #[test]
    fn jump_mask_examples() {
        let c = cfg();
        let m = c.jump_mask_constants(ComponentId(3)).unwrap();
        assert_eq!(sandbox(0x2ABCD, m), 0x23BC0);
        let d = c.decode(Address(0x23BC0));
        assert_eq!((d.component, d.slot, d.offset), (ComponentId(3), 2, 0xBC0));
        let own = c.encode(ComponentId(3), 4, 0x120).unwrap().0;
        assert_eq!(sandbox(own, m), own);
        assert_eq!(c.jump_mask_constants(ComponentId(0)), Err(IsaError::ReservedComponent));
        // Exhaustive over the low bundle offsets.
        for low in 0..c.bundle_size() {
            for high in [0u64, 0x2AB00, !0xF] {
                assert_eq!(sandbox(high | low, m) % c.bundle_size(), 0);
            }
        }
    }

    #[test]
    fn random_words_sandbox_soundly() {
        let c = cfg();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let sm = c.store_mask_constants(ComponentId(3)).unwrap();
        for _ in 0..100_000 {
            let a: u64 = rng.gen();
            let d = c.decode(Address(sandbox(a, sm)));
            assert_eq!(d.component, ComponentId(3));
            assert!(d.is_data());
        }
    }

    #[test]
    fn binop_semantics() {
        let m = u64::MAX;
        assert_eq!(BinOp::Sub.eval(0, 1, m), u64::MAX);
        assert_eq!(BinOp::Leq.eval(3, 3, m), 1);
        assert_eq!(BinOp::Leq.eval(u64::MAX, 0, m), 0);
        assert_eq!(BinOp::ShiftLeft.eval(1, 65, m), 2);
        assert_eq!(BinOp::Add.eval(0xFFFF, 1, 0xFFFF), 0);
    }

    #[test]
    fn instruction_text_roundtrip() {
        let cases = [
            Instruction::Nop,
            Instruction::Const(0x1f, Register::SFI),
            Instruction::Mov(Register::new(2).unwrap(), Register::new(1).unwrap()),
            Instruction::BinOp(
                BinOp::BitAnd,
                Register::new(4).unwrap(),
                Register::MASK_DATA,
                Register::SFI,
            ),
            Instruction::Load(Register::SP_PROT, Register::SFI),
            Instruction::Store(Register::SFI, Register::new(7).unwrap()),
            Instruction::Bnz(Register::new(1).unwrap(), -3),
            Instruction::Bnz(Register::new(1).unwrap(), 4),
            Instruction::Jump(Register::SFI),
            Instruction::Jal(Address(0x53010)),
            Instruction::Halt,
        ];
        for ins in cases {
            assert_eq!(ins.to_string().parse::<Instruction>().unwrap(), ins, "{ins}");
        }
        assert!("store r1 -> r2".parse::<Instruction>().is_err());
        assert!("const 1 -> r32".parse::<Instruction>().is_err());
    }

    proptest! {
        #[test]
        fn codec_roundtrip_from_raw(raw in any::<u64>()) {
            let c = cfg();
            let d = c.decode(Address(raw));
            prop_assert_eq!(c.encode(d.component, d.slot, d.offset).unwrap(), Address(raw));
        }

        #[test]
        fn masks_are_idempotent_and_sound(raw in any::<u64>(), comp in 1u32..16) {
            let c = cfg();
            let comp = ComponentId(comp);
            let sm = c.store_mask_constants(comp).unwrap();
            let jm = c.jump_mask_constants(comp).unwrap();
            let s = sandbox(raw, sm);
            let j = sandbox(raw, jm);
            prop_assert_eq!(sandbox(s, sm), s);
            prop_assert_eq!(sandbox(j, jm), j);
            let ds = c.decode(Address(s));
            let dj = c.decode(Address(j));
            prop_assert_eq!(ds.component, comp);
            prop_assert!(ds.is_data());
            prop_assert_eq!(dj.component, comp);
            prop_assert!(dj.is_code());
            prop_assert!(c.is_bundle_aligned(Address(j)));
        }

        #[test]
        fn sandboxed_sets_are_disjoint(raw_a in any::<u64>(), raw_b in any::<u64>(), a in 1u32..16, b in 1u32..16) {
            prop_assume!(a != b);
            let c = cfg();
            let sa = sandbox(raw_a, c.store_mask_constants(ComponentId(a)).unwrap());
            let sb = sandbox(raw_b, c.store_mask_constants(ComponentId(b)).unwrap());
            prop_assert_ne!(sa, sb);
        }
    }
}
