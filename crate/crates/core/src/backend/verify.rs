//! Static self-check over compiled output. Every sandboxing sequence must be
//! intact and inside one bundle, trusted sequences must match their
//! templates, and entry points must be unaligned and Halt-guarded.

use std::fmt;

use super::lower::{entry_sequence, post_call_restore, return_sequence, startup_sequence};
use super::{MachineObject, RangeKind, TrustedRange};
use crate::isa::{Address, BinOp, Instruction, Register};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaticViolation {
    pub address: Address,
    pub message: String,
}

impl fmt::Display for StaticViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.address, self.message)
    }
}

fn words_at(obj: &MachineObject, begin: Address, len: u64) -> Option<Vec<Instruction>> {
    (0..len).map(|i| obj.fetch(Address(begin.0 + i))).collect()
}

fn masked_pair(obj: &MachineObject, at: Address, mask: Register, tag: Register) -> Option<Register> {
    let cfg = &obj.cfg;
    let first = Address(at.0.checked_sub(2)?);
    if cfg.bundle_of(first) != cfg.bundle_of(at) {
        return None;
    }
    match (obj.fetch(first)?, obj.fetch(first.next())?) {
        (
            Instruction::BinOp(BinOp::BitAnd, src, m, Register::SFI),
            Instruction::BinOp(BinOp::BitOr, Register::SFI, t, Register::SFI),
        ) if m == mask && t == tag => Some(src),
        _ => None,
    }
}

fn may_write(reg: Register, range: Option<&TrustedRange>, ins: &Instruction) -> bool {
    let kind = range.map(|r| r.kind);
    match reg {
        Register::MASK_DATA | Register::MASK_CODE => kind == Some(RangeKind::Startup),
        Register::SP_PROT => matches!(
            kind,
            Some(RangeKind::Startup | RangeKind::EntryPush | RangeKind::ReturnPop)
        ),
        Register::TAG_DATA | Register::TAG_CODE => {
            matches!(kind, Some(RangeKind::EntryPush | RangeKind::PostCallRestore))
        }
        Register::RA => matches!(ins, Instruction::Jal(_)),
        _ => true,
    }
}

/// Returns every rule violation found in `obj`. An empty list means the
/// object passed.
pub fn verify_object(obj: &MachineObject) -> Vec<StaticViolation> {
    let cfg = &obj.cfg;
    let meta = &obj.meta;
    let mut out = Vec::new();
    let mut flag = |address: Address, message: String| out.push(StaticViolation { address, message });
    let entries = meta.entry_index();

    for (&(c, slot), words) in &obj.code {
        let base = cfg.encode(c, slot, 0).unwrap_or(Address(0));
        if slot % 2 != 0 {
            flag(base, format!("code in odd slot {slot}"));
        }
        if c.0 == 0 && slot != 0 {
            flag(base, "runtime code outside slot 0".into());
        }
        if words.len() as u64 > cfg.slot_capacity() {
            flag(base, "code slot over capacity".into());
        }
        if matches!(
            words.last(),
            Some(i) if !matches!(i, Instruction::Halt | Instruction::Jump(_) | Instruction::Jal(_))
        ) {
            flag(
                Address(base.0 + words.len() as u64 - 1),
                "code slot ends in a fall-through instruction".into(),
            );
        }
    }
    for (&(c, slot), words) in &obj.data_init {
        let base = cfg.encode(c, slot, 0).unwrap_or(Address(0));
        if slot % 2 != 1 || c.0 == 0 {
            flag(base, format!("data placed in slot {slot} of component {c}"));
        }
        if words.len() as u64 > cfg.slot_capacity() {
            flag(base, "data slot over capacity".into());
        }
    }

    // Trusted ranges: disjoint, bundle-contained, matching their templates.
    for w in meta.trusted_ranges.windows(2) {
        if w[1].begin < w[0].end {
            flag(w[1].begin, "overlapping trusted ranges".into());
        }
    }
    for r in &meta.trusted_ranges {
        if r.end <= r.begin || cfg.bundle_of(r.begin) != cfg.bundle_of(Address(r.end.0 - 1)) {
            flag(r.begin, format!("{:?} range straddles a bundle boundary", r.kind));
        }
        let owner = cfg.decode(r.begin).component;
        let expected = match r.kind {
            RangeKind::Startup => meta.main_entry().map(|e| startup_sequence(cfg, e)),
            RangeKind::EntryPush => Some(entry_sequence(cfg, owner)),
            RangeKind::ReturnPop => Some(return_sequence()),
            RangeKind::PostCallRestore => Some(post_call_restore(cfg, owner)),
        };
        let actual = words_at(obj, r.begin, r.end.0.saturating_sub(r.begin.0));
        if expected.is_none() || actual != expected {
            flag(r.begin, format!("{:?} range does not match its template", r.kind));
        }
    }

    for (&(c, p), &entry) in &meta.entry_points {
        if cfg.is_bundle_aligned(entry) {
            flag(entry, format!("entry point of {c}.{p} is bundle aligned"));
        }
        match entry.0.checked_sub(1).and_then(|a| obj.fetch(Address(a))) {
            Some(Instruction::Halt) => {}
            _ => flag(entry, format!("entry point of {c}.{p} is not preceded by halt")),
        }
        if !meta
            .trusted_range_at(entry)
            .is_some_and(|r| r.kind == RangeKind::EntryPush && r.begin == entry)
        {
            flag(entry, format!("entry point of {c}.{p} has no entry sequence"));
        }
    }

    for (&(c, slot), words) in &obj.code {
        let Ok(base) = cfg.encode(c, slot, 0) else { continue };
        for (i, ins) in words.iter().enumerate() {
            let pc = Address(base.0 + i as u64);
            let range = meta.trusted_range_at(pc);
            if let Some(rd) = ins.written_register() {
                if !may_write(rd, range, ins) {
                    flag(
                        pc,
                        format!("`{ins}` writes reserved register {rd} outside a trusted sequence"),
                    );
                }
            }
            match *ins {
                Instruction::Store(rp, _) => {
                    let trusted_push = range.is_some_and(|r| r.kind == RangeKind::EntryPush && r.begin == pc);
                    let masked =
                        rp == Register::SFI && masked_pair(obj, pc, Register::MASK_DATA, Register::TAG_DATA).is_some();
                    if !trusted_push && !masked {
                        flag(pc, "store without an intact data mask sequence".into());
                    }
                }
                Instruction::Jump(rt) => {
                    let trusted_pop = range.is_some_and(|r| r.kind == RangeKind::ReturnPop && r.end.0 == pc.0 + 1);
                    let masked =
                        rt == Register::SFI && masked_pair(obj, pc, Register::MASK_CODE, Register::TAG_CODE).is_some();
                    if !trusted_pop && !masked {
                        flag(pc, "jump without an intact code mask sequence".into());
                    }
                }
                Instruction::Jal(target) => {
                    if c.0 == 0 {
                        if Some(target) != meta.main_entry() {
                            flag(pc, "startup does not call main".into());
                        }
                        continue;
                    }
                    let td = cfg.decode(target);
                    match entries.get(&target) {
                        Some(&(tc, tp)) => {
                            let allowed = tc == c || meta.imports.get(&c).is_some_and(|s| s.contains(&(tc, tp)));
                            if !allowed {
                                flag(pc, format!("call to {tc}.{tp}, which is not imported"));
                            }
                            let restored = meta
                                .trusted_range_at(pc.next())
                                .is_some_and(|r| r.kind == RangeKind::PostCallRestore && r.begin == pc.next())
                                && cfg.bundle_of(pc) == cfg.bundle_of(pc.next());
                            if !restored {
                                flag(pc, "call without a post-call tag restore in the same bundle".into());
                            }
                        }
                        None if td.component == c && meta.is_code(target) => {}
                        None => flag(pc, format!("jal to {target}, neither own code nor an imported entry")),
                    }
                }
                Instruction::Bnz(_, rel) => {
                    let target = pc.offset_by(rel);
                    let same = meta.procedures.values().any(|r| r.contains(pc) && r.contains(target));
                    if !same {
                        flag(pc, format!("branch to {target} leaves its procedure"));
                    }
                }
                _ => {}
            }
        }
    }
    out
}
