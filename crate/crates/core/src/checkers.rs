//! Log checkers for the three isolation invariants:
//!
//! 1. a component writes only to its own data memory;
//! 2. a component jumps only within its own code, except through direct
//!    calls to entry points it imports;
//! 3. control returning to a caller always lands on the instruction after
//!    the call.
//!
//! Each checker is a pure function of the log and the layout metadata.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{LayoutMeta, RangeKind};
use crate::isa::Address;
use crate::machine::{LogEvent, TransferKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub invariant: u8,
    pub event_index: usize,
    pub step: u64,
    pub pc: Option<Address>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub invariant: u8,
    pub violations: Vec<Violation>,
    pub events_checked: usize,
    /// Deepest shadow stack seen (invariant 3 only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_depth: Option<usize>,
}

impl Verdict {
    fn new(invariant: u8) -> Self {
        Verdict {
            invariant,
            violations: Vec::new(),
            events_checked: 0,
            max_depth: None,
        }
    }

    pub fn pass(&self) -> bool {
        self.violations.is_empty()
    }

    fn flag(&mut self, event_index: usize, ev: &LogEvent, detail: String) {
        self.violations.push(Violation {
            invariant: self.invariant,
            event_index,
            step: ev.step(),
            pc: ev.pc(),
            detail,
        });
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckError {
    #[error("event {event_index}: pc {pc} is not laid-out code in the metadata")]
    MetaMismatch { event_index: usize, pc: Address },
}

fn check_pcs(log: &[LogEvent], meta: &LayoutMeta) -> Result<(), CheckError> {
    for (event_index, ev) in log.iter().enumerate() {
        if let Some(pc) = ev.pc() {
            if !meta.is_code(pc) {
                return Err(CheckError::MetaMismatch { event_index, pc });
            }
        }
    }
    Ok(())
}

pub fn check_store(log: &[LogEvent], meta: &LayoutMeta) -> Result<Verdict, CheckError> {
    check_pcs(log, meta)?;
    let mut v = Verdict::new(1);
    for (i, ev) in log.iter().enumerate() {
        let LogEvent::Store { pc, target, .. } = *ev else {
            continue;
        };
        v.events_checked += 1;
        let t = meta.decode(target);
        if meta.trusted_range_at(pc).is_some() {
            if t.component.0 != 0 || t.slot != 1 {
                v.flag(i, ev, format!("trusted store to {target} outside the protected stack"));
            }
        } else {
            let own = meta.decode(pc).component;
            if t.component != own || !t.is_data() {
                v.flag(
                    i,
                    ev,
                    format!(
                        "component {own} stored to {target} (component {}, slot {})",
                        t.component, t.slot
                    ),
                );
            }
        }
    }
    Ok(v)
}

pub fn check_jump(log: &[LogEvent], meta: &LayoutMeta) -> Result<Verdict, CheckError> {
    check_pcs(log, meta)?;
    let entries = meta.entry_index();
    let mut v = Verdict::new(2);
    for (i, ev) in log.iter().enumerate() {
        let LogEvent::Transfer { pc, target, kind, .. } = *ev else {
            continue;
        };
        v.events_checked += 1;
        let own = meta.decode(pc).component;
        let t = meta.decode(target);
        let range = meta.trusted_range_at(pc).map(|r| r.kind);
        match kind {
            TransferKind::JumpReg => {
                if range == Some(RangeKind::ReturnPop) {
                    continue;
                }
                if t.component != own || !t.is_code() || !meta.cfg.is_bundle_aligned(target) {
                    v.flag(
                        i,
                        ev,
                        format!(
                            "computed jump from component {own} to {target} (component {}, slot {}, offset {:#x})",
                            t.component, t.slot, t.offset
                        ),
                    );
                }
            }
            TransferKind::JalDirect => {
                if range == Some(RangeKind::Startup) {
                    if Some(target) != meta.main_entry() {
                        v.flag(i, ev, format!("startup calls {target} instead of main"));
                    }
                    continue;
                }
                let own_code = t.component == own && meta.is_code(target);
                let imported = entries
                    .get(&target)
                    .is_some_and(|k| meta.imports.get(&own).is_some_and(|s| s.contains(k)));
                if !own_code && !imported {
                    v.flag(
                        i,
                        ev,
                        format!("direct call from component {own} to {target}, not an imported entry point"),
                    );
                }
            }
            TransferKind::BnzTaken => {
                let same = meta.procedures.values().any(|r| r.contains(pc) && r.contains(target));
                if !same {
                    v.flag(i, ev, format!("branch to {target} leaves its procedure"));
                }
            }
        }
    }
    Ok(v)
}

pub fn check_stack(log: &[LogEvent], meta: &LayoutMeta) -> Result<Verdict, CheckError> {
    check_pcs(log, meta)?;
    let entries = meta.entry_index();
    let mut v = Verdict::new(3);
    let mut shadow: Vec<Address> = Vec::new();
    let mut max_depth = 0;
    // Most recent instruction event, ignoring injections.
    let mut prev: Option<&LogEvent> = None;
    for (i, ev) in log.iter().enumerate() {
        match *ev {
            LogEvent::Inject { .. } => continue,
            LogEvent::Transfer {
                pc,
                target,
                kind: TransferKind::JalDirect,
                ..
            } if entries.contains_key(&target) => {
                v.events_checked += 1;
                shadow.push(pc.next());
                max_depth = max_depth.max(shadow.len());
            }
            LogEvent::Store {
                step,
                pc,
                target,
                value,
            } => {
                let Some(r) = meta.trusted_range_at(pc).filter(|r| r.kind == RangeKind::EntryPush) else {
                    prev = Some(ev);
                    continue;
                };
                v.events_checked += 1;
                let called = matches!(
                    prev,
                    Some(&LogEvent::Transfer { step: s, target: t, kind: TransferKind::JalDirect, .. })
                        if s + 1 == step && t == r.begin
                );
                if !called {
                    v.flag(i, ev, format!("push at entry {} not reached by a direct call", r.begin));
                } else if shadow.last().map(|a| a.0) != Some(value) {
                    v.flag(i, ev, format!("pushed {value:#x}, expected the call's return address"));
                } else {
                    let slot = Address(meta.protected_stack_base.0 + shadow.len() as u64 - 1);
                    if target != slot {
                        v.flag(i, ev, format!("push to {target}, expected stack slot {slot}"));
                    }
                }
            }
            LogEvent::Transfer {
                pc,
                target,
                kind: TransferKind::JumpReg,
                ..
            } if meta
                .trusted_range_at(pc)
                .is_some_and(|r| r.kind == RangeKind::ReturnPop) =>
            {
                v.events_checked += 1;
                match shadow.pop() {
                    Some(expected) if expected == target => {}
                    Some(expected) => v.flag(i, ev, format!("return to {target}, expected {expected}")),
                    None if target == meta.halt_anchor => {}
                    None => v.flag(i, ev, format!("return to {target} with no pending call")),
                }
            }
            _ => {}
        }
        prev = Some(ev);
    }
    v.max_depth = Some(max_depth);
    Ok(v)
}

/// Runs all three checkers.
pub fn check_all(log: &[LogEvent], meta: &LayoutMeta) -> Result<[Verdict; 3], CheckError> {
    Ok([check_store(log, meta)?, check_jump(log, meta)?, check_stack(log, meta)?])
}

#[cfg(test)]
mod tests;
