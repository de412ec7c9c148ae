use super::*;
use crate::backend::{compile, MachineObject};
use crate::ir::{parse_program, ComponentId, ProcId};
use crate::machine::{run, RunStatus};

const NESTED: &str = "\
sfi-ir 1
main 1.0
component 1 {
  export 0
  import 2.0
  block 0 size 2
  proc 0 {
    const 1 -> r3
    call 2.0
    const ptr 0 1 -> r20
    store r3 -> [r20]
    return
  }
}
component 2 {
  export 0
  import 3.0
  block 0 size 1
  proc 0 {
    const ptr 0 0 -> r20
    store r3 -> [r20]
    call 3.0
    return
  }
}
component 3 {
  export 0
  export 1
  proc 0 {
    const 1 -> r1
    bnz r1, L0
    nop
  L0:
    return
  }
  proc 1 {
    return
  }
}
";

fn setup() -> (MachineObject, Vec<LogEvent>) {
    let obj = compile(&parse_program(NESTED).unwrap(), Default::default()).unwrap();
    let out = run(&obj, 1000).unwrap();
    assert_eq!(out.status, RunStatus::Halted);
    (obj, out.log)
}

fn addr(obj: &MachineObject, c: u32, slot: u64, off: u64) -> Address {
    obj.cfg.encode(ComponentId(c), slot, off).unwrap()
}

fn entry(obj: &MachineObject, c: u32, p: u32) -> Address {
    obj.meta.entry_points[&(ComponentId(c), ProcId(p))]
}

/// Index of the first event matching `f`.
fn find(log: &[LogEvent], f: impl Fn(&LogEvent) -> bool) -> usize {
    log.iter().position(f).expect("event present")
}

fn only(v: Verdict, invariant: u8, index: usize) {
    assert_eq!(v.invariant, invariant);
    assert_eq!(v.violations.len(), 1, "{:?}", v.violations);
    assert_eq!(v.violations[0].event_index, index);
    assert!(!v.pass());
}

fn untrusted_store(log: &[LogEvent], meta: &crate::backend::LayoutMeta, c: u32) -> usize {
    find(log, |e| {
        matches!(e, LogEvent::Store { pc, .. }
            if meta.trusted_range_at(*pc).is_none() && meta.decode(*pc).component.0 == c)
    })
}

#[test]
fn genuine_run_passes_all() {
    let (obj, log) = setup();
    let [s, j, k] = check_all(&log, &obj.meta).unwrap();
    assert!(s.pass() && j.pass() && k.pass(), "{s:?} {j:?} {k:?}");
    assert_eq!(k.max_depth, Some(3));
    assert_eq!(s.events_checked, 5);
    assert!(j.events_checked > 0);
}

#[test]
fn store_to_other_component_is_flagged() {
    let (obj, mut log) = setup();
    let i = untrusted_store(&log, &obj.meta, 1);
    if let LogEvent::Store { target, .. } = &mut log[i] {
        *target = addr(&obj, 2, 1, 0);
    }
    only(check_store(&log, &obj.meta).unwrap(), 1, i);
}

#[test]
fn store_to_own_code_is_flagged() {
    let (obj, mut log) = setup();
    let i = untrusted_store(&log, &obj.meta, 2);
    if let LogEvent::Store { target, .. } = &mut log[i] {
        *target = addr(&obj, 2, 0, 3);
    }
    only(check_store(&log, &obj.meta).unwrap(), 1, i);
}

#[test]
fn trusted_store_outside_protected_stack_is_flagged() {
    let (obj, mut log) = setup();
    let i = find(
        &log,
        |e| matches!(e, LogEvent::Store { pc, .. } if obj.meta.trusted_range_at(*pc).is_some()),
    );
    if let LogEvent::Store { target, .. } = &mut log[i] {
        *target = addr(&obj, 1, 1, 0);
    }
    only(check_store(&log, &obj.meta).unwrap(), 1, i);
}

#[test]
fn unaligned_computed_jump_is_flagged() {
    let (obj, mut log) = setup();
    let pc = addr(&obj, 1, 0, 8);
    log.push(LogEvent::Transfer {
        step: 999,
        pc,
        target: addr(&obj, 1, 0, 3),
        kind: TransferKind::JumpReg,
        r3: 0,
    });
    only(check_jump(&log, &obj.meta).unwrap(), 2, log.len() - 1);
}

#[test]
fn computed_jump_out_of_component_is_flagged() {
    let (obj, mut log) = setup();
    for target in [addr(&obj, 2, 0, 0), addr(&obj, 1, 1, 0)] {
        log.push(LogEvent::Transfer {
            step: 999,
            pc: addr(&obj, 1, 0, 8),
            target,
            kind: TransferKind::JumpReg,
            r3: 0,
        });
    }
    let v = check_jump(&log, &obj.meta).unwrap();
    assert_eq!(v.violations.len(), 2);
    assert!(v.violations.iter().all(|x| x.invariant == 2));
}

#[test]
fn aligned_own_code_jump_is_allowed() {
    let (obj, mut log) = setup();
    log.push(LogEvent::Transfer {
        step: 999,
        pc: addr(&obj, 1, 0, 8),
        target: addr(&obj, 1, 0, 16),
        kind: TransferKind::JumpReg,
        r3: 0,
    });
    assert!(check_jump(&log, &obj.meta).unwrap().pass());
}

#[test]
fn call_to_unimported_entry_is_flagged() {
    let (obj, mut log) = setup();
    // Component 1 imports 2.0 only.
    let i = find(
        &log,
        |e| matches!(e, LogEvent::Transfer { target, .. } if *target == entry(&obj, 2, 0)),
    );
    if let LogEvent::Transfer { target, .. } = &mut log[i] {
        *target = entry(&obj, 3, 1);
    }
    only(check_jump(&log, &obj.meta).unwrap(), 2, i);
}

#[test]
fn startup_must_call_main() {
    let (obj, mut log) = setup();
    let i = find(&log, |e| matches!(e, LogEvent::Transfer { pc, .. } if pc.0 == 3));
    if let LogEvent::Transfer { target, .. } = &mut log[i] {
        *target = entry(&obj, 2, 0);
    }
    only(check_jump(&log, &obj.meta).unwrap(), 2, i);
}

#[test]
fn branch_out_of_procedure_is_flagged() {
    let (obj, mut log) = setup();
    let i = find(&log, |e| {
        matches!(
            e,
            LogEvent::Transfer {
                kind: TransferKind::BnzTaken,
                ..
            }
        )
    });
    if let LogEvent::Transfer { target, .. } = &mut log[i] {
        *target = entry(&obj, 3, 1);
    }
    only(check_jump(&log, &obj.meta).unwrap(), 2, i);
}

fn returns(log: &[LogEvent], meta: &crate::backend::LayoutMeta) -> Vec<usize> {
    log.iter()
        .enumerate()
        .filter(|(_, e)| {
            matches!(e, LogEvent::Transfer { pc, kind: TransferKind::JumpReg, .. }
                if meta.trusted_range_at(*pc).is_some_and(|r| r.kind == RangeKind::ReturnPop))
        })
        .map(|(i, _)| i)
        .collect()
}

#[test]
fn return_past_the_call_site_is_flagged() {
    let (obj, mut log) = setup();
    let i = returns(&log, &obj.meta)[0];
    if let LogEvent::Transfer { target, .. } = &mut log[i] {
        target.0 += 1;
    }
    let v = check_stack(&log, &obj.meta).unwrap();
    assert_eq!(v.violations[0].event_index, i);
    assert!(v.violations[0].detail.contains("expected"));
    // Returns are exempt from the jump rule.
    assert!(check_jump(&log, &obj.meta).unwrap().pass());
}

#[test]
fn pop_from_empty_stack_is_flagged() {
    let (obj, mut log) = setup();
    let last = *returns(&log, &obj.meta).last().unwrap();
    let mut extra = log[last];
    if let LogEvent::Transfer { target, .. } = &mut extra {
        *target = Address(2);
    }
    log.insert(last + 1, extra);
    only(check_stack(&log, &obj.meta).unwrap(), 3, last + 1);
}

#[test]
fn spurious_push_is_flagged() {
    let (obj, mut log) = setup();
    // Drop the call that led into component 3's entry, keeping its push.
    let i = find(
        &log,
        |e| matches!(e, LogEvent::Transfer { target, .. } if *target == entry(&obj, 3, 0)),
    );
    log.remove(i);
    let v = check_stack(&log, &obj.meta).unwrap();
    assert_eq!(v.violations[0].event_index, i);
    assert!(v.violations[0].detail.contains("not reached by a direct call"));
}

#[test]
fn push_of_wrong_value_or_slot_is_flagged() {
    let (obj, log) = setup();
    let push = |e: &LogEvent| {
        matches!(e, LogEvent::Store { pc, .. }
            if obj.meta.trusted_range_at(*pc).is_some_and(|r| r.kind == RangeKind::EntryPush))
    };
    let i = find(&log, push);

    let mut forged = log.clone();
    if let LogEvent::Store { value, .. } = &mut forged[i] {
        *value += 1;
    }
    only(check_stack(&forged, &obj.meta).unwrap(), 3, i);

    let mut forged = log.clone();
    if let LogEvent::Store { target, .. } = &mut forged[i] {
        target.0 += 1;
    }
    only(check_stack(&forged, &obj.meta).unwrap(), 3, i);
}

#[test]
fn injections_do_not_break_the_call_push_pairing() {
    let (obj, mut log) = setup();
    let i = find(
        &log,
        |e| matches!(e, LogEvent::Transfer { target, .. } if *target == entry(&obj, 2, 0)),
    );
    let step = log[i].step() + 1;
    log.insert(
        i + 1,
        LogEvent::Inject {
            step,
            target: addr(&obj, 2, 1, 0),
            value: 7,
        },
    );
    assert!(check_stack(&log, &obj.meta).unwrap().pass());
}

#[test]
fn pc_outside_code_is_a_meta_mismatch() {
    let (obj, mut log) = setup();
    log.push(LogEvent::Halt {
        step: 999,
        pc: addr(&obj, 1, 1, 0),
    });
    let n = log.len() - 1;
    for check in [check_store, check_jump, check_stack] {
        assert_eq!(
            check(&log, &obj.meta),
            Err(CheckError::MetaMismatch {
                event_index: n,
                pc: addr(&obj, 1, 1, 0)
            })
        );
    }
}

#[test]
fn early_return_through_own_pop_sequence_passes() {
    let src = "\
sfi-ir 1
main 1.0
component 1 {
  export 0
  import 2.0
  proc 0 {
    call 2.0
    return
  }
}
component 2 {
  export 0
  export 1
  proc 0 {
    const label L1 -> r21
    jump r21
    call 2.1
  L1:
    return
  }
  proc 1 {
    return
  }
}
";
    let p = parse_program(src).unwrap();
    let obj = compile(&p, Default::default()).unwrap();
    let out = run(&obj, 1000).unwrap();
    assert_eq!(out.status, RunStatus::Halted);
    for v in check_all(&out.log, &obj.meta).unwrap() {
        assert!(v.pass(), "{v:?}");
    }
}
