//! Small-step simulator for the target machine.
//!
//! Code is fetched from the object, never from data memory, so stores cannot
//! modify code. Every store, every control transfer other than fall-through,
//! and every halt is recorded in the execution log.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::MachineObject;
use crate::isa::{Address, Instruction, Register, Word};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferKind {
    JumpReg,
    JalDirect,
    BnzTaken,
}

/// One log entry. `pc` is the address of the instruction that caused it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum LogEvent {
    Store {
        step: u64,
        pc: Address,
        target: Address,
        value: Word,
    },
    Transfer {
        step: u64,
        pc: Address,
        target: Address,
        kind: TransferKind,
        /// Argument/return register at the time of the transfer.
        r3: Word,
    },
    Halt {
        step: u64,
        pc: Address,
    },
    /// Data corruption injected by the attack harness, not by an instruction.
    Inject {
        step: u64,
        target: Address,
        value: Word,
    },
}

impl LogEvent {
    pub fn step(&self) -> u64 {
        match *self {
            LogEvent::Store { step, .. }
            | LogEvent::Transfer { step, .. }
            | LogEvent::Halt { step, .. }
            | LogEvent::Inject { step, .. } => step,
        }
    }

    pub fn pc(&self) -> Option<Address> {
        match *self {
            LogEvent::Store { pc, .. } | LogEvent::Transfer { pc, .. } | LogEvent::Halt { pc, .. } => Some(pc),
            LogEvent::Inject { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum StuckReason {
    #[error("no laid-out code word at the program counter")]
    InvalidFetch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Halted,
    OutOfFuel,
    Stuck { reason: StuckReason, step: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MachineError {
    #[error("fuel must be at least 1")]
    ZeroFuel,
    #[error("injection target {0} is not inside a component's data block")]
    InjectionOutsideData(Address),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineState {
    pub pc: Address,
    pub regs: [Word; Register::COUNT],
    pub mem: BTreeMap<u64, Word>,
    pub halted: bool,
    pub steps: u64,
}

impl MachineState {
    /// Initial state: data blocks loaded, registers zero, pc at the startup
    /// code.
    pub fn boot(obj: &MachineObject) -> MachineState {
        let mut mem = BTreeMap::new();
        for (&(c, slot), words) in &obj.data_init {
            let base = obj.cfg.encode(c, slot, 0).expect("object slots are encodable");
            for (i, &w) in words.iter().enumerate() {
                mem.insert(base.0 + i as u64, w);
            }
        }
        MachineState {
            pc: obj.meta.startup,
            regs: [0; Register::COUNT],
            mem,
            halted: false,
            steps: 0,
        }
    }

    pub fn reg(&self, r: Register) -> Word {
        self.regs[r.index()]
    }

    pub fn load(&self, addr: Word, obj: &MachineObject) -> Word {
        self.mem.get(&addr).copied().unwrap_or(obj.meta.unmapped_load_value)
    }

    /// Executes one instruction. A halted state is left unchanged.
    pub fn step(&mut self, obj: &MachineObject) -> Result<Option<LogEvent>, StuckReason> {
        if self.halted {
            return Ok(None);
        }
        let mask = obj.cfg.word_mask();
        let pc = self.pc;
        let ins = obj.fetch(pc).ok_or(StuckReason::InvalidFetch)?;
        let step = self.steps;
        let mut next = Address(pc.0.wrapping_add(1) & mask);
        let mut event = None;
        let transfer = |target: Address, kind, regs: &[Word; Register::COUNT]| {
            Some(LogEvent::Transfer {
                step,
                pc,
                target,
                kind,
                r3: regs[crate::ir::ARG_REGISTER],
            })
        };
        match ins {
            Instruction::Nop => {}
            Instruction::Const(imm, rd) => self.regs[rd.index()] = imm & mask,
            Instruction::Mov(rs, rd) => self.regs[rd.index()] = self.reg(rs),
            Instruction::BinOp(op, a, b, rd) => self.regs[rd.index()] = op.eval(self.reg(a), self.reg(b), mask),
            Instruction::Load(rp, rd) => self.regs[rd.index()] = self.load(self.reg(rp), obj),
            Instruction::Store(rp, rs) => {
                let target = Address(self.reg(rp));
                let value = self.reg(rs);
                self.mem.insert(target.0, value);
                event = Some(LogEvent::Store {
                    step,
                    pc,
                    target,
                    value,
                });
            }
            Instruction::Bnz(rs, rel) => {
                if self.reg(rs) != 0 {
                    next = Address(pc.offset_by(rel).0 & mask);
                    event = transfer(next, TransferKind::BnzTaken, &self.regs);
                }
            }
            Instruction::Jump(rt) => {
                next = Address(self.reg(rt));
                event = transfer(next, TransferKind::JumpReg, &self.regs);
            }
            Instruction::Jal(target) => {
                event = transfer(target, TransferKind::JalDirect, &self.regs);
                self.regs[Register::RA.index()] = next.0;
                next = target;
            }
            Instruction::Halt => {
                self.halted = true;
                next = pc;
                event = Some(LogEvent::Halt { step, pc });
            }
        }
        self.pc = next;
        self.steps += 1;
        Ok(event)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub final_state: MachineState,
    pub log: Vec<LogEvent>,
}

/// A write of `value` to `target`, applied before instruction `step` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Injection {
    pub step: u64,
    pub target: Address,
    pub value: Word,
}

pub fn run(obj: &MachineObject, fuel: u64) -> Result<RunOutcome, MachineError> {
    run_with_injections(obj, fuel, &[])
}

/// Checks that `target` lies inside one of the data blocks of a (non-runtime)
/// component.
pub fn check_injection_target(obj: &MachineObject, target: Address) -> Result<(), MachineError> {
    let d = obj.cfg.decode(target);
    let inside = d.component.0 != 0
        && d.is_data()
        && obj
            .meta
            .block_map
            .iter()
            .any(|(&(c, _), b)| c == d.component && b.slot == d.slot && d.offset < b.size);
    if inside {
        Ok(())
    } else {
        Err(MachineError::InjectionOutsideData(target))
    }
}

pub fn run_with_injections(
    obj: &MachineObject,
    fuel: u64,
    injections: &[Injection],
) -> Result<RunOutcome, MachineError> {
    if fuel == 0 {
        return Err(MachineError::ZeroFuel);
    }
    for inj in injections {
        check_injection_target(obj, inj.target)?;
    }
    let mut pending: Vec<Injection> = injections.to_vec();
    pending.sort_by_key(|i| i.step);
    let mut pending = pending.into_iter().peekable();

    let mut state = MachineState::boot(obj);
    let mut log = Vec::new();
    let status = loop {
        if state.halted {
            break RunStatus::Halted;
        }
        if state.steps == fuel {
            break RunStatus::OutOfFuel;
        }
        while let Some(inj) = pending.next_if(|i| i.step <= state.steps) {
            state.mem.insert(inj.target.0, inj.value);
            log.push(LogEvent::Inject {
                step: state.steps,
                target: inj.target,
                value: inj.value,
            });
        }
        match state.step(obj) {
            Ok(Some(ev)) => log.push(ev),
            Ok(None) => {}
            Err(reason) => {
                break RunStatus::Stuck {
                    reason,
                    step: state.steps,
                }
            }
        }
    };
    Ok(RunOutcome {
        status,
        final_state: state,
        log,
    })
}
