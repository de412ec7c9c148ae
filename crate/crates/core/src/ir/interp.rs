//! Reference interpreter. Produces the cross-component call/return trace
//! that compiled code is compared against.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BlockId, ComponentId, IrConstant, IrInstr, IrProgram, Label, ProcId, ARG_REGISTER, IR_REGISTERS};
use crate::isa::{BinOp, Word};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Value {
    Int(Word),
    Ptr(ComponentId, BlockId, i64),
    Code(ComponentId, ProcId, Label),
    Undef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum TraceEvent {
    Call {
        caller: ComponentId,
        procedure: ProcId,
        arg: Word,
        callee: ComponentId,
    },
    Ret {
        returner: ComponentId,
        value: Word,
        returnee: ComponentId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum UndefinedBehavior {
    #[error("load through a non-pointer")]
    LoadNonPointer,
    #[error("store through a non-pointer")]
    StoreNonPointer,
    #[error("access through a pointer into another component")]
    ForeignPointer,
    #[error("out-of-bounds access")]
    OutOfBounds,
    #[error("jump to something other than an own code label")]
    BadJumpTarget,
    #[error("arithmetic on pointer operands")]
    PointerArithmetic,
    #[error("branch on a non-integer")]
    BranchOnNonInt,
    #[error("pointer or undefined value passed across a component boundary")]
    BoundaryValue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IrStatus {
    Halted,
    OutOfFuel,
    UndefinedBehavior { reason: UndefinedBehavior, step: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IrOutcome {
    pub status: IrStatus,
    pub trace: Vec<TraceEvent>,
    pub steps: u64,
}

struct Frame {
    comp: ComponentId,
    proc: ProcId,
    resume: usize,
}

struct Interp {
    labels: HashMap<(ComponentId, ProcId), HashMap<Label, usize>>,
    regs: [Value; IR_REGISTERS],
    mem: BTreeMap<(ComponentId, BlockId), Vec<Value>>,
    stack: Vec<Frame>,
    comp: ComponentId,
    proc: ProcId,
    pc: usize,
    word_mask: Word,
    trace: Vec<TraceEvent>,
}

enum Flow {
    Next,
    Goto(usize),
    Halt,
}

/// Runs a validated program for at most `fuel` steps with 64-bit words.
pub fn interpret(program: &IrProgram, fuel: u64) -> IrOutcome {
    interpret_words(program, fuel, u64::MAX)
}

/// Like [`interpret`] with arithmetic reduced by `word_mask`.
pub fn interpret_words(program: &IrProgram, fuel: u64, word_mask: Word) -> IrOutcome {
    assert!(fuel >= 1, "fuel must be at least 1");
    let mut labels = HashMap::new();
    let mut mem = BTreeMap::new();
    for c in &program.components {
        for (&p, body) in &c.procedures {
            let map = body
                .iter()
                .enumerate()
                .filter_map(|(i, ins)| match ins {
                    IrInstr::Label(l) => Some((*l, i)),
                    _ => None,
                })
                .collect();
            labels.insert((c.id, p), map);
        }
        for (&b, block) in &c.blocks {
            let mut words: Vec<Value> = block.init.iter().map(|&w| Value::Int(w & word_mask)).collect();
            words.resize(block.size as usize, Value::Undef);
            mem.insert((c.id, b), words);
        }
    }
    let mut it = Interp {
        labels,
        regs: [Value::Int(0); IR_REGISTERS],
        mem,
        stack: Vec::new(),
        comp: program.main.0,
        proc: program.main.1,
        pc: 0,
        word_mask,
        trace: Vec::new(),
    };
    let mut steps = 0;
    let status = loop {
        if steps == fuel {
            break IrStatus::OutOfFuel;
        }
        let body = program.procedure(it.comp, it.proc).expect("validated program");
        let Some(ins) = body.get(it.pc).copied() else {
            // Falling off the end of a procedure halts, as the compiled code
            // does.
            break IrStatus::Halted;
        };
        match it.exec(ins) {
            Ok(Flow::Next) => it.pc += 1,
            Ok(Flow::Goto(i)) => it.pc = i,
            Ok(Flow::Halt) => {
                steps += 1;
                break IrStatus::Halted;
            }
            Err(reason) => break IrStatus::UndefinedBehavior { reason, step: steps },
        }
        steps += 1;
    };
    IrOutcome {
        status,
        trace: it.trace,
        steps,
    }
}

impl Interp {
    fn reg(&self, r: crate::isa::Register) -> Value {
        self.regs[r.index()]
    }

    fn set(&mut self, r: crate::isa::Register, v: Value) {
        self.regs[r.index()] = v;
    }

    fn label(&self, l: Label) -> usize {
        self.labels[&(self.comp, self.proc)][&l]
    }

    fn binop(&self, op: BinOp, a: Value, b: Value) -> Result<Value, UndefinedBehavior> {
        use Value::*;
        Ok(match (a, b) {
            (Undef, _) | (_, Undef) => Undef,
            (Int(x), Int(y)) => Int(op.eval(x, y, self.word_mask)),
            (Ptr(c, blk, off), Int(k)) if op == BinOp::Add => Ptr(c, blk, off.wrapping_add(k as i64)),
            (Int(k), Ptr(c, blk, off)) if op == BinOp::Add => Ptr(c, blk, off.wrapping_add(k as i64)),
            (Ptr(c, blk, off), Int(k)) if op == BinOp::Sub => Ptr(c, blk, off.wrapping_sub(k as i64)),
            _ => return Err(UndefinedBehavior::PointerArithmetic),
        })
    }

    fn cell(&mut self, p: Value, non_pointer: UndefinedBehavior) -> Result<&mut Value, UndefinedBehavior> {
        let Value::Ptr(c, b, off) = p else {
            return Err(non_pointer);
        };
        if c != self.comp {
            return Err(UndefinedBehavior::ForeignPointer);
        }
        let block = self.mem.get_mut(&(c, b)).ok_or(UndefinedBehavior::OutOfBounds)?;
        usize::try_from(off)
            .ok()
            .and_then(|i| block.get_mut(i))
            .ok_or(UndefinedBehavior::OutOfBounds)
    }

    fn boundary_word(&self) -> Result<Word, UndefinedBehavior> {
        match self.regs[ARG_REGISTER] {
            Value::Int(w) => Ok(w),
            _ => Err(UndefinedBehavior::BoundaryValue),
        }
    }

    fn exec(&mut self, ins: IrInstr) -> Result<Flow, UndefinedBehavior> {
        match ins {
            IrInstr::Nop | IrInstr::Label(_) => {}
            IrInstr::Const(k, rd) => {
                let v = match k {
                    IrConstant::Word(w) => Value::Int(w & self.word_mask),
                    IrConstant::Ptr(b, off) => Value::Ptr(self.comp, b, off),
                    IrConstant::Code(l) => Value::Code(self.comp, self.proc, l),
                };
                self.set(rd, v);
            }
            IrInstr::Mov(rs, rd) => self.set(rd, self.reg(rs)),
            IrInstr::BinOp(op, a, b, rd) => {
                let v = self.binop(op, self.reg(a), self.reg(b))?;
                self.set(rd, v);
            }
            IrInstr::Load(rp, rd) => {
                let v = *self.cell(self.reg(rp), UndefinedBehavior::LoadNonPointer)?;
                self.set(rd, v);
            }
            IrInstr::Store(rp, rs) => {
                let v = self.reg(rs);
                let comp = self.comp;
                let target = self.reg(rp);
                *self.cell(target, UndefinedBehavior::StoreNonPointer)? = v;
                // A store can only ever reach the executing component's blocks.
                debug_assert!(matches!(target, Value::Ptr(c, _, _) if c == comp));
            }
            IrInstr::Bnz(rs, l) => match self.reg(rs) {
                Value::Int(0) => {}
                Value::Int(_) => return Ok(Flow::Goto(self.label(l))),
                _ => return Err(UndefinedBehavior::BranchOnNonInt),
            },
            IrInstr::Jump(rt) => match self.reg(rt) {
                Value::Code(c, p, l) if c == self.comp => {
                    self.proc = p;
                    return Ok(Flow::Goto(self.label(l)));
                }
                _ => return Err(UndefinedBehavior::BadJumpTarget),
            },
            IrInstr::Jal(l) => return Ok(Flow::Goto(self.label(l))),
            IrInstr::Call(callee, p) => {
                if callee != self.comp {
                    let arg = self.boundary_word()?;
                    self.trace.push(TraceEvent::Call {
                        caller: self.comp,
                        procedure: p,
                        arg,
                        callee,
                    });
                }
                self.stack.push(Frame {
                    comp: self.comp,
                    proc: self.proc,
                    resume: self.pc + 1,
                });
                self.comp = callee;
                self.proc = p;
                return Ok(Flow::Goto(0));
            }
            IrInstr::Return => {
                let Some(frame) = self.stack.pop() else {
                    return Ok(Flow::Halt);
                };
                if frame.comp != self.comp {
                    let value = self.boundary_word()?;
                    self.trace.push(TraceEvent::Ret {
                        returner: self.comp,
                        value,
                        returnee: frame.comp,
                    });
                }
                self.comp = frame.comp;
                self.proc = frame.proc;
                return Ok(Flow::Goto(frame.resume));
            }
            IrInstr::Halt => return Ok(Flow::Halt),
        }
        Ok(Flow::Next)
    }
}

/// True when every `Ret` matches the most recent unmatched `Call`.
pub fn well_bracketed(trace: &[TraceEvent]) -> bool {
    let mut open = Vec::new();
    for ev in trace {
        match *ev {
            TraceEvent::Call { caller, callee, .. } => open.push((caller, callee)),
            TraceEvent::Ret { returner, returnee, .. } => match open.pop() {
                Some((caller, callee)) if caller == returnee && callee == returner => {}
                _ => return false,
            },
        }
    }
    true
}
