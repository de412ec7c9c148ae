//! Component-aware RISC-like intermediate language.
//!
//! Pointers and code labels are symbolic; calls between components are
//! abstract `call c.p` instructions checked against the caller's imports.

mod interp;
mod text;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::isa::{BinOp, Register, Word};

pub use crate::isa::ComponentId;
pub use interp::{interpret, interpret_words, well_bracketed, IrOutcome, IrStatus, TraceEvent, UndefinedBehavior};
pub use text::{instr_text, parse_program, print_program, ParseError, IR_FORMAT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProcId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label(pub u32);

impl fmt::Display for ProcId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0)
    }
}

/// Register used for both the argument and the return value of calls.
pub const ARG_REGISTER: usize = 3;
/// Registers available to IR code: `r0` through `r24`.
pub const IR_REGISTERS: usize = Register::FIRST_RESERVED as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IrConstant {
    Word(Word),
    /// Pointer into one of the current component's blocks.
    Ptr(BlockId, i64),
    /// Address of a label of the current procedure.
    Code(Label),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IrInstr {
    Nop,
    Const(IrConstant, Register),
    Mov(Register, Register),
    BinOp(BinOp, Register, Register, Register),
    Load(Register, Register),
    Store(Register, Register),
    Bnz(Register, Label),
    Jump(Register),
    /// Direct jump to a label of the current procedure (link register is not
    /// visible at this level).
    Jal(Label),
    Call(ComponentId, ProcId),
    Return,
    Halt,
    Label(Label),
}

impl IrInstr {
    pub fn registers(&self) -> Vec<Register> {
        match *self {
            IrInstr::Const(_, rd) => vec![rd],
            IrInstr::Mov(a, b) | IrInstr::Load(a, b) | IrInstr::Store(a, b) => vec![a, b],
            IrInstr::BinOp(_, a, b, rd) => vec![a, b, rd],
            IrInstr::Bnz(r, _) | IrInstr::Jump(r) => vec![r],
            _ => Vec::new(),
        }
    }

    pub fn is_label(&self) -> bool {
        matches!(self, IrInstr::Label(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataBlock {
    /// Size in words.
    pub size: u64,
    /// Initial contents of the first `init.len()` words.
    pub init: Vec<Word>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IrComponent {
    pub id: ComponentId,
    pub exports: BTreeSet<ProcId>,
    pub imports: BTreeSet<(ComponentId, ProcId)>,
    pub procedures: BTreeMap<ProcId, Vec<IrInstr>>,
    pub blocks: BTreeMap<BlockId, DataBlock>,
}

impl IrComponent {
    pub fn new(id: ComponentId) -> Self {
        IrComponent {
            id,
            exports: BTreeSet::new(),
            imports: BTreeSet::new(),
            procedures: BTreeMap::new(),
            blocks: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IrProgram {
    pub components: Vec<IrComponent>,
    pub main: (ComponentId, ProcId),
}

impl IrProgram {
    pub fn component(&self, id: ComponentId) -> Option<&IrComponent> {
        self.components.iter().find(|c| c.id == id)
    }

    pub fn procedure(&self, c: ComponentId, p: ProcId) -> Option<&[IrInstr]> {
        self.component(c)?.procedures.get(&p).map(Vec::as_slice)
    }

    /// Number of instructions, not counting label markers.
    pub fn instruction_count(&self) -> usize {
        self.components
            .iter()
            .flat_map(|c| c.procedures.values())
            .flatten()
            .filter(|i| !i.is_label())
            .count()
    }
}

/// Where a well-formedness problem was found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Site {
    pub component: ComponentId,
    pub procedure: Option<ProcId>,
    pub index: Option<usize>,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "component {}", self.component)?;
        if let Some(p) = self.procedure {
            write!(f, ", procedure {p}")?;
        }
        if let Some(i) = self.index {
            write!(f, ", instruction {i}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WfKind {
    ReservedComponentId,
    DuplicateComponent,
    MainMissing,
    MainNotExported,
    ExportMissing(ProcId),
    ImportFromSelf(ProcId),
    ImportUnknown(ComponentId, ProcId),
    CallNotImported(ComponentId, ProcId),
    DuplicateLabel(Label),
    UndefinedLabel(Label),
    ReservedRegister(Register),
    UnknownBlock(BlockId),
    EmptyBlock(BlockId),
    InitTooLong(BlockId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WellFormednessError {
    pub site: Site,
    pub kind: WfKind,
}

impl fmt::Display for WellFormednessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} at {}", self.kind, self.site)
    }
}

/// Checks the static discipline of a program. An empty result means the
/// program is well formed.
pub fn validate(program: &IrProgram) -> Vec<WellFormednessError> {
    let mut errs = Vec::new();
    let mut seen = BTreeSet::new();
    let site = |component, procedure, index| Site {
        component,
        procedure,
        index,
    };

    for comp in &program.components {
        let at = |p: Option<ProcId>, i: Option<usize>| site(comp.id, p, i);
        if comp.id.0 == 0 {
            errs.push(WellFormednessError {
                site: at(None, None),
                kind: WfKind::ReservedComponentId,
            });
        }
        if !seen.insert(comp.id) {
            errs.push(WellFormednessError {
                site: at(None, None),
                kind: WfKind::DuplicateComponent,
            });
        }
        for &p in &comp.exports {
            if !comp.procedures.contains_key(&p) {
                errs.push(WellFormednessError {
                    site: at(Some(p), None),
                    kind: WfKind::ExportMissing(p),
                });
            }
        }
        for &(c, p) in &comp.imports {
            if c == comp.id {
                errs.push(WellFormednessError {
                    site: at(None, None),
                    kind: WfKind::ImportFromSelf(p),
                });
            } else if !program.component(c).is_some_and(|o| o.exports.contains(&p)) {
                errs.push(WellFormednessError {
                    site: at(None, None),
                    kind: WfKind::ImportUnknown(c, p),
                });
            }
        }
        for (&b, block) in &comp.blocks {
            if block.size == 0 {
                errs.push(WellFormednessError {
                    site: at(None, None),
                    kind: WfKind::EmptyBlock(b),
                });
            }
            if block.init.len() as u64 > block.size {
                errs.push(WellFormednessError {
                    site: at(None, None),
                    kind: WfKind::InitTooLong(b),
                });
            }
        }
        for (&p, body) in &comp.procedures {
            let mut defined = BTreeMap::new();
            for (i, ins) in body.iter().enumerate() {
                if let IrInstr::Label(l) = ins {
                    if defined.insert(*l, i).is_some() {
                        errs.push(WellFormednessError {
                            site: at(Some(p), Some(i)),
                            kind: WfKind::DuplicateLabel(*l),
                        });
                    }
                }
            }
            for (i, ins) in body.iter().enumerate() {
                let mut push = |kind| {
                    errs.push(WellFormednessError {
                        site: at(Some(p), Some(i)),
                        kind,
                    })
                };
                for r in ins.registers() {
                    if r.is_reserved() {
                        push(WfKind::ReservedRegister(r));
                    }
                }
                match *ins {
                    IrInstr::Bnz(_, l) | IrInstr::Jal(l) | IrInstr::Const(IrConstant::Code(l), _)
                        if !defined.contains_key(&l) =>
                    {
                        push(WfKind::UndefinedLabel(l))
                    }
                    IrInstr::Const(IrConstant::Ptr(b, _), _) if !comp.blocks.contains_key(&b) => {
                        push(WfKind::UnknownBlock(b))
                    }
                    IrInstr::Call(c, q) => {
                        let ok = if c == comp.id {
                            comp.procedures.contains_key(&q)
                        } else {
                            comp.imports.contains(&(c, q))
                        };
                        if !ok {
                            push(WfKind::CallNotImported(c, q));
                        }
                    }
                    _ => {}
                }
            }
        }
    }

    let (mc, mp) = program.main;
    match program.component(mc) {
        Some(c) if c.procedures.contains_key(&mp) => {
            if !c.exports.contains(&mp) {
                errs.push(WellFormednessError {
                    site: site(mc, Some(mp), None),
                    kind: WfKind::MainNotExported,
                });
            }
        }
        _ => errs.push(WellFormednessError {
            site: site(mc, Some(mp), None),
            kind: WfKind::MainMissing,
        }),
    }
    errs
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn r(i: u8) -> Register {
        Register::new(i).unwrap()
    }

    /// Component 1 exports procedure 0 and imports component 2's procedure 0.
    pub fn two_components(main_body: Vec<IrInstr>, callee_body: Vec<IrInstr>) -> IrProgram {
        let mut a = IrComponent::new(ComponentId(1));
        a.exports.insert(ProcId(0));
        a.imports.insert((ComponentId(2), ProcId(0)));
        a.procedures.insert(ProcId(0), main_body);
        a.blocks.insert(
            BlockId(0),
            DataBlock {
                size: 4,
                init: vec![1, 2, 3, 4],
            },
        );
        let mut b = IrComponent::new(ComponentId(2));
        b.exports.insert(ProcId(0));
        b.procedures.insert(ProcId(0), callee_body);
        b.blocks.insert(
            BlockId(0),
            DataBlock {
                size: 2,
                init: vec![0, 0],
            },
        );
        IrProgram {
            components: vec![a, b],
            main: (ComponentId(1), ProcId(0)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn minimal_cross_component_program_is_valid() {
        let p = two_components(
            vec![IrInstr::Call(ComponentId(2), ProcId(0)), IrInstr::Return],
            vec![IrInstr::Return],
        );
        assert_eq!(validate(&p), vec![]);
    }

    #[test]
    fn call_outside_imports_is_reported() {
        let p = two_components(
            vec![IrInstr::Call(ComponentId(2), ProcId(1)), IrInstr::Return],
            vec![IrInstr::Return],
        );
        let errs = validate(&p);
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].kind, WfKind::CallNotImported(ComponentId(2), ProcId(1)));
        assert_eq!(errs[0].site.index, Some(0));
        assert_eq!(errs[0].site.procedure, Some(ProcId(0)));
    }

    #[test]
    fn duplicate_and_undefined_labels() {
        let p = two_components(
            vec![
                IrInstr::Label(Label(1)),
                IrInstr::Label(Label(1)),
                IrInstr::Jal(Label(9)),
                IrInstr::Return,
            ],
            vec![IrInstr::Return],
        );
        let kinds: Vec<_> = validate(&p).into_iter().map(|e| e.kind).collect();
        assert_eq!(
            kinds,
            vec![WfKind::DuplicateLabel(Label(1)), WfKind::UndefinedLabel(Label(9))]
        );
    }

    #[test]
    fn structural_errors() {
        let mut p = two_components(vec![IrInstr::Const(IrConstant::Word(0), r(26))], vec![]);
        p.components[0].imports.insert((ComponentId(1), ProcId(0)));
        p.components[0].imports.insert((ComponentId(2), ProcId(5)));
        p.components[0].exports.insert(ProcId(4));
        p.components[1].blocks.insert(
            BlockId(3),
            DataBlock {
                size: 1,
                init: vec![1, 2],
            },
        );
        p.components[1].exports.clear();
        p.main = (ComponentId(2), ProcId(0));
        let kinds: Vec<_> = validate(&p).into_iter().map(|e| e.kind).collect();
        assert!(kinds.contains(&WfKind::ReservedRegister(r(26))));
        assert!(kinds.contains(&WfKind::ImportFromSelf(ProcId(0))));
        assert!(kinds.contains(&WfKind::ImportUnknown(ComponentId(2), ProcId(5))));
        assert!(kinds.contains(&WfKind::ExportMissing(ProcId(4))));
        assert!(kinds.contains(&WfKind::InitTooLong(BlockId(3))));
        assert!(kinds.contains(&WfKind::MainNotExported));
    }
}
