//! Lowering, bundle-aware placement and address resolution.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{
    BlockPlacement, CodeRange, CompileError, LayoutMeta, MachineObject, Mutation, RangeKind, RegisterConventions,
    TrustedRange,
};
use crate::ir::{BlockId, ComponentId, IrConstant, IrInstr, IrProgram, Label, ProcId};
use crate::isa::{Address, BinOp, BitConfig, Instruction, Register, Word};

/// Halt guard plus the five-word entry sequence must share a bundle.
pub(super) const MIN_BUNDLE: u64 = 6;

const RUNTIME: ComponentId = ComponentId(0);
const STARTUP_LEN: u64 = 5;

fn tags(cfg: &BitConfig, c: ComponentId) -> (Word, Word) {
    let (_, data) = cfg
        .store_mask_constants(c)
        .expect("component id checked before lowering");
    let (_, code) = cfg
        .jump_mask_constants(c)
        .expect("component id checked before lowering");
    (data, code)
}

/// Pushes the link register on the protected stack and installs the
/// callee's tags.
pub fn entry_sequence(cfg: &BitConfig, callee: ComponentId) -> Vec<Instruction> {
    let (tag_data, tag_code) = tags(cfg, callee);
    vec![
        Instruction::Store(Register::SP_PROT, Register::RA),
        Instruction::Const(1, Register::SFI),
        Instruction::BinOp(BinOp::Add, Register::SP_PROT, Register::SFI, Register::SP_PROT),
        Instruction::Const(tag_data, Register::TAG_DATA),
        Instruction::Const(tag_code, Register::TAG_CODE),
    ]
}

/// Pops the protected stack and jumps, unmasked, to the popped address.
pub fn return_sequence() -> Vec<Instruction> {
    vec![
        Instruction::Const(1, Register::SFI),
        Instruction::BinOp(BinOp::Sub, Register::SP_PROT, Register::SFI, Register::SP_PROT),
        Instruction::Load(Register::SP_PROT, Register::SFI),
        Instruction::Jump(Register::SFI),
    ]
}

/// Reinstalls the caller's tags after a call returns.
pub fn post_call_restore(cfg: &BitConfig, caller: ComponentId) -> Vec<Instruction> {
    let (tag_data, tag_code) = tags(cfg, caller);
    vec![
        Instruction::Const(tag_data, Register::TAG_DATA),
        Instruction::Const(tag_code, Register::TAG_CODE),
    ]
}

pub fn startup_sequence(cfg: &BitConfig, main_entry: Address) -> Vec<Instruction> {
    let (mask_data, _) = cfg.store_mask_constants(ComponentId(1)).expect("one component fits");
    let (mask_code, _) = cfg.jump_mask_constants(ComponentId(1)).expect("one component fits");
    let base = protected_stack_base(cfg);
    vec![
        Instruction::Const(mask_data, Register::MASK_DATA),
        Instruction::Const(mask_code, Register::MASK_CODE),
        Instruction::Const(base.0, Register::SP_PROT),
        Instruction::Jal(main_entry),
        Instruction::Halt,
    ]
}

pub(super) fn protected_stack_base(cfg: &BitConfig) -> Address {
    cfg.encode(RUNTIME, 1, 0).expect("slot 1 always fits")
}

fn store_sequence(rp: Register, rs: Register, mutation: Option<Mutation>) -> Vec<Instruction> {
    let mut seq = vec![
        Instruction::BinOp(BinOp::BitAnd, rp, Register::MASK_DATA, Register::SFI),
        Instruction::BinOp(BinOp::BitOr, Register::SFI, Register::TAG_DATA, Register::SFI),
        Instruction::Store(Register::SFI, rs),
    ];
    if mutation == Some(Mutation::MissingStoreOr) {
        seq.remove(1);
    }
    seq
}

fn jump_sequence(rt: Register) -> Vec<Instruction> {
    vec![
        Instruction::BinOp(BinOp::BitAnd, rt, Register::MASK_CODE, Register::SFI),
        Instruction::BinOp(BinOp::BitOr, Register::SFI, Register::TAG_CODE, Register::SFI),
        Instruction::Jump(Register::SFI),
    ]
}

/// A machine word whose operand may still need an address.
#[derive(Debug, Clone, Copy)]
enum Sym {
    Ins(Instruction),
    JalLabel(Label),
    JalEntry(ComponentId, ProcId),
    Bnz(Register, Label),
    ConstLabel(Label, Register),
    ConstPtr(BlockId, i64, Register),
}

/// Words that must be placed inside a single bundle.
struct Chunk {
    words: Vec<Sym>,
    falls_through: bool,
    trusted: Option<(RangeKind, usize, usize)>,
}

impl Chunk {
    fn one(s: Sym, falls_through: bool) -> Chunk {
        Chunk {
            words: vec![s],
            falls_through,
            trusted: None,
        }
    }

    fn seq(ins: Vec<Instruction>, falls_through: bool) -> Chunk {
        Chunk {
            words: ins.into_iter().map(Sym::Ins).collect(),
            falls_through,
            trusted: None,
        }
    }
}

/// A procedure laid out from a bundle-aligned local offset 0.
struct LocalProc {
    words: Vec<Sym>,
    labels: HashMap<Label, u64>,
    entry: u64,
    trusted: Vec<(u64, u64, RangeKind)>,
}

pub(super) struct Compiler<'a> {
    program: &'a IrProgram,
    cfg: BitConfig,
    mutation: Option<Mutation>,
}

impl<'a> Compiler<'a> {
    pub(super) fn new(program: &'a IrProgram, cfg: BitConfig, mutation: Option<Mutation>) -> Self {
        Compiler { program, cfg, mutation }
    }

    fn lower(&self, comp: ComponentId, body: &[IrInstr]) -> Vec<Result<Chunk, (Label, bool)>> {
        let address_taken: BTreeSet<Label> = body
            .iter()
            .filter_map(|i| match i {
                IrInstr::Const(IrConstant::Code(l), _) => Some(*l),
                _ => None,
            })
            .collect();
        let mask = self.cfg.word_mask();
        body.iter()
            .map(|ins| {
                Ok(match *ins {
                    IrInstr::Label(l) => return Err((l, address_taken.contains(&l))),
                    IrInstr::Nop => Chunk::one(Sym::Ins(Instruction::Nop), true),
                    IrInstr::Const(IrConstant::Word(w), rd) => {
                        Chunk::one(Sym::Ins(Instruction::Const(w & mask, rd)), true)
                    }
                    IrInstr::Const(IrConstant::Ptr(b, off), rd) => Chunk::one(Sym::ConstPtr(b, off, rd), true),
                    IrInstr::Const(IrConstant::Code(l), rd) => Chunk::one(Sym::ConstLabel(l, rd), true),
                    IrInstr::Mov(rs, rd) => Chunk::one(Sym::Ins(Instruction::Mov(rs, rd)), true),
                    IrInstr::BinOp(op, a, b, rd) => Chunk::one(Sym::Ins(Instruction::BinOp(op, a, b, rd)), true),
                    IrInstr::Load(rp, rd) => Chunk::one(Sym::Ins(Instruction::Load(rp, rd)), true),
                    IrInstr::Store(rp, rs) => Chunk::seq(store_sequence(rp, rs, self.mutation), true),
                    IrInstr::Bnz(rs, l) => Chunk::one(Sym::Bnz(rs, l), true),
                    IrInstr::Jump(rt) => Chunk::seq(jump_sequence(rt), false),
                    IrInstr::Jal(l) => Chunk::one(Sym::JalLabel(l), false),
                    IrInstr::Call(c, p) => {
                        let mut words = vec![Sym::JalEntry(c, p)];
                        let mut trusted = None;
                        if self.mutation != Some(Mutation::SkipTagRestore) {
                            words.extend(post_call_restore(&self.cfg, comp).into_iter().map(Sym::Ins));
                            trusted = Some((RangeKind::PostCallRestore, 1, 3));
                        }
                        Chunk {
                            words,
                            falls_through: true,
                            trusted,
                        }
                    }
                    IrInstr::Return => {
                        let mut seq = return_sequence();
                        if self.mutation == Some(Mutation::CorruptPop) {
                            seq[1] = Instruction::Nop;
                        }
                        let len = seq.len();
                        let mut ch = Chunk::seq(seq, false);
                        ch.trusted = Some((RangeKind::ReturnPop, 0, len));
                        ch
                    }
                    IrInstr::Halt => Chunk::one(Sym::Ins(Instruction::Halt), false),
                })
            })
            .collect()
    }

    fn place_local(&self, comp: ComponentId, body: &[IrInstr]) -> LocalProc {
        let bundle = self.cfg.bundle_size();
        let mut words = Vec::new();
        let entry = match self.mutation {
            Some(Mutation::AlignedEntry) => 0,
            Some(Mutation::MissingHaltGuard) => {
                words.push(Sym::Ins(Instruction::Nop));
                1
            }
            _ => {
                words.push(Sym::Ins(Instruction::Halt));
                1
            }
        };
        let entry_seq = entry_sequence(&self.cfg, comp);
        let mut trusted = vec![(entry, entry + entry_seq.len() as u64, RangeKind::EntryPush)];
        words.extend(entry_seq.into_iter().map(Sym::Ins));

        let mut labels = HashMap::new();
        // Labels bind to the next placed word, after any padding before it.
        let mut waiting = Vec::new();
        let mut falls_through = true;
        let pad = |words: &mut Vec<Sym>, falls_through: bool| {
            // Padding reached by sequential execution must keep executing;
            // padding nothing can fall into halts.
            let fill = if falls_through {
                Instruction::Nop
            } else {
                Instruction::Halt
            };
            while !(words.len() as u64).is_multiple_of(bundle) {
                words.push(Sym::Ins(fill));
            }
        };
        for item in self.lower(comp, body) {
            match item {
                Err((l, align)) => {
                    if align {
                        pad(&mut words, falls_through);
                    }
                    waiting.push(l);
                }
                Ok(chunk) => {
                    let len = chunk.words.len() as u64;
                    let used = words.len() as u64 % bundle;
                    if used + len > bundle {
                        pad(&mut words, falls_through);
                    }
                    let start = words.len() as u64;
                    labels.extend(waiting.drain(..).map(|l| (l, start)));
                    if let Some((kind, b, e)) = chunk.trusted {
                        trusted.push((start + b as u64, start + e as u64, kind));
                    }
                    words.extend(chunk.words);
                    falls_through = chunk.falls_through;
                }
            }
        }
        labels.extend(waiting.drain(..).map(|l| (l, words.len() as u64)));
        words.push(Sym::Ins(Instruction::Halt));
        LocalProc {
            words,
            labels,
            entry,
            trusted,
        }
    }

    pub(super) fn run(self) -> Result<MachineObject, CompileError> {
        let cfg = self.cfg;
        let cap = cfg.slot_capacity();
        let bundle = cfg.bundle_size();

        let mut block_map = BTreeMap::new();
        let mut data_init = BTreeMap::new();
        for comp in &self.program.components {
            for (rank, (&b, block)) in comp.blocks.iter().enumerate() {
                if block.size > cap {
                    return Err(CompileError::LayoutOverflow(format!(
                        "block {b} of component {} has {} words, a slot holds {cap}",
                        comp.id, block.size
                    )));
                }
                let slot = 2 * rank as u64 + 1;
                let base = cfg.encode(comp.id, slot, 0)?;
                block_map.insert(
                    (comp.id, b),
                    BlockPlacement {
                        slot,
                        base,
                        size: block.size,
                    },
                );
                if !block.init.is_empty() {
                    data_init.insert(
                        (comp.id, slot),
                        block.init.iter().map(|w| w & cfg.word_mask()).collect(),
                    );
                }
            }
        }

        // Placement: procedures of a component are packed into even slots.
        struct Placed {
            comp: ComponentId,
            proc: ProcId,
            slot: u64,
            base: u64,
            local: LocalProc,
        }
        let mut placed = Vec::new();
        for comp in &self.program.components {
            let (mut slot, mut cursor) = (0u64, 0u64);
            for (&pid, body) in &comp.procedures {
                let local = self.place_local(comp.id, body);
                let len = local.words.len() as u64;
                if len > cap {
                    return Err(CompileError::LayoutOverflow(format!(
                        "procedure {}.{pid} needs {len} words, a slot holds {cap}",
                        comp.id
                    )));
                }
                cursor = cursor.div_ceil(bundle) * bundle;
                if cursor + len > cap {
                    slot += 2;
                    cursor = 0;
                }
                if slot > cfg.max_slot() {
                    return Err(CompileError::LayoutOverflow(format!(
                        "component {} runs out of code slots",
                        comp.id
                    )));
                }
                placed.push(Placed {
                    comp: comp.id,
                    proc: pid,
                    slot,
                    base: cursor,
                    local,
                });
                cursor += len;
            }
        }

        let addr = |c: ComponentId, slot: u64, off: u64| cfg.encode(c, slot, off);
        let mut entry_points = BTreeMap::new();
        let mut procedures = BTreeMap::new();
        let mut trusted_ranges = Vec::new();
        for p in &placed {
            entry_points.insert((p.comp, p.proc), addr(p.comp, p.slot, p.base + p.local.entry)?);
            procedures.insert(
                (p.comp, p.proc),
                CodeRange {
                    begin: addr(p.comp, p.slot, p.base)?,
                    end: Address(addr(p.comp, p.slot, p.base)?.0 + p.local.words.len() as u64),
                },
            );
            for &(b, e, kind) in &p.local.trusted {
                let begin = addr(p.comp, p.slot, p.base + b)?;
                trusted_ranges.push(TrustedRange {
                    begin,
                    end: Address(begin.0 + (e - b)),
                    kind,
                });
            }
        }

        let main_entry = entry_points[&self.program.main];
        let mut code: BTreeMap<(ComponentId, u64), Vec<Instruction>> = BTreeMap::new();
        let mut startup = startup_sequence(&cfg, main_entry);
        if self.mutation == Some(Mutation::WrongStoreMask) {
            if let Instruction::Const(m, _) = &mut startup[0] {
                *m ^= 1 << cfg.offset_bits;
            }
        }
        code.insert((RUNTIME, 0), startup);
        let startup_addr = addr(RUNTIME, 0, 0)?;
        trusted_ranges.push(TrustedRange {
            begin: startup_addr,
            end: Address(startup_addr.0 + STARTUP_LEN),
            kind: RangeKind::Startup,
        });
        trusted_ranges.sort_by_key(|r| r.begin);

        let mask = cfg.word_mask();
        for p in &placed {
            let words = code.entry((p.comp, p.slot)).or_default();
            words.resize(p.base as usize, Instruction::Halt);
            for (i, sym) in p.local.words.iter().enumerate() {
                let pc = p.base + i as u64;
                let label = |l: &Label| addr(p.comp, p.slot, p.base + p.local.labels[l]);
                let ins = match *sym {
                    Sym::Ins(ins) => ins,
                    Sym::JalLabel(l) => Instruction::Jal(label(&l)?),
                    Sym::JalEntry(c, q) => Instruction::Jal(entry_points[&(c, q)]),
                    Sym::Bnz(rs, l) => Instruction::Bnz(rs, (p.base + p.local.labels[&l]) as i64 - pc as i64),
                    Sym::ConstLabel(l, rd) => Instruction::Const(label(&l)?.0, rd),
                    Sym::ConstPtr(b, off, rd) => {
                        let base = block_map[&(p.comp, b)].base;
                        Instruction::Const(base.0.wrapping_add(off as u64) & mask, rd)
                    }
                };
                words.push(ins);
            }
        }

        let code_extents = code.iter().map(|(&k, v)| (k, v.len() as u64)).collect();
        let imports = self
            .program
            .components
            .iter()
            .map(|c| (c.id, c.imports.clone()))
            .collect();
        let meta = LayoutMeta {
            cfg,
            main: self.program.main,
            entry_points,
            trusted_ranges,
            block_map,
            procedures,
            code_extents,
            imports,
            registers: RegisterConventions::default(),
            startup: startup_addr,
            protected_stack_base: protected_stack_base(&cfg),
            halt_anchor: Address(startup_addr.0 + STARTUP_LEN - 1),
            unmapped_load_value: 0,
        };
        Ok(MachineObject {
            cfg,
            code,
            data_init,
            meta,
        })
    }
}
