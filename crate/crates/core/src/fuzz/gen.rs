//! Program generator. Calls only go to procedures of strictly higher rank
//! (component, then procedure id), so the call graph is acyclic and every
//! generated program terminates or runs out of fuel by looping locally.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GenConfig, GenConfigError, Mode};
use crate::ir::{BlockId, ComponentId, DataBlock, IrComponent, IrConstant, IrInstr, IrProgram, Label, ProcId};
use crate::isa::{BinOp, Register, Word};

/// Registers that only ever hold integers in well-behaved programs.
const VALUE_REGS: std::ops::RangeInclusive<u8> = 0..=19;
/// Registers used for pointer and label constants right before their use.
const POINTER_REGS: std::ops::RangeInclusive<u8> = 20..=24;
const MAX_BLOCK: u64 = 8;

#[derive(Clone, Copy)]
enum Kind {
    Nop,
    Const,
    Mov,
    BinOp,
    Load,
    Store,
    Branch,
    Jump,
    Jal,
    Call,
    Ret,
    Halt,
}

const KINDS: [Kind; 12] = [
    Kind::Nop,
    Kind::Const,
    Kind::Mov,
    Kind::BinOp,
    Kind::Load,
    Kind::Store,
    Kind::Branch,
    Kind::Jump,
    Kind::Jal,
    Kind::Call,
    Kind::Ret,
    Kind::Halt,
];

/// Generates one program from `cfg.seed`.
pub fn gen_program(cfg: &GenConfig) -> Result<IrProgram, GenConfigError> {
    cfg.validate()?;
    Ok(generate(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)))
}

/// Component id, procedure count and `(block, size)` pairs.
type Shape = (ComponentId, u32, Vec<(BlockId, u64)>);

pub(super) fn generate<R: Rng>(cfg: &GenConfig, rng: &mut R) -> IrProgram {
    let n = rng.gen_range(cfg.components.clone());
    let shape: Vec<Shape> = (1..=n)
        .map(|c| {
            let procs = rng.gen_range(cfg.procedures.clone());
            let blocks = (0..rng.gen_range(cfg.blocks.clone()))
                .map(|b| (BlockId(b), rng.gen_range(1..=MAX_BLOCK)))
                .collect();
            (ComponentId(c), procs, blocks)
        })
        .collect();
    let all_procs: Vec<(ComponentId, ProcId)> = shape
        .iter()
        .flat_map(|(c, procs, _)| (0..*procs).map(move |p| (*c, ProcId(p))))
        .collect();

    let mut components = Vec::new();
    for (cid, procs, blocks) in &shape {
        let mut comp = IrComponent::new(*cid);
        for &(b, size) in blocks {
            let init = (0..size).map(|_| init_word(cfg, rng, n)).collect();
            comp.blocks.insert(b, DataBlock { size, init });
        }
        for p in 0..*procs {
            let me = (*cid, ProcId(p));
            let callees: Vec<_> = all_procs.iter().copied().filter(|&k| k > me).collect();
            let g = ProcGen {
                cfg,
                rng: &mut *rng,
                n_components: n,
                blocks,
                callees: &callees,
                body: Vec::new(),
                next_label: 0,
                pending: Vec::new(),
                placed: Vec::new(),
            };
            let body = g.run();
            for ins in &body {
                if let IrInstr::Call(c, q) = *ins {
                    if c != *cid {
                        comp.imports.insert((c, q));
                    }
                }
            }
            comp.procedures.insert(ProcId(p), body);
            comp.exports.insert(ProcId(p));
        }
        components.push(comp);
    }
    IrProgram {
        components,
        main: (ComponentId(1), ProcId(0)),
    }
}

fn init_word<R: Rng>(cfg: &GenConfig, rng: &mut R, n: u32) -> Word {
    match cfg.mode {
        Mode::WellBehaved => small_or_random(cfg, rng),
        Mode::Wild => match rng.gen_range(0..4) {
            0 => wild_data_address(cfg, rng, n),
            1 => wild_code_address(cfg, rng, n),
            _ => small_or_random(cfg, rng),
        },
    }
}

fn small_or_random<R: Rng>(cfg: &GenConfig, rng: &mut R) -> Word {
    if rng.gen_bool(0.7) {
        rng.gen_range(0..16)
    } else {
        rng.gen::<u64>() & cfg.bits.word_mask()
    }
}

fn small_offset<R: Rng>(rng: &mut R) -> u64 {
    match rng.gen_range(0..4) {
        0 => 0,
        1 => rng.gen_range(0..8),
        _ => rng.gen_range(0..256),
    }
}

pub(super) fn wild_data_address<R: Rng>(cfg: &GenConfig, rng: &mut R, n: u32) -> Word {
    let c = ComponentId(rng.gen_range(0..=n + 1));
    let slot = rng.gen_range(0..5);
    let off = if rng.gen_bool(0.5) {
        rng.gen_range(0..MAX_BLOCK)
    } else {
        small_offset(rng)
    };
    cfg.bits.encode(c, slot, off).map(|a| a.0).unwrap_or(off)
}

pub(super) fn wild_code_address<R: Rng>(cfg: &GenConfig, rng: &mut R, n: u32) -> Word {
    let c = ComponentId(rng.gen_range(0..=n + 1));
    let slot = rng.gen_range(0..4);
    let off = small_offset(rng);
    cfg.bits.encode(c, slot, off).map(|a| a.0).unwrap_or(off)
}

struct ProcGen<'a, R> {
    cfg: &'a GenConfig,
    rng: &'a mut R,
    n_components: u32,
    blocks: &'a [(BlockId, u64)],
    callees: &'a [(ComponentId, ProcId)],
    body: Vec<IrInstr>,
    next_label: u32,
    pending: Vec<Label>,
    placed: Vec<Label>,
}

fn reg(i: u8) -> Register {
    Register::new(i).expect("generator registers are below the reserved range")
}

impl<R: Rng> ProcGen<'_, R> {
    fn run(mut self) -> Vec<IrInstr> {
        let mut weights = self.cfg.weights.as_array();
        if self.callees.is_empty() {
            weights[9] = 0.0;
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            weights[0] = 1.0;
        }
        let dist = WeightedIndex::new(weights).expect("weights validated");
        let count = self.rng.gen_range(self.cfg.instructions.clone());
        for _ in 0..count {
            self.maybe_place_labels();
            let kind = KINDS[dist.sample(self.rng)];
            match self.cfg.mode {
                Mode::WellBehaved => self.well_behaved(kind),
                Mode::Wild => self.wild(kind),
            }
        }
        for l in std::mem::take(&mut self.pending) {
            self.body.push(IrInstr::Label(l));
        }
        self.body.push(IrInstr::Return);
        self.body
    }

    fn maybe_place_labels(&mut self) {
        let mut i = 0;
        while i < self.pending.len() {
            if self.rng.gen_bool(0.3) {
                let l = self.pending.swap_remove(i);
                self.body.push(IrInstr::Label(l));
                self.placed.push(l);
            } else {
                i += 1;
            }
        }
    }

    fn forward_label(&mut self) -> Label {
        let l = Label(self.next_label);
        self.next_label += 1;
        self.pending.push(l);
        l
    }

    fn any_label(&mut self, backward: f64) -> Label {
        if !self.placed.is_empty() && self.rng.gen_bool(backward) {
            *self.placed.choose(self.rng).expect("non-empty")
        } else {
            self.forward_label()
        }
    }

    fn value_reg(&mut self) -> Register {
        reg(self.rng.gen_range(VALUE_REGS))
    }

    fn pointer_reg(&mut self) -> Register {
        reg(self.rng.gen_range(POINTER_REGS))
    }

    fn any_reg(&mut self) -> Register {
        reg(self.rng.gen_range(0..Register::FIRST_RESERVED))
    }

    fn binop(&mut self) -> BinOp {
        *BinOp::ALL.choose(self.rng).expect("non-empty")
    }

    fn block(&mut self) -> (BlockId, u64) {
        *self.blocks.choose(self.rng).expect("components have blocks")
    }

    fn push(&mut self, ins: IrInstr) {
        self.body.push(ins);
    }

    /// Loads a pointer to an in-range word of an own block into `rp`.
    fn pointer_into(&mut self, rp: Register) {
        let (b, size) = self.block();
        let off = self.rng.gen_range(0..size);
        if self.rng.gen_bool(0.5) {
            self.push(IrInstr::Const(IrConstant::Ptr(b, off as i64), rp));
        } else {
            let rt = loop {
                let r = self.pointer_reg();
                if r != rp {
                    break r;
                }
            };
            self.push(IrInstr::Const(IrConstant::Ptr(b, 0), rp));
            self.push(IrInstr::Const(IrConstant::Word(off), rt));
            self.push(IrInstr::BinOp(BinOp::Add, rp, rt, rp));
        }
    }

    fn call(&mut self, set_arg: Option<Word>) {
        let &(c, p) = self.callees.choose(self.rng).expect("callees present");
        if let Some(w) = set_arg {
            self.push(IrInstr::Const(IrConstant::Word(w), reg(crate::ir::ARG_REGISTER as u8)));
        }
        self.push(IrInstr::Call(c, p));
    }

    fn well_behaved(&mut self, kind: Kind) {
        match kind {
            Kind::Nop => self.push(IrInstr::Nop),
            Kind::Const => {
                let w = small_or_random(self.cfg, self.rng);
                let rd = self.value_reg();
                self.push(IrInstr::Const(IrConstant::Word(w), rd));
            }
            Kind::Mov => {
                let (rs, rd) = (self.value_reg(), self.value_reg());
                self.push(IrInstr::Mov(rs, rd));
            }
            Kind::BinOp => {
                let (op, a, b, rd) = (self.binop(), self.value_reg(), self.value_reg(), self.value_reg());
                self.push(IrInstr::BinOp(op, a, b, rd));
            }
            Kind::Load => {
                let rp = self.pointer_reg();
                self.pointer_into(rp);
                let rd = self.value_reg();
                self.push(IrInstr::Load(rp, rd));
            }
            Kind::Store => {
                let rp = self.pointer_reg();
                self.pointer_into(rp);
                let rs = self.value_reg();
                self.push(IrInstr::Store(rp, rs));
            }
            Kind::Branch => {
                let rs = self.value_reg();
                let l = self.any_label(0.2);
                self.push(IrInstr::Bnz(rs, l));
            }
            Kind::Jump => {
                let rt = self.pointer_reg();
                let l = self.forward_label();
                self.push(IrInstr::Const(IrConstant::Code(l), rt));
                self.push(IrInstr::Jump(rt));
            }
            Kind::Jal => {
                let l = self.forward_label();
                self.push(IrInstr::Jal(l));
            }
            Kind::Call => {
                let arg = self.rng.gen_bool(0.5).then(|| small_or_random(self.cfg, self.rng));
                self.call(arg);
            }
            Kind::Ret => self.push(IrInstr::Return),
            Kind::Halt => self.push(IrInstr::Halt),
        }
    }

    fn wild_constant(&mut self) -> IrConstant {
        let n = self.n_components;
        match self.rng.gen_range(0..20) {
            0..=5 => IrConstant::Word(self.rng.gen_range(0..16)),
            6..=8 => IrConstant::Word(self.rng.gen::<u64>() & self.cfg.bits.word_mask()),
            9..=12 => IrConstant::Word(wild_data_address(self.cfg, self.rng, n)),
            13..=16 => IrConstant::Word(wild_code_address(self.cfg, self.rng, n)),
            17..=18 => {
                let (b, size) = self.block();
                IrConstant::Ptr(b, self.rng.gen_range(-2..size as i64 + 2))
            }
            _ => IrConstant::Code(self.any_label(0.5)),
        }
    }

    fn wild(&mut self, kind: Kind) {
        let n = self.n_components;
        match kind {
            Kind::Nop => self.push(IrInstr::Nop),
            Kind::Const => {
                let k = self.wild_constant();
                let rd = self.any_reg();
                self.push(IrInstr::Const(k, rd));
            }
            Kind::Mov => {
                let (rs, rd) = (self.any_reg(), self.any_reg());
                self.push(IrInstr::Mov(rs, rd));
            }
            Kind::BinOp => {
                let (op, a, b, rd) = (self.binop(), self.any_reg(), self.any_reg(), self.any_reg());
                self.push(IrInstr::BinOp(op, a, b, rd));
            }
            Kind::Load => {
                if self.rng.gen_bool(0.5) {
                    let (rp, rd) = (self.any_reg(), self.any_reg());
                    self.push(IrInstr::Load(rp, rd));
                    return;
                }
                // Read a word from own memory and use it as an address.
                let (rp, rx) = (self.any_reg(), self.any_reg());
                self.pointer_into(rp);
                self.push(IrInstr::Load(rp, rx));
                match self.rng.gen_range(0..3) {
                    0 => self.push(IrInstr::Jump(rx)),
                    1 => {
                        let rs = self.any_reg();
                        self.push(IrInstr::Store(rx, rs));
                    }
                    _ => {}
                }
            }
            Kind::Store => match self.rng.gen_range(0..10) {
                0..=4 => {
                    let (rp, rs) = (self.any_reg(), self.any_reg());
                    self.push(IrInstr::Store(rp, rs));
                }
                5..=7 => {
                    let (rp, rs) = (self.any_reg(), self.any_reg());
                    let a = wild_data_address(self.cfg, self.rng, n);
                    self.push(IrInstr::Const(IrConstant::Word(a), rp));
                    self.push(IrInstr::Store(rp, rs));
                }
                _ => {
                    // Stash a code address in memory for a later load-and-jump.
                    let ra = self.any_reg();
                    let l = self.any_label(0.5);
                    self.push(IrInstr::Const(IrConstant::Code(l), ra));
                    let rp = loop {
                        let r = self.any_reg();
                        if r != ra {
                            break r;
                        }
                    };
                    self.pointer_into(rp);
                    self.push(IrInstr::Store(rp, ra));
                }
            },
            Kind::Branch => {
                let rs = self.any_reg();
                let l = self.any_label(0.4);
                self.push(IrInstr::Bnz(rs, l));
            }
            Kind::Jump => {
                let rt = self.any_reg();
                match self.rng.gen_range(0..10) {
                    0..=4 => {
                        let a = wild_code_address(self.cfg, self.rng, n);
                        self.push(IrInstr::Const(IrConstant::Word(a), rt));
                    }
                    5..=6 => {
                        let l = self.any_label(0.5);
                        self.push(IrInstr::Const(IrConstant::Code(l), rt));
                    }
                    _ => {}
                }
                self.push(IrInstr::Jump(rt));
            }
            Kind::Jal => {
                let l = self.any_label(0.4);
                self.push(IrInstr::Jal(l));
            }
            Kind::Call => {
                let arg = self.rng.gen_bool(0.5).then(|| self.rng.gen_range(0..16));
                self.call(arg);
            }
            Kind::Ret => self.push(IrInstr::Return),
            Kind::Halt => self.push(IrInstr::Halt),
        }
    }
}
