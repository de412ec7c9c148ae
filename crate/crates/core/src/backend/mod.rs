//! Compiler pass from validated IR to a laid-out machine object.
//!
//! Every component gets its own code (even) and data (odd) slots. Stores and
//! computed jumps are sandboxed with an AND/OR pair through the scratch
//! register. Cross-component control flow goes through trusted sequences
//! that push and pop return addresses on the protected stack, which lives in
//! the runtime's data slot (component 0, slot 1).

mod lower;
mod verify;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{validate, BlockId, ComponentId, IrProgram, ProcId, WellFormednessError};
use crate::isa::{Address, BitConfig, Decoded, Instruction, IsaError, Register, Word};

pub use lower::{entry_sequence, post_call_restore, return_sequence, startup_sequence};
pub use verify::{verify_object, StaticViolation};

/// Seeded compiler faults used to show that the checkers can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    /// One component bit of the data mask is left set.
    WrongStoreMask,
    /// Store sequences lose their OR with the data tag.
    MissingStoreOr,
    /// Entry points start on a bundle boundary, with no guard before them.
    AlignedEntry,
    /// The word before each entry point is a Nop instead of Halt.
    MissingHaltGuard,
    /// Call sites do not reinstall the caller's tags.
    SkipTagRestore,
    /// Return sequences read the stack without decrementing it.
    CorruptPop,
}

impl Mutation {
    pub const ALL: [Mutation; 6] = [
        Mutation::WrongStoreMask,
        Mutation::MissingStoreOr,
        Mutation::AlignedEntry,
        Mutation::MissingHaltGuard,
        Mutation::SkipTagRestore,
        Mutation::CorruptPop,
    ];
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error("program is not well formed: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<WellFormednessError>),
    #[error("component {0} does not fit in the component field")]
    TooManyComponents(ComponentId),
    #[error("layout overflow: {0}")]
    LayoutOverflow(String),
    #[error("bundles of {0} words cannot hold the trusted sequences")]
    BundleTooSmall(u64),
    #[error(transparent)]
    Isa(#[from] IsaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RangeKind {
    EntryPush,
    ReturnPop,
    PostCallRestore,
    Startup,
}

/// Half-open address range `[begin, end)` of a trusted sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustedRange {
    pub begin: Address,
    pub end: Address,
    pub kind: RangeKind,
}

impl TrustedRange {
    pub fn contains(&self, a: Address) -> bool {
        self.begin <= a && a < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPlacement {
    pub slot: u64,
    pub base: Address,
    pub size: u64,
}

/// Half-open code range of one procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeRange {
    pub begin: Address,
    pub end: Address,
}

impl CodeRange {
    pub fn contains(&self, a: Address) -> bool {
        self.begin <= a && a < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterConventions {
    pub link: u8,
    pub scratch: u8,
    pub mask_data: u8,
    pub mask_code: u8,
    pub tag_data: u8,
    pub tag_code: u8,
    pub protected_sp: u8,
    pub argument: u8,
}

impl Default for RegisterConventions {
    fn default() -> Self {
        RegisterConventions {
            link: Register::RA.index() as u8,
            scratch: Register::SFI.index() as u8,
            mask_data: Register::MASK_DATA.index() as u8,
            mask_code: Register::MASK_CODE.index() as u8,
            tag_data: Register::TAG_DATA.index() as u8,
            tag_code: Register::TAG_CODE.index() as u8,
            protected_sp: Register::SP_PROT.index() as u8,
            argument: crate::ir::ARG_REGISTER as u8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutMeta {
    pub cfg: BitConfig,
    pub main: (ComponentId, ProcId),
    pub entry_points: BTreeMap<(ComponentId, ProcId), Address>,
    /// Sorted by `begin`.
    pub trusted_ranges: Vec<TrustedRange>,
    pub block_map: BTreeMap<(ComponentId, BlockId), BlockPlacement>,
    pub procedures: BTreeMap<(ComponentId, ProcId), CodeRange>,
    /// Laid-out length of every code slot.
    pub code_extents: BTreeMap<(ComponentId, u64), u64>,
    pub imports: BTreeMap<ComponentId, BTreeSet<(ComponentId, ProcId)>>,
    pub registers: RegisterConventions,
    pub startup: Address,
    pub protected_stack_base: Address,
    pub halt_anchor: Address,
    /// Value returned by loads from addresses nothing was written to.
    pub unmapped_load_value: Word,
}

impl LayoutMeta {
    pub fn main_entry(&self) -> Option<Address> {
        self.entry_points.get(&self.main).copied()
    }

    pub fn decode(&self, a: Address) -> Decoded {
        self.cfg.decode(a)
    }

    pub fn trusted_range_at(&self, a: Address) -> Option<&TrustedRange> {
        let idx = self.trusted_ranges.partition_point(|r| r.begin <= a);
        idx.checked_sub(1)
            .map(|i| &self.trusted_ranges[i])
            .filter(|r| r.contains(a))
    }

    pub fn is_code(&self, a: Address) -> bool {
        let d = self.cfg.decode(a);
        d.is_code()
            && self
                .code_extents
                .get(&(d.component, d.slot))
                .is_some_and(|&len| d.offset < len)
    }

    pub fn entry_index(&self) -> HashMap<Address, (ComponentId, ProcId)> {
        self.entry_points.iter().map(|(&k, &a)| (a, k)).collect()
    }

    pub fn procedure_at(&self, a: Address) -> Option<(ComponentId, ProcId)> {
        self.procedures.iter().find(|(_, r)| r.contains(a)).map(|(&k, _)| k)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineObject {
    pub cfg: BitConfig,
    pub code: BTreeMap<(ComponentId, u64), Vec<Instruction>>,
    pub data_init: BTreeMap<(ComponentId, u64), Vec<Word>>,
    pub meta: LayoutMeta,
}

impl MachineObject {
    pub fn fetch(&self, pc: Address) -> Option<Instruction> {
        let d = self.cfg.decode(pc);
        if !d.is_code() {
            return None;
        }
        self.code.get(&(d.component, d.slot))?.get(d.offset as usize).copied()
    }
}

pub fn compile(program: &IrProgram, cfg: BitConfig) -> Result<MachineObject, CompileError> {
    compile_with(program, cfg, None)
}

/// Compiles with an optional seeded fault. Only the fuzz harness and tests
/// pass a mutation.
pub fn compile_with(
    program: &IrProgram,
    cfg: BitConfig,
    mutation: Option<Mutation>,
) -> Result<MachineObject, CompileError> {
    cfg.validate()?;
    let errs = validate(program);
    if !errs.is_empty() {
        return Err(CompileError::Invalid(errs));
    }
    if let Some(c) = program
        .components
        .iter()
        .map(|c| c.id)
        .find(|c| u64::from(c.0) >= cfg.component_count())
    {
        return Err(CompileError::TooManyComponents(c));
    }
    if cfg.bundle_size() < lower::MIN_BUNDLE {
        return Err(CompileError::BundleTooSmall(cfg.bundle_size()));
    }
    lower::Compiler::new(program, cfg, mutation).run()
}
