//! Random program generation, the generate/compile/run/check pipeline,
//! attack injection and shrinking of failing programs.

mod gen;
mod pipeline;
mod shrink;
mod trace;

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Mutation;
use crate::isa::BitConfig;

pub use gen::gen_program;
pub use pipeline::{
    inject_attack, run_case, run_pipeline, test_seed, CaseOutcome, FailingCase, FailureKind, FuzzOptions, FuzzReport,
    StatusCounts, ViolationCounts,
};
pub use shrink::{shrink, shrink_with, ShrinkError};
pub use trace::derive_trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// UB-free programs, checked for trace agreement with the interpreter.
    WellBehaved,
    /// Arbitrary address arithmetic for stores, loads and jumps.
    Wild,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::WellBehaved => "wellbehaved",
            Mode::Wild => "wild",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "wellbehaved" | "well-behaved" => Ok(Mode::WellBehaved),
            "wild" => Ok(Mode::Wild),
            _ => Err(format!("unknown mode `{s}` (expected wellbehaved or wild)")),
        }
    }
}

/// Relative frequencies of generated instruction kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub nop: f64,
    pub constant: f64,
    pub mov: f64,
    pub binop: f64,
    pub load: f64,
    pub store: f64,
    pub branch: f64,
    pub jump: f64,
    pub jal: f64,
    pub call: f64,
    pub ret: f64,
    pub halt: f64,
}

impl Default for Weights {
    /// Uniform, with calls and stores doubled.
    fn default() -> Self {
        Weights {
            nop: 1.0,
            constant: 1.0,
            mov: 1.0,
            binop: 1.0,
            load: 1.0,
            store: 2.0,
            branch: 1.0,
            jump: 1.0,
            jal: 1.0,
            call: 2.0,
            ret: 1.0,
            halt: 1.0,
        }
    }
}

impl Weights {
    pub(crate) fn as_array(&self) -> [f64; 12] {
        [
            self.nop,
            self.constant,
            self.mov,
            self.binop,
            self.load,
            self.store,
            self.branch,
            self.jump,
            self.jal,
            self.call,
            self.ret,
            self.halt,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Master seed; test `i` uses [`test_seed`]`(seed, i)`.
    pub seed: u64,
    pub mode: Mode,
    pub components: RangeInclusive<u32>,
    pub procedures: RangeInclusive<u32>,
    pub instructions: RangeInclusive<u32>,
    pub blocks: RangeInclusive<u32>,
    pub fuel: u64,
    pub weights: Weights,
    pub bits: BitConfig,
    /// Compiler fault to seed; `None` for the real compiler.
    pub mutation: Option<Mutation>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            mode: Mode::Wild,
            components: 2..=4,
            procedures: 1..=3,
            instructions: 5..=40,
            blocks: 1..=3,
            fuel: 10_000,
            weights: Weights::default(),
            bits: BitConfig::default(),
            mutation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid generator configuration: {0}")]
pub struct GenConfigError(pub String);

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenConfigError> {
        let err = |m: &str| Err(GenConfigError(m.into()));
        if self.bits.validate().is_err() {
            return err("bit configuration is invalid");
        }
        for (name, r) in [
            ("components", &self.components),
            ("procedures", &self.procedures),
            ("instructions", &self.instructions),
            ("blocks", &self.blocks),
        ] {
            if r.is_empty() {
                return Err(GenConfigError(format!("{name} range is empty")));
            }
        }
        if *self.components.start() < 1 {
            return err("at least one component is required");
        }
        if u64::from(*self.components.end()) >= self.bits.component_count() {
            return err("more components than the component field can hold");
        }
        if *self.procedures.start() < 1 {
            return err("every component needs a procedure");
        }
        if *self.blocks.start() < 1 {
            return err("every component needs a data block");
        }
        if self.fuel == 0 {
            return err("fuel must be at least 1");
        }
        let w = self.weights.as_array();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return err("weights must be nonnegative with a positive sum");
        }
        Ok(())
    }
}
