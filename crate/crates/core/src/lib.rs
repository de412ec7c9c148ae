//! Compartmentalizing compiler with software fault isolation, a simulator
//! for its target machine, checkers for the three isolation invariants and
//! a differential fuzz harness.

pub mod backend;
pub mod checkers;
pub mod format;
pub mod fuzz;
pub mod ir;
pub mod isa;
pub mod machine;
