//! Greedy reduction of failing programs.

use thiserror::Error;

use super::{run_case, FailureKind, GenConfig};
use crate::ir::{validate, IrConstant, IrInstr, IrProgram};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShrinkError {
    #[error("the program does not fail")]
    NotFailing,
    #[error("the program is not well formed")]
    Invalid,
}

/// Shrinks a program whose pipeline run fails, preserving its first
/// failure kind.
pub fn shrink(program: &IrProgram, cfg: &GenConfig) -> Result<IrProgram, ShrinkError> {
    if !validate(program).is_empty() {
        return Err(ShrinkError::Invalid);
    }
    let base = run_case(program, cfg);
    // A dynamic failure says more than the static self-check does.
    let &kind = base
        .failures
        .iter()
        .find(|&&k| k != FailureKind::SelfCheck)
        .or(base.failures.first())
        .ok_or(ShrinkError::NotFailing)?;
    shrink_with(program, |p| run_case(p, cfg).failures.contains(&kind))
}

/// Shrinks `program` while `fails` holds. Every candidate tried is well
/// formed; the result is returned unchanged when nothing can be removed.
pub fn shrink_with(program: &IrProgram, fails: impl Fn(&IrProgram) -> bool) -> Result<IrProgram, ShrinkError> {
    if !validate(program).is_empty() {
        return Err(ShrinkError::Invalid);
    }
    if !fails(program) {
        return Err(ShrinkError::NotFailing);
    }
    let accept = |p: &IrProgram| validate(p).is_empty() && fails(p);
    let mut cur = program.clone();
    loop {
        let mut progress = false;
        progress |= drop_components(&mut cur, &accept);
        progress |= drop_procedures(&mut cur, &accept);
        progress |= drop_instructions(&mut cur, &accept);
        progress |= drop_interface(&mut cur, &accept);
        progress |= shrink_constants(&mut cur, &accept);
        if !progress {
            return Ok(cur);
        }
    }
}

fn try_replace(cur: &mut IrProgram, cand: IrProgram, accept: &impl Fn(&IrProgram) -> bool) -> bool {
    if cand != *cur && accept(&cand) {
        *cur = cand;
        true
    } else {
        false
    }
}

fn without_calls(p: &mut IrProgram, dead: impl Fn(&IrInstr) -> bool) {
    for comp in &mut p.components {
        for body in comp.procedures.values_mut() {
            body.retain(|i| !dead(i));
        }
    }
}

fn drop_components(cur: &mut IrProgram, accept: &impl Fn(&IrProgram) -> bool) -> bool {
    let mut progress = false;
    let ids: Vec<_> = cur
        .components
        .iter()
        .map(|c| c.id)
        .filter(|&c| c != cur.main.0)
        .collect();
    for id in ids {
        let mut cand = cur.clone();
        cand.components.retain(|c| c.id != id);
        for comp in &mut cand.components {
            comp.imports.retain(|&(c, _)| c != id);
        }
        without_calls(&mut cand, |i| matches!(i, IrInstr::Call(c, _) if *c == id));
        progress |= try_replace(cur, cand, accept);
    }
    progress
}

fn drop_procedures(cur: &mut IrProgram, accept: &impl Fn(&IrProgram) -> bool) -> bool {
    let mut progress = false;
    let procs: Vec<_> = cur
        .components
        .iter()
        .flat_map(|c| c.procedures.keys().map(move |&p| (c.id, p)))
        .filter(|&k| k != cur.main)
        .collect();
    for (c, p) in procs {
        let mut cand = cur.clone();
        for comp in &mut cand.components {
            if comp.id == c {
                comp.procedures.remove(&p);
                comp.exports.remove(&p);
            }
            comp.imports.remove(&(c, p));
        }
        without_calls(&mut cand, |i| *i == IrInstr::Call(c, p));
        progress |= try_replace(cur, cand, accept);
    }
    progress
}

fn drop_instructions(cur: &mut IrProgram, accept: &impl Fn(&IrProgram) -> bool) -> bool {
    let mut progress = false;
    for ci in 0..cur.components.len() {
        let procs: Vec<_> = cur.components[ci].procedures.keys().copied().collect();
        for p in procs {
            let mut chunk = cur.components[ci].procedures[&p].len().div_ceil(2).max(1);
            loop {
                let mut i = 0;
                while i < cur.components[ci].procedures[&p].len() {
                    let mut cand = cur.clone();
                    let body = cand.components[ci].procedures.get_mut(&p).expect("present");
                    let end = (i + chunk).min(body.len());
                    body.drain(i..end);
                    if try_replace(cur, cand, accept) {
                        progress = true;
                    } else {
                        i += chunk;
                    }
                }
                if chunk == 1 {
                    break;
                }
                chunk = chunk.div_ceil(2);
            }
        }
    }
    progress
}

fn drop_interface(cur: &mut IrProgram, accept: &impl Fn(&IrProgram) -> bool) -> bool {
    let mut progress = false;
    for ci in 0..cur.components.len() {
        let imports: Vec<_> = cur.components[ci].imports.iter().copied().collect();
        for k in imports {
            let mut cand = cur.clone();
            cand.components[ci].imports.remove(&k);
            progress |= try_replace(cur, cand, accept);
        }
        let blocks: Vec<_> = cur.components[ci].blocks.keys().copied().collect();
        for b in blocks {
            let mut cand = cur.clone();
            cand.components[ci].blocks.remove(&b);
            progress |= try_replace(cur, cand, accept);
        }
    }
    progress
}

fn shrink_constants(cur: &mut IrProgram, accept: &impl Fn(&IrProgram) -> bool) -> bool {
    let mut progress = false;
    for ci in 0..cur.components.len() {
        let procs: Vec<_> = cur.components[ci].procedures.keys().copied().collect();
        for p in procs {
            for i in 0..cur.components[ci].procedures[&p].len() {
                let IrInstr::Const(IrConstant::Word(w), rd) = cur.components[ci].procedures[&p][i] else {
                    continue;
                };
                for smaller in [0, w / 2] {
                    if smaller == w {
                        continue;
                    }
                    let mut cand = cur.clone();
                    cand.components[ci].procedures.get_mut(&p).expect("present")[i] =
                        IrInstr::Const(IrConstant::Word(smaller), rd);
                    if try_replace(cur, cand, accept) {
                        progress = true;
                        break;
                    }
                }
            }
        }
    }
    progress
}
