//! Line-oriented textual IR.
//!
//! ```text
//! sfi-ir 1
//! main 1.0
//! component 1 {
//!   export 0
//!   import 2.0
//!   block 0 size 4 = 1 2 3 4
//!   proc 0 {
//!     const 42 -> r3
//!     const ptr 0 2 -> r20
//!     const label L1 -> r21
//!     call 2.0
//!   L1:
//!     return
//!   }
//! }
//! ```
//!
//! One item per line, `#` starts a comment. Other instructions:
//! `nop`, `mov rS -> rD`, `add rA, rB -> rD` (also `sub mul eq leq and or
//! shl`), `load [rP] -> rD`, `store rS -> [rP]`, `bnz rS, L`, `jump rT`,
//! `jal L`, `return`, `halt`.

use std::fmt::Write as _;

use thiserror::Error;

use super::{BlockId, ComponentId, DataBlock, IrComponent, IrConstant, IrInstr, IrProgram, Label, ProcId};
use crate::isa::{parse_word, BinOp, Register};

pub const IR_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

pub fn print_program(p: &IrProgram) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "sfi-ir {IR_FORMAT_VERSION}");
    let _ = writeln!(out, "main {}.{}", p.main.0, p.main.1);
    for c in &p.components {
        let _ = writeln!(out, "component {} {{", c.id);
        for e in &c.exports {
            let _ = writeln!(out, "  export {e}");
        }
        for (ic, ip) in &c.imports {
            let _ = writeln!(out, "  import {ic}.{ip}");
        }
        for (b, block) in &c.blocks {
            let _ = write!(out, "  block {b} size {}", block.size);
            if !block.init.is_empty() {
                out.push_str(" =");
                for w in &block.init {
                    let _ = write!(out, " {w}");
                }
            }
            out.push('\n');
        }
        for (pid, body) in &c.procedures {
            let _ = writeln!(out, "  proc {pid} {{");
            for ins in body {
                match ins {
                    IrInstr::Label(l) => {
                        let _ = writeln!(out, "  {l}:");
                    }
                    _ => {
                        let _ = writeln!(out, "    {}", instr_text(ins));
                    }
                }
            }
            out.push_str("  }\n");
        }
        out.push_str("}\n");
    }
    out
}

pub fn instr_text(ins: &IrInstr) -> String {
    match *ins {
        IrInstr::Nop => "nop".into(),
        IrInstr::Const(IrConstant::Word(w), rd) => format!("const {w} -> {rd}"),
        IrInstr::Const(IrConstant::Ptr(b, off), rd) => format!("const ptr {b} {off} -> {rd}"),
        IrInstr::Const(IrConstant::Code(l), rd) => format!("const label {l} -> {rd}"),
        IrInstr::Mov(rs, rd) => format!("mov {rs} -> {rd}"),
        IrInstr::BinOp(op, a, b, rd) => format!("{} {a}, {b} -> {rd}", op.mnemonic()),
        IrInstr::Load(rp, rd) => format!("load [{rp}] -> {rd}"),
        IrInstr::Store(rp, rs) => format!("store {rs} -> [{rp}]"),
        IrInstr::Bnz(rs, l) => format!("bnz {rs}, {l}"),
        IrInstr::Jump(rt) => format!("jump {rt}"),
        IrInstr::Jal(l) => format!("jal {l}"),
        IrInstr::Call(c, p) => format!("call {c}.{p}"),
        IrInstr::Return => "return".into(),
        IrInstr::Halt => "halt".into(),
        IrInstr::Label(l) => format!("{l}:"),
    }
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    /// Next non-empty line, tokenized.
    fn next(&mut self) -> Option<Vec<&'a str>> {
        for (i, raw) in self.iter.by_ref() {
            self.line = i + 1;
            let text = raw.split('#').next().unwrap_or("");
            let toks: Vec<&str> = text
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|t| !t.is_empty())
                .collect();
            if !toks.is_empty() {
                return Some(toks);
            }
        }
        None
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError {
            line: self.line,
            message: message.into(),
        }
    }
}

fn num<T: TryFrom<u64>>(s: &str, lines: &Lines) -> Result<T, ParseError> {
    parse_word(s)
        .and_then(|w| T::try_from(w).ok())
        .ok_or_else(|| lines.err(format!("expected a number, found `{s}`")))
}

fn qualified(s: &str, lines: &Lines) -> Result<(ComponentId, ProcId), ParseError> {
    let (c, p) = s
        .split_once('.')
        .ok_or_else(|| lines.err(format!("expected component.procedure, found `{s}`")))?;
    Ok((ComponentId(num(c, lines)?), ProcId(num(p, lines)?)))
}

fn label(s: &str, lines: &Lines) -> Result<Label, ParseError> {
    s.strip_prefix('L')
        .and_then(|n| n.parse().ok())
        .map(Label)
        .ok_or_else(|| lines.err(format!("expected a label, found `{s}`")))
}

fn reg(s: &str, lines: &Lines) -> Result<Register, ParseError> {
    s.parse().map_err(|e| lines.err(format!("{e}")))
}

fn mem(s: &str, lines: &Lines) -> Result<Register, ParseError> {
    let inner = s
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| lines.err(format!("expected [register], found `{s}`")))?;
    reg(inner, lines)
}

fn parse_instr(toks: &[&str], lines: &Lines) -> Result<IrInstr, ParseError> {
    let ins = match toks {
        ["nop"] => IrInstr::Nop,
        ["return"] => IrInstr::Return,
        ["halt"] => IrInstr::Halt,
        [l] if l.ends_with(':') => IrInstr::Label(label(l.trim_end_matches(':'), lines)?),
        ["const", "ptr", b, off, "->", rd] => {
            let off: i64 = off.parse().map_err(|_| lines.err(format!("bad offset `{off}`")))?;
            IrInstr::Const(IrConstant::Ptr(BlockId(num(b, lines)?), off), reg(rd, lines)?)
        }
        ["const", "label", l, "->", rd] => IrInstr::Const(IrConstant::Code(label(l, lines)?), reg(rd, lines)?),
        ["const", w, "->", rd] => IrInstr::Const(IrConstant::Word(num(w, lines)?), reg(rd, lines)?),
        ["mov", rs, "->", rd] => IrInstr::Mov(reg(rs, lines)?, reg(rd, lines)?),
        ["load", rp, "->", rd] => IrInstr::Load(mem(rp, lines)?, reg(rd, lines)?),
        ["store", rs, "->", rp] => IrInstr::Store(mem(rp, lines)?, reg(rs, lines)?),
        ["bnz", rs, l] => IrInstr::Bnz(reg(rs, lines)?, label(l, lines)?),
        ["jump", rt] => IrInstr::Jump(reg(rt, lines)?),
        ["jal", l] => IrInstr::Jal(label(l, lines)?),
        ["call", q] => {
            let (c, p) = qualified(q, lines)?;
            IrInstr::Call(c, p)
        }
        [op, a, b, "->", rd] if BinOp::from_mnemonic(op).is_some() => IrInstr::BinOp(
            BinOp::from_mnemonic(op).unwrap(),
            reg(a, lines)?,
            reg(b, lines)?,
            reg(rd, lines)?,
        ),
        _ => return Err(lines.err(format!("unknown instruction `{}`", toks.join(" ")))),
    };
    Ok(ins)
}

pub fn parse_program(src: &str) -> Result<IrProgram, ParseError> {
    let mut lines = Lines {
        iter: src.lines().enumerate(),
        line: 0,
    };
    match lines.next().as_deref() {
        Some(["sfi-ir", v]) => {
            if *v != IR_FORMAT_VERSION.to_string() {
                return Err(lines.err(format!("unsupported IR format version {v}")));
            }
        }
        _ => return Err(lines.err("missing `sfi-ir <version>` header")),
    }
    let main = match lines.next().as_deref() {
        Some(["main", q]) => qualified(q, &lines)?,
        _ => return Err(lines.err("expected `main <component>.<procedure>`")),
    };
    let mut components = Vec::new();
    while let Some(toks) = lines.next() {
        let id = match toks.as_slice() {
            ["component", id, "{"] => ComponentId(num(id, &lines)?),
            _ => return Err(lines.err("expected `component <id> {`")),
        };
        let mut comp = IrComponent::new(id);
        loop {
            let toks = lines.next().ok_or_else(|| lines.err("unterminated component"))?;
            match toks.as_slice() {
                ["}"] => break,
                ["export", p] => {
                    comp.exports.insert(ProcId(num(p, &lines)?));
                }
                ["import", q] => {
                    comp.imports.insert(qualified(q, &lines)?);
                }
                ["block", b, "size", size, rest @ ..] => {
                    let init = match rest {
                        [] => Vec::new(),
                        ["=", words @ ..] => words.iter().map(|w| num(w, &lines)).collect::<Result<_, _>>()?,
                        _ => return Err(lines.err("expected `= <words>` after block size")),
                    };
                    let block = DataBlock {
                        size: num(size, &lines)?,
                        init,
                    };
                    if comp.blocks.insert(BlockId(num(b, &lines)?), block).is_some() {
                        return Err(lines.err(format!("duplicate block {b}")));
                    }
                }
                ["proc", p, "{"] => {
                    let pid = ProcId(num(p, &lines)?);
                    let mut body = Vec::new();
                    loop {
                        let toks = lines.next().ok_or_else(|| lines.err("unterminated procedure"))?;
                        if toks.as_slice() == ["}"] {
                            break;
                        }
                        body.push(parse_instr(&toks, &lines)?);
                    }
                    if comp.procedures.insert(pid, body).is_some() {
                        return Err(lines.err(format!("duplicate procedure {pid}")));
                    }
                }
                _ => return Err(lines.err(format!("unexpected `{}`", toks.join(" ")))),
            }
        }
        components.push(comp);
    }
    Ok(IrProgram { components, main })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
sfi-ir 1
main 1.0
# caller
component 1 {
  export 0
  import 2.0
  block 0 size 4 = 1 2 3 4
  block 1 size 2
  proc 0 {
    const 42 -> r3
    const ptr 0 -1 -> r20
    const label L1 -> r21
    add r1, r2 -> r3
    load [r20] -> r1
    store r1 -> [r20]
    bnz r1, L1
    jump r21
    jal L1
    mov r1 -> r2
    call 2.0
  L1:
    return
  }
}
component 2 {
  export 0
  proc 0 {
    nop
    halt
  }
}
";

    #[test]
    fn sample_parses_and_roundtrips() {
        let p = parse_program(SAMPLE).unwrap();
        assert_eq!(p.components.len(), 2);
        assert_eq!(p.procedure(ComponentId(1), ProcId(0)).unwrap().len(), 13);
        let printed = print_program(&p);
        assert_eq!(parse_program(&printed).unwrap(), p);
        assert_eq!(print_program(&parse_program(&printed).unwrap()), printed);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse_program("sfi-ir 1\nmain 1.0\ncomponent 1 {\n  proc 0 {\n    frob r1\n").unwrap_err();
        assert_eq!(err.line, 5);
        let err = parse_program("sfi-ir 2\n").unwrap_err();
        assert!(err.message.contains("version"));
        let err =
            parse_program("sfi-ir 1\nmain 1.0\ncomponent 1 {\n  proc 0 {\n    const 1 -> r40\n  }\n}\n").unwrap_err();
        assert_eq!(err.line, 5);
    }
}
