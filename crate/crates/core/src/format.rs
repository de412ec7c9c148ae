//! Versioned on-disk formats: machine objects (JSON), execution logs
//! (JSON lines, one event per line after a header) and fuzz reports (JSON).
//! Output is canonical: fixed field order, addresses in hex.

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BlockPlacement, CodeRange, LayoutMeta, MachineObject, RegisterConventions, TrustedRange};
use crate::fuzz::FuzzReport;
use crate::ir::{BlockId, ComponentId, ProcId};
use crate::isa::{Address, BitConfig, Instruction, Word};
use crate::machine::{LogEvent, RunStatus};

pub const OBJECT_FORMAT: &str = "sfi-object";
pub const LOG_FORMAT: &str = "sfi-log";
pub const REPORT_FORMAT: &str = "sfi-report";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("expected a `{expected}` document, found `{found}`")]
    WrongFormat { expected: String, found: String },
    #[error("`{format}` version {found} is not supported (this build reads version {supported})")]
    UnsupportedVersion { format: String, found: u64, supported: u32 },
    #[error("inconsistent document: {0}")]
    Invalid(String),
}

fn syntax(e: serde_json::Error, line_offset: usize) -> FormatError {
    FormatError::Syntax {
        line: e.line().max(1) + line_offset,
        message: e.to_string(),
    }
}

/// Checks the `format` and `version` fields of a parsed header.
fn check_header(v: &serde_json::Value, expected: &str) -> Result<(), FormatError> {
    let found = v.get("format").and_then(|f| f.as_str()).unwrap_or("");
    if found != expected {
        return Err(FormatError::WrongFormat {
            expected: expected.into(),
            found: found.into(),
        });
    }
    let version = v.get("version").and_then(|x| x.as_u64()).unwrap_or(0);
    if version != u64::from(FORMAT_VERSION) {
        return Err(FormatError::UnsupportedVersion {
            format: expected.into(),
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    Ok(())
}

fn parse_document<T: DeserializeOwned>(text: &str, expected: &str) -> Result<T, FormatError> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| syntax(e, 0))?;
    check_header(&v, expected)?;
    serde_json::from_value(v).map_err(|e| FormatError::Invalid(e.to_string()))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectDoc {
    format: String,
    version: u32,
    cfg: BitConfig,
    code: Vec<CodeSection>,
    data: Vec<DataSection>,
    meta: MetaDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodeSection {
    component: ComponentId,
    slot: u64,
    words: Vec<Instruction>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataSection {
    component: ComponentId,
    slot: u64,
    words: Vec<Word>,
}

#[derive(Serialize, Deserialize, Clone, Copy)]
#[serde(deny_unknown_fields)]
struct ProcRef {
    component: ComponentId,
    procedure: ProcId,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryDoc {
    component: ComponentId,
    procedure: ProcId,
    address: Address,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockDoc {
    component: ComponentId,
    block: BlockId,
    slot: u64,
    base: Address,
    size: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProcRangeDoc {
    component: ComponentId,
    procedure: ProcId,
    begin: Address,
    end: Address,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtentDoc {
    component: ComponentId,
    slot: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImportsDoc {
    component: ComponentId,
    imports: Vec<ProcRef>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaDoc {
    main: ProcRef,
    entry_points: Vec<EntryDoc>,
    trusted_ranges: Vec<TrustedRange>,
    blocks: Vec<BlockDoc>,
    procedures: Vec<ProcRangeDoc>,
    code_extents: Vec<ExtentDoc>,
    imports: Vec<ImportsDoc>,
    registers: RegisterConventions,
    startup: Address,
    protected_stack_base: Address,
    halt_anchor: Address,
    unmapped_load_value: Word,
}

pub fn write_object(obj: &MachineObject) -> String {
    let m = &obj.meta;
    let doc = ObjectDoc {
        format: OBJECT_FORMAT.into(),
        version: FORMAT_VERSION,
        cfg: obj.cfg,
        code: obj
            .code
            .iter()
            .map(|(&(component, slot), words)| CodeSection {
                component,
                slot,
                words: words.clone(),
            })
            .collect(),
        data: obj
            .data_init
            .iter()
            .map(|(&(component, slot), words)| DataSection {
                component,
                slot,
                words: words.clone(),
            })
            .collect(),
        meta: MetaDoc {
            main: ProcRef {
                component: m.main.0,
                procedure: m.main.1,
            },
            entry_points: m
                .entry_points
                .iter()
                .map(|(&(component, procedure), &address)| EntryDoc {
                    component,
                    procedure,
                    address,
                })
                .collect(),
            trusted_ranges: m.trusted_ranges.clone(),
            blocks: m
                .block_map
                .iter()
                .map(|(&(component, block), b)| BlockDoc {
                    component,
                    block,
                    slot: b.slot,
                    base: b.base,
                    size: b.size,
                })
                .collect(),
            procedures: m
                .procedures
                .iter()
                .map(|(&(component, procedure), r)| ProcRangeDoc {
                    component,
                    procedure,
                    begin: r.begin,
                    end: r.end,
                })
                .collect(),
            code_extents: m
                .code_extents
                .iter()
                .map(|(&(component, slot), &length)| ExtentDoc {
                    component,
                    slot,
                    length,
                })
                .collect(),
            imports: m
                .imports
                .iter()
                .map(|(&component, set)| ImportsDoc {
                    component,
                    imports: set
                        .iter()
                        .map(|&(component, procedure)| ProcRef { component, procedure })
                        .collect(),
                })
                .collect(),
            registers: m.registers,
            startup: m.startup,
            protected_stack_base: m.protected_stack_base,
            halt_anchor: m.halt_anchor,
            unmapped_load_value: m.unmapped_load_value,
        },
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("object documents always serialize");
    s.push('\n');
    s
}

pub fn read_object(text: &str) -> Result<MachineObject, FormatError> {
    let doc: ObjectDoc = parse_document(text, OBJECT_FORMAT)?;
    doc.cfg.validate().map_err(|e| FormatError::Invalid(e.to_string()))?;
    let m = doc.meta;
    let mut trusted_ranges = m.trusted_ranges;
    trusted_ranges.sort_by_key(|r| r.begin);
    let code: BTreeMap<_, _> = doc.code.into_iter().map(|c| ((c.component, c.slot), c.words)).collect();
    let code_extents: BTreeMap<_, _> = m
        .code_extents
        .into_iter()
        .map(|e| ((e.component, e.slot), e.length))
        .collect();
    for (k, words) in &code {
        if code_extents.get(k) != Some(&(words.len() as u64)) {
            return Err(FormatError::Invalid(format!(
                "code extent of component {} slot {} does not match its section",
                k.0, k.1
            )));
        }
    }
    let meta = LayoutMeta {
        cfg: doc.cfg,
        main: (m.main.component, m.main.procedure),
        entry_points: m
            .entry_points
            .into_iter()
            .map(|e| ((e.component, e.procedure), e.address))
            .collect(),
        trusted_ranges,
        block_map: m
            .blocks
            .into_iter()
            .map(|b| {
                (
                    (b.component, b.block),
                    BlockPlacement {
                        slot: b.slot,
                        base: b.base,
                        size: b.size,
                    },
                )
            })
            .collect(),
        procedures: m
            .procedures
            .into_iter()
            .map(|p| {
                (
                    (p.component, p.procedure),
                    CodeRange {
                        begin: p.begin,
                        end: p.end,
                    },
                )
            })
            .collect(),
        code_extents,
        imports: m
            .imports
            .into_iter()
            .map(|i| {
                (
                    i.component,
                    i.imports.into_iter().map(|r| (r.component, r.procedure)).collect(),
                )
            })
            .collect(),
        registers: m.registers,
        startup: m.startup,
        protected_stack_base: m.protected_stack_base,
        halt_anchor: m.halt_anchor,
        unmapped_load_value: m.unmapped_load_value,
    };
    Ok(MachineObject {
        cfg: doc.cfg,
        code,
        data_init: doc.data.into_iter().map(|d| ((d.component, d.slot), d.words)).collect(),
        meta,
    })
}

/// How a logged run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoggedStatus {
    Halted,
    OutOfFuel,
    Stuck,
}

impl From<RunStatus> for LoggedStatus {
    fn from(s: RunStatus) -> Self {
        match s {
            RunStatus::Halted => LoggedStatus::Halted,
            RunStatus::OutOfFuel => LoggedStatus::OutOfFuel,
            RunStatus::Stuck { .. } => LoggedStatus::Stuck,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogHeader {
    pub format: String,
    pub version: u32,
    pub status: LoggedStatus,
    pub steps: u64,
}

impl LogHeader {
    pub fn new(status: RunStatus, steps: u64) -> Self {
        LogHeader {
            format: LOG_FORMAT.into(),
            version: FORMAT_VERSION,
            status: status.into(),
            steps,
        }
    }
}

pub fn write_log(header: &LogHeader, events: &[LogEvent]) -> String {
    let mut s = serde_json::to_string(header).expect("log headers always serialize");
    s.push('\n');
    for e in events {
        s += &serde_json::to_string(e).expect("log events always serialize");
        s.push('\n');
    }
    s
}

pub fn read_log(text: &str) -> Result<(LogHeader, Vec<LogEvent>), FormatError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, first)) = lines.next() else {
        return Err(FormatError::Syntax {
            line: 1,
            message: "empty log".into(),
        });
    };
    let v: serde_json::Value = serde_json::from_str(first).map_err(|e| syntax(e, 0))?;
    check_header(&v, LOG_FORMAT)?;
    let header: LogHeader = serde_json::from_value(v).map_err(|e| FormatError::Invalid(e.to_string()))?;
    let events = lines
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| syntax(e, i)))
        .collect::<Result<_, _>>()?;
    Ok((header, events))
}

#[derive(Serialize, Deserialize)]
struct ReportDoc {
    format: String,
    version: u32,
    #[serde(flatten)]
    report: FuzzReport,
}

pub fn write_report(report: &FuzzReport) -> String {
    let doc = ReportDoc {
        format: REPORT_FORMAT.into(),
        version: FORMAT_VERSION,
        report: report.clone(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("reports always serialize");
    s.push('\n');
    s
}

pub fn read_report(text: &str) -> Result<FuzzReport, FormatError> {
    parse_document::<ReportDoc>(text, REPORT_FORMAT).map(|d| d.report)
}
