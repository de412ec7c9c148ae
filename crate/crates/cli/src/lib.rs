//! Command-line driver. [`run`] parses arguments, performs one subcommand and
//! returns the process exit code: 0 when everything passed, 1 when a property
//! failed (ill-formed program, invariant violation, dirty fuzz report) and 2
//! for usage, I/O and format errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sficc_core::backend::{compile, verify_object, CompileError, LayoutMeta, MachineObject, Mutation, RangeKind};
use sficc_core::checkers::{check_jump, check_stack, check_store, CheckError, Verdict};
use sficc_core::format::{read_log, read_object, write_log, write_object, write_report, FormatError, LogHeader};
use sficc_core::fuzz::{derive_trace, inject_attack, run_pipeline, FuzzOptions, FuzzReport, GenConfig, Mode};
use sficc_core::ir::parse_program;
use sficc_core::isa::{Address, BitConfig};
use sficc_core::machine;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "sficc",
    version,
    about = "Compartmentalizing SFI compiler and isolation test harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compile an IR text file to an object file.
    Compile {
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        bits: BitArgs,
    },
    /// Execute an object and write its event log.
    Run {
        object: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        fuel: u64,
        /// Log destination; standard output when omitted.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Check an event log against the isolation invariants.
    Check {
        object: PathBuf,
        log: PathBuf,
        #[arg(long, default_value = "all", value_parser = ["1", "2", "3", "all"])]
        invariant: String,
        /// Print verdicts as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Print the cross-component call/return trace of a log, one event per line.
    Trace { object: PathBuf, log: PathBuf },
    /// Run a differential fuzz campaign.
    Fuzz {
        #[command(flatten)]
        campaign: CampaignArgs,
        /// Shrink the first failing programs and include them in the report.
        #[arg(long)]
        shrink: bool,
    },
    /// Run a campaign that corrupts data memory during execution.
    Attack {
        #[command(flatten)]
        campaign: CampaignArgs,
        #[arg(long, default_value_t = 3)]
        flips: u32,
    },
    /// Pretty-print the code slots of an object.
    Disasm { object: PathBuf },
}

#[derive(Args, Debug)]
struct BitArgs {
    #[arg(long, default_value_t = BitConfig::default().offset_bits)]
    offset_bits: u32,
    #[arg(long, default_value_t = BitConfig::default().component_bits)]
    component_bits: u32,
    #[arg(long, default_value_t = BitConfig::default().bundle_bits)]
    bundle_bits: u32,
    #[arg(long, default_value_t = BitConfig::default().word_bits)]
    word_bits: u32,
}

#[derive(Args, Debug)]
struct CampaignArgs {
    #[arg(long, default_value_t = 100)]
    tests: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = Mode::Wild)]
    mode: Mode,
    #[arg(long, default_value_t = 10_000)]
    fuel: u64,
    /// Index of the first test.
    #[arg(long, default_value_t = 0)]
    start: u64,
    /// Write the full report here; a summary goes to standard output.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Compile with a seeded fault (checker sensitivity testing).
    #[arg(long, value_parser = parse_mutation)]
    mutation: Option<Mutation>,
    #[command(flatten)]
    bits: BitArgs,
}

fn parse_mutation(s: &str) -> Result<Mutation, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| {
        let names: Vec<String> = Mutation::ALL.iter().map(|m| mutation_name(*m)).collect();
        format!("unknown mutation `{s}` (expected one of {})", names.join(", "))
    })
}

fn mutation_name(m: Mutation) -> String {
    serde_json::to_value(m)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

/// Failure of a subcommand, carrying its exit code.
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn property(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_FAIL,
            message: message.into(),
        }
    }
}

type CmdResult = Result<i32, Failure>;

type Checker = fn(&[machine::LogEvent], &LayoutMeta) -> Result<Verdict, CheckError>;

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
        }
    };
    let result = match cli.command {
        Command::Compile { input, out, bits } => cmd_compile(&input, &out, &bits),
        Command::Run { object, fuel, out } => cmd_run(&object, fuel, out.as_deref()),
        Command::Check {
            object,
            log,
            invariant,
            json,
        } => cmd_check(&object, &log, &invariant, json),
        Command::Trace { object, log } => cmd_trace(&object, &log),
        Command::Fuzz { campaign, shrink } => cmd_campaign(&campaign, None, shrink),
        Command::Attack { campaign, flips } => cmd_campaign(&campaign, Some(flips), false),
        Command::Disasm { object } => cmd_disasm(&object),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("sficc: {}", f.message);
            f.code
        }
    }
}

fn read_file(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn format_error(path: &Path, e: FormatError) -> Failure {
    Failure::usage(format!("{}: {e}", path.display()))
}

fn load_object(path: &Path) -> Result<MachineObject, Failure> {
    read_object(&read_file(path)?).map_err(|e| format_error(path, e))
}

fn load_log(path: &Path) -> Result<(LogHeader, Vec<machine::LogEvent>), Failure> {
    read_log(&read_file(path)?).map_err(|e| format_error(path, e))
}

fn bit_config(b: &BitArgs) -> Result<BitConfig, Failure> {
    BitConfig::new(b.offset_bits, b.component_bits, b.bundle_bits, b.word_bits)
        .map_err(|e| Failure::usage(e.to_string()))
}

fn cmd_compile(input: &Path, out: &Path, bits: &BitArgs) -> CmdResult {
    let cfg = bit_config(bits)?;
    let program = parse_program(&read_file(input)?).map_err(|e| Failure::usage(format!("{}: {e}", input.display())))?;
    let obj = match compile(&program, cfg) {
        Ok(obj) => obj,
        Err(CompileError::Invalid(errs)) => {
            let mut msg = format!("{}: program is not well formed", input.display());
            for e in &errs {
                let _ = write!(msg, "\n  {e}");
            }
            return Err(Failure::property(msg));
        }
        Err(e) => return Err(Failure::usage(format!("{}: {e}", input.display()))),
    };
    let bad = verify_object(&obj);
    if !bad.is_empty() {
        let mut msg = String::from("compiled object failed the static self-check");
        for v in &bad {
            let _ = write!(msg, "\n  {v}");
        }
        return Err(Failure::property(msg));
    }
    write_file(out, &write_object(&obj))?;
    Ok(EXIT_PASS)
}

fn cmd_run(object: &Path, fuel: u64, out: Option<&Path>) -> CmdResult {
    let obj = load_object(object)?;
    let outcome = machine::run(&obj, fuel).map_err(|e| Failure::usage(e.to_string()))?;
    let text = write_log(&LogHeader::new(outcome.status, outcome.final_state.steps), &outcome.log);
    match out {
        Some(path) => write_file(path, &text)?,
        None => print!("{text}"),
    }
    eprintln!(
        "{:?} after {} steps, {} events",
        outcome.status,
        outcome.final_state.steps,
        outcome.log.len()
    );
    Ok(EXIT_PASS)
}

fn cmd_check(object: &Path, log: &Path, invariant: &str, json: bool) -> CmdResult {
    let obj = load_object(object)?;
    let (_, events) = load_log(log)?;
    let meta = &obj.meta;
    let checkers: Vec<Checker> = match invariant {
        "1" => vec![check_store],
        "2" => vec![check_jump],
        "3" => vec![check_stack],
        _ => vec![check_store, check_jump, check_stack],
    };
    let verdicts = checkers
        .into_iter()
        .map(|c| c(&events, meta))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::usage(format!("{}: {e}", log.display())))?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&verdicts).expect("verdicts always serialize")
        );
    } else {
        for v in &verdicts {
            let state = if v.pass() { "pass" } else { "FAIL" };
            println!(
                "invariant {}: {state} ({} events checked, {} violations)",
                v.invariant,
                v.events_checked,
                v.violations.len()
            );
            for x in &v.violations {
                let pc = x.pc.map_or_else(|| "-".to_owned(), |a| a.to_string());
                println!("  event {} step {} pc {pc}: {}", x.event_index, x.step, x.detail);
            }
        }
    }
    Ok(if verdicts.iter().all(Verdict::pass) {
        EXIT_PASS
    } else {
        EXIT_FAIL
    })
}

fn cmd_trace(object: &Path, log: &Path) -> CmdResult {
    let obj = load_object(object)?;
    let (_, events) = load_log(log)?;
    let trace = derive_trace(&events, &obj.meta).map_err(|e| Failure::usage(format!("{}: {e}", log.display())))?;
    let mut out = String::new();
    for ev in &trace {
        out += &serde_json::to_string(ev).expect("trace events always serialize");
        out.push('\n');
    }
    print!("{out}");
    Ok(EXIT_PASS)
}

fn cmd_campaign(args: &CampaignArgs, flips: Option<u32>, shrink: bool) -> CmdResult {
    let cfg = GenConfig {
        seed: args.seed,
        mode: args.mode,
        fuel: args.fuel,
        bits: bit_config(&args.bits)?,
        mutation: args.mutation,
        ..GenConfig::default()
    };
    let opts = FuzzOptions {
        tests: args.tests,
        start: args.start,
        shrink,
    };
    let report = match flips {
        None => run_pipeline(&cfg, &opts),
        Some(f) => inject_attack(&cfg, f, &opts),
    }
    .map_err(|e| Failure::usage(e.to_string()))?;
    let text = write_report(&report);
    match &args.report {
        Some(path) => {
            write_file(path, &text)?;
            print!("{}", summary(&report));
        }
        None => print!("{text}"),
    }
    let _ = std::io::stdout().flush();
    Ok(if report.clean() { EXIT_PASS } else { EXIT_FAIL })
}

fn summary(r: &FuzzReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} tests ({} mode, seed {}): {} failing, {} discarded",
        r.tests_run, r.mode, r.seed, r.failing_tests, r.discards
    );
    let _ = writeln!(
        s,
        "violations: store {} jump {} stack {}; trace mismatches {}; self-check failures {}",
        r.violations.store, r.violations.jump, r.violations.stack, r.trace_mismatches, r.self_check_failures
    );
    let _ = writeln!(
        s,
        "runs: {} halted, {} out of fuel, {} stuck",
        r.statuses.halted, r.statuses.out_of_fuel, r.statuses.stuck
    );
    for f in &r.failures {
        let _ = writeln!(s, "  {}", f.repro);
    }
    s
}

fn range_name(k: RangeKind) -> &'static str {
    match k {
        RangeKind::EntryPush => "entry-push",
        RangeKind::ReturnPop => "return-pop",
        RangeKind::PostCallRestore => "post-call-restore",
        RangeKind::Startup => "startup",
    }
}

fn cmd_disasm(object: &Path) -> CmdResult {
    let obj = load_object(object)?;
    let cfg = obj.cfg;
    let meta = &obj.meta;
    let entries = meta.entry_index();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "; offset {} bits, component {} bits, bundle {} bits, word {} bits",
        cfg.offset_bits, cfg.component_bits, cfg.bundle_bits, cfg.word_bits
    );
    for (&(component, slot), words) in &obj.code {
        let base = cfg
            .encode(component, slot, 0)
            .map_err(|e| Failure::usage(e.to_string()))?;
        let _ = writeln!(out, "\ncomponent {component} slot {slot} ({} words)", words.len());
        for (i, ins) in words.iter().enumerate() {
            let at = Address(base.0 + i as u64);
            if cfg.is_bundle_aligned(at) {
                let _ = writeln!(out, "  ---- bundle {}", cfg.bundle_of(at));
            }
            let mut notes = Vec::new();
            if let Some(&(c, p)) = entries.get(&at) {
                notes.push(format!("entry {c}.{p}"));
            }
            if let Some(r) = meta.trusted_range_at(at) {
                if r.begin == at {
                    notes.push(format!("{} begin", range_name(r.kind)));
                } else if r.end == at.next() {
                    notes.push(format!("{} end", range_name(r.kind)));
                }
            }
            if at == meta.halt_anchor {
                notes.push("halt anchor".into());
            }
            let trusted = if meta.trusted_range_at(at).is_some() { '*' } else { ' ' };
            let line = format!("  {at:>10} {trusted} {ins}");
            if notes.is_empty() {
                let _ = writeln!(out, "{line}");
            } else {
                let _ = writeln!(out, "{line:<48} ; {}", notes.join(", "));
            }
        }
    }
    print!("{out}");
    Ok(EXIT_PASS)
}
