use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sficc_core::backend::compile;
use sficc_core::format::{read_log, read_object, read_report, write_log};
use sficc_core::ir::parse_program;
use sficc_core::isa::BitConfig;
use sficc_core::machine::LogEvent;
use tempfile::TempDir;

const NESTED: &str = "\
sfi-ir 1
main 1.0
component 1 {
  export 0
  import 2.0
  block 0 size 2
  proc 0 {
    const 1 -> r3
    call 2.0
    const ptr 0 1 -> r20
    store r3 -> [r20]
    return
  }
}
component 2 {
  export 0
  block 0 size 1
  proc 0 {
    const ptr 0 0 -> r20
    store r3 -> [r20]
    const 5 -> r3
    return
  }
}
";

fn sficc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sficc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Compiles NESTED and runs it, returning (object, log) paths.
fn compiled_and_run(dir: &TempDir) -> (PathBuf, PathBuf) {
    let ir = write(dir, "nested.ir", NESTED);
    let obj = dir.path().join("nested.obj");
    let log = dir.path().join("nested.log");
    assert_eq!(code(&sficc(&["compile", s(&ir), "--out", s(&obj)])), 0);
    let o = sficc(&["run", s(&obj), "--fuel", "1000", "--out", s(&log)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (obj, log)
}

#[test]
fn compile_writes_an_object_that_reads_back_identically() {
    let dir = TempDir::new().unwrap();
    let (obj, _) = compiled_and_run(&dir);
    let from_disk = read_object(&fs::read_to_string(obj).unwrap()).unwrap();
    let direct = compile(&parse_program(NESTED).unwrap(), BitConfig::default()).unwrap();
    assert_eq!(from_disk, direct);
}

#[test]
fn import_violation_exits_one_and_names_the_call_site() {
    let dir = TempDir::new().unwrap();
    let bad = NESTED.replace("  import 2.0\n", "");
    let ir = write(&dir, "bad.ir", &bad);
    let out = dir.path().join("bad.obj");
    let o = sficc(&["compile", s(&ir), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("CallNotImported"), "{err}");
    assert!(err.contains("component 1, procedure 0, instruction 1"), "{err}");
    assert!(!out.exists());
}

#[test]
fn sixteen_components_exit_two() {
    let dir = TempDir::new().unwrap();
    let mut src = String::from("sfi-ir 1\nmain 1.0\n");
    for c in 1..=16 {
        let _ = write!(src, "component {c} {{\n  export 0\n  proc 0 {{\n    return\n  }}\n}}\n");
    }
    let ir = write(&dir, "wide.ir", &src);
    let o = sficc(&["compile", s(&ir), "--out", s(&dir.path().join("w.obj"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("component 16"), "{}", stderr(&o));

    // The same program fits once the component field is wider.
    let o = sficc(&[
        "compile",
        s(&ir),
        "--out",
        s(&dir.path().join("w.obj")),
        "--component-bits",
        "5",
        "--offset-bits",
        "11",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn parse_errors_exit_two_with_position() {
    let dir = TempDir::new().unwrap();
    let ir = write(&dir, "broken.ir", &NESTED.replace("store r3 -> [r20]", "stor r3"));
    let o = sficc(&["compile", s(&ir), "--out", s(&dir.path().join("x.obj"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("broken.ir: line 11:"), "{}", stderr(&o));
}

#[test]
fn missing_input_exits_two() {
    let dir = TempDir::new().unwrap();
    let o = sficc(&[
        "compile",
        s(&dir.path().join("nope.ir")),
        "--out",
        s(&dir.path().join("x.obj")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn run_then_check_passes() {
    let dir = TempDir::new().unwrap();
    let (obj, log) = compiled_and_run(&dir);
    let (header, events) = read_log(&fs::read_to_string(&log).unwrap()).unwrap();
    assert_eq!(header.steps, events.last().unwrap().step() + 1);
    for inv in ["1", "2", "3", "all"] {
        let o = sficc(&["check", s(&obj), s(&log), "--invariant", inv]);
        assert_eq!(code(&o), 0, "invariant {inv}: {}", stdout(&o));
    }
    let o = sficc(&["check", s(&obj), s(&log), "--json"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 3);
}

#[test]
fn tampered_log_exits_one_with_listing() {
    let dir = TempDir::new().unwrap();
    let (obj, log) = compiled_and_run(&dir);
    let (header, mut events) = read_log(&fs::read_to_string(&log).unwrap()).unwrap();
    // Redirect component 2's store into component 1's block.
    let i = events
        .iter()
        .position(|e| matches!(e, LogEvent::Store { target, .. } if target.0 == 0x12000))
        .expect("component 2 stores to its block");
    if let LogEvent::Store { target, .. } = &mut events[i] {
        target.0 = 0x11000;
    }
    let tampered = write(&dir, "tampered.log", &write_log(&header, &events));
    let o = sficc(&["check", s(&obj), s(&tampered)]);
    assert_eq!(code(&o), 1);
    let out = stdout(&o);
    assert!(out.contains("invariant 1: FAIL"), "{out}");
    assert!(out.contains(&format!("event {i} ")), "{out}");
    assert!(out.contains("invariant 2: pass"), "{out}");

    let o = sficc(&["check", s(&obj), s(&tampered), "--invariant", "2"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn trace_lists_calls_and_returns() {
    let dir = TempDir::new().unwrap();
    let (obj, log) = compiled_and_run(&dir);
    let o = sficc(&["trace", s(&obj), s(&log)]);
    assert_eq!(code(&o), 0);
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["event"], "call");
    assert_eq!(lines[0]["arg"], 1);
    assert_eq!(lines[1]["event"], "ret");
    assert_eq!(lines[1]["value"], 5);
}

#[test]
fn disasm_marks_bundles_and_trusted_ranges() {
    let dir = TempDir::new().unwrap();
    let (obj, _) = compiled_and_run(&dir);
    let o = sficc(&["disasm", s(&obj)]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("---- bundle 256"), "{out}");
    assert!(out.contains("entry 1.0, entry-push begin"), "{out}");
    assert!(out.contains("return-pop end"), "{out}");
    assert!(out.contains("halt anchor"), "{out}");
}

#[test]
fn fuzz_reports_are_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for r in [&a, &b] {
        let o = sficc(&["fuzz", "--tests", "10", "--seed", "7", "--report", s(r)]);
        assert_eq!(code(&o), 0, "{}", stdout(&o));
    }
    let (ta, tb) = (fs::read_to_string(&a).unwrap(), fs::read_to_string(&b).unwrap());
    assert_eq!(ta, tb);
    let report = read_report(&ta).unwrap();
    assert_eq!(report.tests_run, 10);
    assert_eq!(report.seed, 7);
}

#[test]
fn seeded_fault_makes_fuzz_exit_one_with_repro() {
    let o = sficc(&[
        "fuzz",
        "--tests",
        "20",
        "--seed",
        "1",
        "--mutation",
        "missing-store-or",
        "--report",
        "/dev/null",
    ]);
    assert_eq!(code(&o), 1);
    let line = stdout(&o)
        .lines()
        .find(|l| l.trim_start().starts_with("sficc fuzz"))
        .map(|l| l.trim().to_owned())
        .expect("repro line");
    // The repro line is itself a valid invocation that reproduces the failure.
    let args: Vec<&str> = line.split_whitespace().skip(1).collect();
    let again = sficc(&args);
    assert_eq!(code(&again), 1, "{line}");
}

#[test]
fn attack_runs_and_passes() {
    let o = sficc(&["attack", "--tests", "10", "--seed", "3", "--flips", "2"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let report = read_report(&stdout(&o)).unwrap();
    assert_eq!(report.flips, 2);
}

#[test]
fn version_mismatch_exits_two() {
    let dir = TempDir::new().unwrap();
    let (obj, log) = compiled_and_run(&dir);
    let text = fs::read_to_string(&obj).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["version"] = 2.into();
    let future = write(&dir, "future.obj", &doc.to_string());
    let o = sficc(&["disasm", s(&future)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("version 2"), "{}", stderr(&o));
    let o = sficc(&["check", s(&future), s(&log)]);
    assert_eq!(code(&o), 2);

    let log_text = fs::read_to_string(&log)
        .unwrap()
        .replacen("\"version\":1", "\"version\":9", 1);
    let future_log = write(&dir, "future.log", &log_text);
    let o = sficc(&["check", s(&obj), s(&future_log)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn log_from_another_object_is_a_format_error() {
    let dir = TempDir::new().unwrap();
    let (_, log) = compiled_and_run(&dir);
    let other = write(
        &dir,
        "other.ir",
        "sfi-ir 1\nmain 1.0\ncomponent 1 {\n  export 0\n  proc 0 {\n    return\n  }\n}\n",
    );
    let other_obj = dir.path().join("other.obj");
    assert_eq!(code(&sficc(&["compile", s(&other), "--out", s(&other_obj)])), 0);
    let o = sficc(&["check", s(&other_obj), s(&log)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&sficc(&["fuzz", "--bogus"])), 2);
    assert_eq!(code(&sficc(&["frobnicate"])), 2);
    assert_eq!(code(&sficc(&["fuzz", "--mode", "tame"])), 2);
    assert_eq!(code(&sficc(&["fuzz", "--mutation", "nope"])), 2);
    assert_eq!(code(&sficc(&["check", "a", "b", "--invariant", "4"])), 2);
    assert_eq!(code(&sficc(&["attack", "--flips", "0", "--tests", "1"])), 2);
    assert_eq!(code(&sficc(&["--help"])), 0);
}

#[test]
fn run_in_process_matches_binary() {
    let code = sficc_cli::run(["sficc", "fuzz", "--tests", "3", "--seed", "2", "--report", "/dev/null"]);
    assert_eq!(code, sficc_cli::EXIT_PASS);
    assert_eq!(sficc_cli::run(["sficc", "nope"]), sficc_cli::EXIT_USAGE);
}
