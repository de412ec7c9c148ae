use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gen::{generate, wild_code_address, wild_data_address};
use super::{derive_trace, shrink, GenConfig, GenConfigError, Mode};
use crate::backend::{compile_with, verify_object, MachineObject, Mutation};
use crate::checkers::check_all;
use crate::ir::{interpret_words, print_program, IrOutcome, IrProgram, IrStatus, TraceEvent};
use crate::machine::{run_with_injections, Injection, RunStatus};

/// Failing cases kept in a report; the counters cover all of them.
const KEPT_FAILURES: usize = 20;
/// Failing cases shrunk when shrinking is requested.
const SHRUNK_FAILURES: usize = 3;

/// Seed of test `index` in a campaign with master seed `master`.
pub fn test_seed(master: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(master ^ mix(index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    Discard,
    SelfCheck,
    MetaMismatch,
    StoreInvariant,
    JumpInvariant,
    StackInvariant,
    TraceMismatch,
    /// A well-behaved program got stuck on the machine.
    MachineStuck,
    /// A well-behaved program hit undefined behavior in the interpreter.
    IrUndefined,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationCounts {
    pub store: u64,
    pub jump: u64,
    pub stack: u64,
}

impl ViolationCounts {
    pub fn total(&self) -> u64 {
        self.store + self.jump + self.stack
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub halted: u64,
    pub out_of_fuel: u64,
    pub stuck: u64,
}

/// Result of pushing one program through the pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseOutcome {
    pub status: Option<RunStatus>,
    pub violations: ViolationCounts,
    pub self_check_failures: usize,
    pub failures: Vec<FailureKind>,
    /// First problem found, for humans.
    pub detail: String,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn fail(&mut self, kind: FailureKind, detail: String) {
        if !self.failures.contains(&kind) {
            self.failures.push(kind);
        }
        if self.detail.is_empty() {
            self.detail = detail;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailingCase {
    pub index: u64,
    pub seed: u64,
    pub failures: Vec<FailureKind>,
    pub detail: String,
    /// Command line reproducing this single test.
    pub repro: String,
    /// Shrunk program in IR text form, when shrinking was requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shrunk: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzReport {
    pub mode: Mode,
    pub seed: u64,
    pub start: u64,
    pub fuel: u64,
    /// Injected corruptions per test; 0 for plain fuzzing.
    pub flips: u32,
    pub mutation: Option<Mutation>,
    pub tests_run: u64,
    pub discards: u64,
    pub violations: ViolationCounts,
    pub trace_mismatches: u64,
    pub self_check_failures: u64,
    pub statuses: StatusCounts,
    pub failing_tests: u64,
    pub failures: Vec<FailingCase>,
}

impl FuzzReport {
    /// No discards and no failing test.
    pub fn clean(&self) -> bool {
        self.discards == 0 && self.failing_tests == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FuzzOptions {
    pub tests: u64,
    /// Index of the first test.
    pub start: u64,
    pub shrink: bool,
}

impl Default for FuzzOptions {
    fn default() -> Self {
        FuzzOptions {
            tests: 100,
            start: 0,
            shrink: false,
        }
    }
}

/// Compiles, runs and checks one program.
pub fn run_case(program: &IrProgram, cfg: &GenConfig) -> CaseOutcome {
    match compile_with(program, cfg.bits, cfg.mutation) {
        Ok(obj) => check_object(program, &obj, cfg, &[]),
        Err(e) => discarded(e.to_string()),
    }
}

fn discarded(detail: String) -> CaseOutcome {
    let mut out = CaseOutcome {
        status: None,
        violations: ViolationCounts::default(),
        self_check_failures: 0,
        failures: Vec::new(),
        detail: String::new(),
    };
    out.fail(FailureKind::Discard, detail);
    out
}

fn check_object(program: &IrProgram, obj: &MachineObject, cfg: &GenConfig, injections: &[Injection]) -> CaseOutcome {
    let mut out = CaseOutcome {
        status: None,
        violations: ViolationCounts::default(),
        self_check_failures: 0,
        failures: Vec::new(),
        detail: String::new(),
    };
    let statics = verify_object(obj);
    out.self_check_failures = statics.len();
    if let Some(first) = statics.first() {
        out.fail(FailureKind::SelfCheck, format!("self-check: {first}"));
    }
    let run = match run_with_injections(obj, cfg.fuel, injections) {
        Ok(r) => r,
        Err(e) => return discarded(e.to_string()),
    };
    out.status = Some(run.status);

    match check_all(&run.log, &obj.meta) {
        Err(e) => out.fail(FailureKind::MetaMismatch, e.to_string()),
        Ok(verdicts) => {
            for v in &verdicts {
                let n = v.violations.len() as u64;
                let (slot, kind) = match v.invariant {
                    1 => (&mut out.violations.store, FailureKind::StoreInvariant),
                    2 => (&mut out.violations.jump, FailureKind::JumpInvariant),
                    _ => (&mut out.violations.stack, FailureKind::StackInvariant),
                };
                *slot += n;
                if let Some(first) = v.violations.first() {
                    out.fail(
                        kind,
                        format!(
                            "invariant {} at event {} (step {}): {}",
                            v.invariant, first.event_index, first.step, first.detail
                        ),
                    );
                }
            }
        }
    }

    if cfg.mode == Mode::WellBehaved && injections.is_empty() {
        if let RunStatus::Stuck { step, .. } = run.status {
            out.fail(FailureKind::MachineStuck, format!("machine stuck at step {step}"));
        }
        let ir = interpret_words(program, cfg.fuel, cfg.bits.word_mask());
        if let IrStatus::UndefinedBehavior { reason, step } = ir.status {
            out.fail(
                FailureKind::IrUndefined,
                format!("interpreter UB {reason:?} at step {step}"),
            );
        }
        match derive_trace(&run.log, &obj.meta) {
            Err(e) => out.fail(FailureKind::MetaMismatch, e.to_string()),
            Ok(machine) => {
                if let Err(d) = traces_agree(&ir, run.status, &machine) {
                    out.fail(FailureKind::TraceMismatch, d);
                }
            }
        }
    }
    out
}

fn is_prefix(a: &[TraceEvent], b: &[TraceEvent]) -> bool {
    a.len() <= b.len() && a == &b[..a.len()]
}

/// Trace agreement: equal when both sides halted, otherwise the side that
/// ran out of fuel must be a prefix of the other.
fn traces_agree(ir: &IrOutcome, machine_status: RunStatus, machine: &[TraceEvent]) -> Result<(), String> {
    let ir_done = ir.status == IrStatus::Halted;
    let m_done = machine_status == RunStatus::Halted;
    let ok = match (ir_done, m_done) {
        (true, true) => ir.trace == machine,
        (true, false) => is_prefix(machine, &ir.trace),
        (false, true) => is_prefix(&ir.trace, machine),
        (false, false) => is_prefix(machine, &ir.trace) || is_prefix(&ir.trace, machine),
    };
    if ok {
        return Ok(());
    }
    let at = ir.trace.iter().zip(machine).take_while(|(a, b)| a == b).count();
    Err(format!(
        "traces diverge at event {at}: interpreter {:?} ({} events, {:?}), machine {:?} ({} events, {:?})",
        ir.trace.get(at),
        ir.trace.len(),
        ir.status,
        machine.get(at),
        machine.len(),
        machine_status
    ))
}

struct Evaluated {
    index: u64,
    seed: u64,
    program: IrProgram,
    outcome: CaseOutcome,
}

fn evaluate(cfg: &GenConfig, index: u64, flips: u32) -> Evaluated {
    let seed = test_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let program = generate(cfg, &mut rng);
    let outcome = match compile_with(&program, cfg.bits, cfg.mutation) {
        Err(e) => discarded(e.to_string()),
        Ok(obj) if flips == 0 => check_object(&program, &obj, cfg, &[]),
        Ok(obj) => {
            let injections = plan_injections(&program, &obj, cfg, flips, &mut rng);
            check_object(&program, &obj, cfg, &injections)
        }
    };
    Evaluated {
        index,
        seed,
        program,
        outcome,
    }
}

/// Corruptions at uniformly random steps of the uninjected run, each
/// overwriting a random in-range word of a random component's block.
fn plan_injections(
    program: &IrProgram,
    obj: &MachineObject,
    cfg: &GenConfig,
    flips: u32,
    rng: &mut ChaCha8Rng,
) -> Vec<Injection> {
    let steps = run_with_injections(obj, cfg.fuel, &[])
        .map(|r| r.final_state.steps)
        .unwrap_or(cfg.fuel)
        .max(1);
    let placements: Vec<_> = obj.meta.block_map.values().copied().collect();
    let n = program.components.len() as u32;
    (0..flips)
        .map(|_| {
            let b = placements[rng.gen_range(0..placements.len())];
            let value = match rng.gen_range(0..3) {
                0 => wild_code_address(cfg, rng, n),
                1 => wild_data_address(cfg, rng, n),
                _ => rng.gen::<u64>() & cfg.bits.word_mask(),
            };
            Injection {
                step: rng.gen_range(0..steps),
                target: b.base.offset_by(rng.gen_range(0..b.size) as i64),
                value,
            }
        })
        .collect()
}

fn repro(cfg: &GenConfig, index: u64, flips: u32) -> String {
    let mut s = if flips == 0 {
        String::from("sficc fuzz")
    } else {
        format!("sficc attack --flips {flips}")
    };
    s += &format!(
        " --mode {} --seed {} --start {index} --tests 1 --fuel {}",
        cfg.mode, cfg.seed, cfg.fuel
    );
    if let Some(m) = cfg.mutation {
        s += &format!(
            " --mutation {}",
            serde_json::to_value(m)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default()
        );
    }
    s
}

fn campaign(cfg: &GenConfig, opts: &FuzzOptions, flips: u32) -> FuzzReport {
    let results: Vec<Evaluated> = (opts.start..opts.start + opts.tests)
        .into_par_iter()
        .map(|i| evaluate(cfg, i, flips))
        .collect();
    let mut report = FuzzReport {
        mode: cfg.mode,
        seed: cfg.seed,
        start: opts.start,
        fuel: cfg.fuel,
        flips,
        mutation: cfg.mutation,
        tests_run: 0,
        discards: 0,
        violations: ViolationCounts::default(),
        trace_mismatches: 0,
        self_check_failures: 0,
        statuses: StatusCounts::default(),
        failing_tests: 0,
        failures: Vec::new(),
    };
    for r in results {
        let o = &r.outcome;
        report.tests_run += 1;
        match o.status {
            None => {}
            Some(RunStatus::Halted) => report.statuses.halted += 1,
            Some(RunStatus::OutOfFuel) => report.statuses.out_of_fuel += 1,
            Some(RunStatus::Stuck { .. }) => report.statuses.stuck += 1,
        }
        report.discards += u64::from(o.failures.contains(&FailureKind::Discard));
        report.violations.store += o.violations.store;
        report.violations.jump += o.violations.jump;
        report.violations.stack += o.violations.stack;
        report.trace_mismatches += u64::from(o.failures.contains(&FailureKind::TraceMismatch));
        report.self_check_failures += u64::from(o.self_check_failures > 0);
        if o.passed() {
            continue;
        }
        report.failing_tests += 1;
        if report.failures.len() < KEPT_FAILURES {
            let shrunk = (opts.shrink && flips == 0 && report.failures.len() < SHRUNK_FAILURES)
                .then(|| shrink(&r.program, cfg).ok())
                .flatten()
                .map(|p| print_program(&p));
            report.failures.push(FailingCase {
                index: r.index,
                seed: r.seed,
                failures: o.failures.clone(),
                detail: o.detail.clone(),
                repro: repro(cfg, r.index, flips),
                shrunk,
            });
        }
    }
    report
}

/// Runs `opts.tests` generated programs through compile, run, the three
/// checkers and (well-behaved mode) trace comparison.
pub fn run_pipeline(cfg: &GenConfig, opts: &FuzzOptions) -> Result<FuzzReport, GenConfigError> {
    cfg.validate()?;
    Ok(campaign(cfg, opts, 0))
}

/// Like [`run_pipeline`], with `flips` data corruptions injected into
/// every run.
pub fn inject_attack(cfg: &GenConfig, flips: u32, opts: &FuzzOptions) -> Result<FuzzReport, GenConfigError> {
    cfg.validate()?;
    if flips == 0 {
        return Err(GenConfigError("flips must be at least 1".into()));
    }
    Ok(campaign(cfg, opts, flips))
}
