use proptest::prelude::*;
use sficc_core::backend::{compile, verify_object};
use sficc_core::checkers::check_all;
use sficc_core::format::{read_log, read_object, write_log, write_object, LogHeader};
use sficc_core::fuzz::{derive_trace, gen_program, GenConfig, Mode};
use sficc_core::ir::{interpret, parse_program, print_program, validate, well_bracketed, IrStatus};
use sficc_core::isa::{BitConfig, Instruction, Register};
use sficc_core::machine::{run, run_with_injections, Injection, LogEvent, RunStatus};

fn config(seed: u64, mode: Mode) -> GenConfig {
    GenConfig {
        seed,
        mode,
        fuel: 4_000,
        ..GenConfig::default()
    }
}

fn mode() -> impl Strategy<Value = Mode> {
    prop_oneof![Just(Mode::Wild), Just(Mode::WellBehaved)]
}

// Component and slot of an address under the default layout, computed
// without the library.
fn fields(a: u64) -> (u64, u64) {
    ((a >> 12) & 0xf, a >> 16)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn ir_text_round_trips(seed: u64, m in mode()) {
        let p = gen_program(&config(seed, m)).unwrap();
        prop_assert!(validate(&p).is_empty());
        let text = print_program(&p);
        prop_assert_eq!(parse_program(&text).unwrap(), p);
    }

    #[test]
    fn objects_and_logs_round_trip(seed: u64, m in mode()) {
        let cfg = config(seed, m);
        let obj = compile(&gen_program(&cfg).unwrap(), BitConfig::default()).unwrap();
        let text = write_object(&obj);
        let back = read_object(&text).unwrap();
        prop_assert_eq!(&back, &obj);
        prop_assert_eq!(write_object(&back), text);

        let out = run(&obj, cfg.fuel).unwrap();
        let header = LogHeader::new(out.status, out.final_state.steps);
        let (h, events) = read_log(&write_log(&header, &out.log)).unwrap();
        prop_assert_eq!(h, header);
        prop_assert_eq!(events, out.log);
    }

    #[test]
    fn compiled_objects_pass_the_static_check(seed: u64, m in mode()) {
        let obj = compile(&gen_program(&config(seed, m)).unwrap(), BitConfig::default()).unwrap();
        prop_assert!(verify_object(&obj).is_empty());
    }

    #[test]
    fn every_store_stays_in_its_component(seed: u64) {
        let cfg = config(seed, Mode::Wild);
        let obj = compile(&gen_program(&cfg).unwrap(), BitConfig::default()).unwrap();
        let out = run(&obj, cfg.fuel).unwrap();
        for ev in &out.log {
            if let LogEvent::Store { pc, target, .. } = *ev {
                let (from, _) = fields(pc.0);
                let (to, slot) = fields(target.0);
                let push = obj.fetch(pc) == Some(Instruction::Store(Register::SP_PROT, Register::RA));
                if from == 0 || push {
                    prop_assert_eq!((to, slot), (0, 1));
                } else {
                    prop_assert_eq!(to, from);
                    prop_assert_eq!(slot % 2, 1);
                }
            }
        }
        for v in check_all(&out.log, &obj.meta).unwrap() {
            prop_assert!(v.pass(), "{:?}", v.violations);
        }
    }

    #[test]
    fn machine_trace_agrees_with_interpreter(seed: u64) {
        let cfg = config(seed, Mode::WellBehaved);
        let p = gen_program(&cfg).unwrap();
        let ir = interpret(&p, cfg.fuel);
        prop_assert!(!matches!(ir.status, IrStatus::UndefinedBehavior { .. }), "{:?}", ir.status);
        prop_assert!(well_bracketed(&ir.trace));
        let obj = compile(&p, BitConfig::default()).unwrap();
        let out = run(&obj, cfg.fuel * 20).unwrap();
        let trace = derive_trace(&out.log, &obj.meta).unwrap();
        if ir.status == IrStatus::Halted && out.status == RunStatus::Halted {
            prop_assert_eq!(trace, ir.trace);
        } else {
            let n = trace.len().min(ir.trace.len());
            prop_assert_eq!(&trace[..n], &ir.trace[..n]);
        }
    }

    #[test]
    fn data_corruption_never_breaks_isolation(seed: u64, flips in proptest::collection::vec((0u64..400, any::<u64>(), any::<u64>()), 1..6)) {
        let cfg = config(seed, Mode::Wild);
        let obj = compile(&gen_program(&cfg).unwrap(), BitConfig::default()).unwrap();
        let blocks: Vec<_> = obj.meta.block_map.values().copied().collect();
        let injections: Vec<Injection> = flips
            .into_iter()
            .map(|(step, pick, value)| {
                let b = blocks[(pick % blocks.len() as u64) as usize];
                let target = b.base.offset_by(((pick >> 32) % b.size) as i64);
                Injection { step, target, value }
            })
            .collect();
        let out = run_with_injections(&obj, cfg.fuel, &injections).unwrap();
        for v in check_all(&out.log, &obj.meta).unwrap() {
            prop_assert!(v.pass(), "{:?}", v.violations);
        }
    }
}
