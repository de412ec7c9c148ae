use crate::backend::{LayoutMeta, RangeKind};
use crate::checkers::CheckError;
use crate::ir::TraceEvent;
use crate::machine::{LogEvent, TransferKind};

/// Recovers the cross-component call/return trace from a machine log.
/// Transfers to or from the runtime (startup and the final return) are not
/// part of the trace.
pub fn derive_trace(log: &[LogEvent], meta: &LayoutMeta) -> Result<Vec<TraceEvent>, CheckError> {
    let entries = meta.entry_index();
    let mut trace = Vec::new();
    for (event_index, ev) in log.iter().enumerate() {
        let LogEvent::Transfer {
            pc, target, kind, r3, ..
        } = *ev
        else {
            if let Some(pc) = ev.pc().filter(|&pc| !meta.is_code(pc)) {
                return Err(CheckError::MetaMismatch { event_index, pc });
            }
            continue;
        };
        if !meta.is_code(pc) {
            return Err(CheckError::MetaMismatch { event_index, pc });
        }
        let from = meta.decode(pc).component;
        let to = meta.decode(target).component;
        if from.0 == 0 || to.0 == 0 || from == to {
            continue;
        }
        match kind {
            TransferKind::JalDirect => {
                if let Some(&(callee, procedure)) = entries.get(&target) {
                    trace.push(TraceEvent::Call {
                        caller: from,
                        procedure,
                        arg: r3,
                        callee,
                    });
                }
            }
            TransferKind::JumpReg
                if meta
                    .trusted_range_at(pc)
                    .is_some_and(|r| r.kind == RangeKind::ReturnPop) =>
            {
                trace.push(TraceEvent::Ret {
                    returner: from,
                    value: r3,
                    returnee: to,
                });
            }
            _ => {}
        }
    }
    Ok(trace)
}
