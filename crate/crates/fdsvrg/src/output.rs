//! CSV outputs. Floats use Rust's shortest round-trip formatting, so equal
//! values always print identically.

use std::io::Write;

use fdsvrg_core::analysis::ContractionReport;
use fdsvrg_core::comm::CommLedger;
use fdsvrg_core::trace::TraceRecord;

use crate::error::Error;

/// `t,objective,gap,comm_scalars,seconds`. With `zero_seconds` the time
/// column is written as 0 so that reruns are byte-identical.
pub fn write_trace<W: Write>(out: W, trace: &[TraceRecord], zero_seconds: bool) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "objective", "gap", "comm_scalars", "seconds"])?;
    for r in trace {
        let seconds = if zero_seconds { 0.0 } else { r.seconds };
        w.write_record([
            r.t.to_string(),
            r.objective.to_string(),
            r.gap.to_string(),
            r.comm_scalars.to_string(),
            seconds.to_string(),
        ])?;
    }
    w.flush().map_err(Error::io("<csv>"))?;
    Ok(())
}

/// `phase,sender,receiver,scalars`, one row per directed edge and phase.
pub fn write_ledger<W: Write>(out: W, ledger: &CommLedger) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["phase", "sender", "receiver", "scalars"])?;
    for (phase, from, to, n) in ledger.entries() {
        w.write_record([
            phase.as_str().to_string(),
            from.to_string(),
            to.to_string(),
            n.to_string(),
        ])?;
    }
    w.flush().map_err(Error::io("<csv>"))?;
    Ok(())
}

/// `config_hash,a,b,rho,empirical_ratio,pass`.
pub fn write_contraction_reports<W: Write>(out: W, rows: &[(u64, ContractionReport)]) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["config_hash", "a", "b", "rho", "empirical_ratio", "pass"])?;
    for (hash, r) in rows {
        w.write_record([
            format!("{hash:016x}"),
            r.bound.a.to_string(),
            r.bound.b.to_string(),
            r.bound.rho.map_or("undefined".into(), |x| x.to_string()),
            r.empirical_ratio.to_string(),
            r.pass.to_string(),
        ])?;
    }
    w.flush().map_err(Error::io("<csv>"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use fdsvrg_core::comm::{Endpoint, Phase};

    #[test]
    fn trace_layout() {
        let rec = TraceRecord {
            t: 3,
            objective: 0.5,
            gap: f64::NAN,
            comm_scalars: 80,
            seconds: 1.25,
        };
        let mut buf = Vec::new();
        write_trace(&mut buf, &[rec], false).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "t,objective,gap,comm_scalars,seconds\n3,0.5,NaN,80,1.25\n"
        );
        let mut buf = Vec::new();
        write_trace(&mut buf, &[rec], true).unwrap();
        assert!(String::from_utf8(buf).unwrap().ends_with(",80,0\n"));
    }

    #[test]
    fn ledger_layout() {
        let mut l = CommLedger::new();
        l.record(Phase::InnerLoop, Endpoint::Worker(2), Endpoint::Worker(1), 3);
        l.record(Phase::FullGradient, Endpoint::Coordinator, Endpoint::Worker(1), 5);
        let mut buf = Vec::new();
        write_ledger(&mut buf, &l).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "phase,sender,receiver,scalars\nfull_gradient,coordinator,worker1,5\ninner_loop,worker2,worker1,3\n"
        );
    }
}
