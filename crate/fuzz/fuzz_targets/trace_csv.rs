#![no_main]

use dcpsim::workload::{parse_trace_csv, write_trace_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let Ok(trace) = parse_trace_csv(data) else { return };
    let mut buf = Vec::new();
    write_trace_csv(&trace, &mut buf).unwrap();
    let again = parse_trace_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
    assert_eq!(again.len(), trace.len());
});
