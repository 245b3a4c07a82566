#![no_main]

use dcpsim::routing::parse_routing_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(rows) = parse_routing_csv(data) {
        for r in &rows {
            assert!(r.table == "q_route" || r.table == "res_route");
        }
    }
});
