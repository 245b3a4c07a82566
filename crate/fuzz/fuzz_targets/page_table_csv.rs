#![no_main]

use dcpsim::GlobalPageTable;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = GlobalPageTable::parse_dump(text);
    }
});
