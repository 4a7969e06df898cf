#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use lupi_core::trainer::rundir::parse_predictions;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_predictions(text, Path::new("fuzz.csv"));
    }
});
