#![no_main]

use libfuzzer_sys::fuzz_target;
use lupi_core::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    // the last line doubles as a --set override
    let (doc, last) = text.rsplit_once('\n').unwrap_or((text, ""));
    if let Ok(cfg) = RunConfig::parse(doc, &[last.to_string()]) {
        RunConfig::parse(&cfg.to_toml(), &[]).expect("snapshot parses");
    }
});
