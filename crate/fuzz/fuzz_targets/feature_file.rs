#![no_main]

use libfuzzer_sys::fuzz_target;
use lupi_core::datamodel::{decode_feature_header, decode_features};

fuzz_target!(|data: &[u8]| {
    let header = decode_feature_header(data);
    if let Ok(file) = decode_features(data) {
        let (n, d) = header.expect("full decode implies a valid header");
        assert_eq!(file.features.dim(), (n, d));
    }
});
