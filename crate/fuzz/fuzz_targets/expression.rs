#![no_main]

use libfuzzer_sys::fuzz_target;
use lupi_core::datamodel::ExpressionProfile;

fuzz_target!(|data: &[u8]| {
    if let Ok(profile) = ExpressionProfile::decode(data, "fuzz") {
        assert_eq!(profile.gene_names.len(), profile.values.len());
        assert!(profile.values.iter().all(|v| v.is_finite()));
    }
});
