#![no_main]

use libfuzzer_sys::fuzz_target;
use lupi_core::datamodel::GeneSetCatalog;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let universe: Vec<String> = (0..4)
        .flat_map(|p| (0..4).map(move |k| format!("G{p:02}_{k:02}")))
        .collect();
    if let Ok(catalog) = GeneSetCatalog::parse(text, &universe) {
        for set in &catalog.sets {
            assert!(!set.gene_indices.is_empty());
            assert!(set.gene_indices.iter().all(|&i| i < universe.len()));
        }
    }
});
