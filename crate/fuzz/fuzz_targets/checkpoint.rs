#![no_main]

use libfuzzer_sys::fuzz_target;
use lupi_core::model::Network;
use lupi_core::numerics::TensorFile;

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = TensorFile::decode(data) {
        let again = TensorFile::decode(&file.encode()).expect("re-encoded checkpoint decodes");
        assert_eq!(again.tensors.len(), file.tensors.len());
        let _ = Network::from_checkpoint(&file);
    }
});
