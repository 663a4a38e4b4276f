#![no_main]
use libfuzzer_sys::fuzz_target;
use slt_core::spatial::feature_file;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = feature_file::decode(data) {
        let again = feature_file::decode(&feature_file::encode(&t)).expect("re-encoded file decodes");
        assert_eq!(again.shape(), t.shape());
    }
});
