#![no_main]
use libfuzzer_sys::fuzz_target;
use slt_core::pipeline::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::decode(data) {
        let bytes = c.encode();
        let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode(), bytes);
        let _ = c.to_store();
    }
});
