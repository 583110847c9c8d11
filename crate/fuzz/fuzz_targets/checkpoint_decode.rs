#![no_main]

use docseg::model::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&ck);
        assert_eq!(decode_checkpoint(&bytes).expect("re-encoded checkpoint decodes"), ck);
    }
});
