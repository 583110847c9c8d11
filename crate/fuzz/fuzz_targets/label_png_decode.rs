#![no_main]

use docseg::data::{decode_label_image, encode_label_png, ClassEncoding};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let enc = ClassEncoding::hisdb();
    if let Ok(labels) = decode_label_image(data, &enc, 1 << 24) {
        let png = encode_label_png(&labels, &enc).expect("decoded labels re-encode");
        assert_eq!(decode_label_image(&png, &enc, 1 << 24).expect("round trip"), labels);
    }
});
