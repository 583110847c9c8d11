#![no_main]

use docseg::data::{decode_gt_pixel, ClassEncoding, BOUNDARY_BIT};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: [u8; 4]| {
    let value = u32::from_le_bytes(data) & 0x00FF_FFFF;
    if let Ok(class) = decode_gt_pixel(value) {
        let enc = ClassEncoding::hisdb();
        assert_eq!(enc.encode(class, value & BOUNDARY_BIT != 0).unwrap(), value);
    }
});
