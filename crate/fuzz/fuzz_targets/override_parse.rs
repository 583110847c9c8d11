#![no_main]

use docseg::config::{apply_overrides, parse_document, parse_override};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let Ok(directive) = parse_override(data) else { return };
    let base = parse_document("datamodule:\n  selection_train: 30\ntrainer:\n  max_epochs: 50\n", "base").unwrap();
    let _ = apply_overrides(&base, &[directive]);
});
