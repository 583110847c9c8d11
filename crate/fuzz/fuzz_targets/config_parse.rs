#![no_main]

use docseg::config::{parse_document, to_canonical_string};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(node) = parse_document(data, "fuzz") {
        // canonical output must parse back to the same tree
        let text = to_canonical_string(&node);
        let again = parse_document(&text, "canonical").expect("canonical form reparses");
        assert_eq!(to_canonical_string(&again), text);
    }
});
