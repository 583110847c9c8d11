#![no_main]

use docseg::config::{parse_document, resolve_interpolations, to_canonical_string, Providers, Value};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let Ok(node) = parse_document(data, "fuzz") else { return };
    let mut providers = Providers::new();
    let dm = providers.entry("datamodule".to_string()).or_default();
    dm.insert("num_classes".into(), Value::Int(8));
    dm.insert("name".into(), Value::Str("cb55".into()));
    if let Ok(resolved) = resolve_interpolations(&node, &providers) {
        let twice = resolve_interpolations(resolved.node(), &providers).expect("resolved output has no tokens");
        assert_eq!(to_canonical_string(twice.node()), resolved.to_canonical_string());
    }
});
