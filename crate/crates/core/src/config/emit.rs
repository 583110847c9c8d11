//! Canonical serialization: sorted keys, strings always quoted, floats in
//! shortest round-trip form, lists and nested list elements in flow style.

use super::{ConfigNode, Value};
use std::fmt::Write;

/// Serialize a tree. An empty tree serializes to the empty string.
pub fn to_canonical_string(node: &ConfigNode) -> String {
    let mut out = String::new();
    emit_block(node, 0, &mut out);
    out
}

fn emit_block(node: &ConfigNode, indent: usize, out: &mut String) {
    for (k, v) in node.iter() {
        for _ in 0..indent {
            out.push(' ');
        }
        emit_key(k, out);
        match v {
            Value::Map(m) if !m.is_empty() => {
                out.push_str(":\n");
                emit_block(m, indent + 2, out);
            }
            other => {
                out.push_str(": ");
                emit_flow(other, out);
                out.push('\n');
            }
        }
    }
}

fn emit_flow(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Int(i) => {
            let _ = write!(out, "{i}");
        }
        Value::Float(f) => out.push_str(&format_float(*f)),
        Value::Str(s) => emit_quoted(s, out),
        Value::List(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                emit_flow(item, out);
            }
            out.push(']');
        }
        Value::Map(m) => {
            out.push('{');
            for (i, (k, v)) in m.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                emit_key(k, out);
                out.push_str(": ");
                emit_flow(v, out);
            }
            out.push('}');
        }
    }
}

/// Floats always carry a `.`, an exponent, or a special spelling so they
/// reload as floats.
pub(crate) fn format_float(f: f64) -> String {
    if f.is_nan() {
        ".nan".into()
    } else if f.is_infinite() {
        if f > 0.0 { ".inf".into() } else { "-.inf".into() }
    } else {
        format!("{f:?}")
    }
}

fn is_plain_key(k: &str) -> bool {
    let mut chars = k.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | '/'))
}

fn emit_key(k: &str, out: &mut String) {
    if is_plain_key(k) {
        out.push_str(k);
    } else {
        emit_quoted(k, out);
    }
}

fn emit_quoted(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if (c as u32) < 0x20 || c == '\u{7f}' => {
                let _ = write!(out, "\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_document;

    #[test]
    fn canonical_layout() {
        let node = parse_document(
            "z: 1\na:\n  y: [1, {k: v}]\n  x: 0.5\nm: {}\ns: \"he said \\\"hi\\\"\"\nf: 2.0\n",
            "t",
        )
        .unwrap();
        let text = to_canonical_string(&node);
        assert_eq!(
            text,
            "a:\n  x: 0.5\n  y: [1, {k: \"v\"}]\nf: 2.0\nm: {}\ns: \"he said \\\"hi\\\"\"\nz: 1\n"
        );
        assert_eq!(parse_document(&text, "t").unwrap(), node);
    }

    #[test]
    fn empty_tree_is_empty_text() {
        assert_eq!(to_canonical_string(&ConfigNode::new()), "");
    }

    #[test]
    fn special_floats_and_keys() {
        let mut n = ConfigNode::new();
        n.insert("inf", f64::INFINITY);
        n.insert("ninf", f64::NEG_INFINITY);
        n.insert("tiny", 1e-300);
        n.insert("has space", "v");
        n.insert("9lives", true);
        let text = to_canonical_string(&n);
        let back = parse_document(&text, "t").unwrap();
        assert_eq!(back, n);
        let mut nan = ConfigNode::new();
        nan.insert("x", f64::NAN);
        let back = parse_document(&to_canonical_string(&nan), "t").unwrap();
        assert!(back.get("x").unwrap().as_f64().unwrap().is_nan());
    }
}
