//! Command-line overrides of the form `[+]dotted.path=value`.

use super::{ConfigError, ConfigNode, Value};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverrideMode {
    SetExisting,
    AddNew,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverrideDirective {
    pub path: String,
    pub value: Value,
    pub mode: OverrideMode,
}

impl fmt::Display for OverrideDirective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let plus = if self.mode == OverrideMode::AddNew { "+" } else { "" };
        let value = match &self.value {
            Value::Str(s) => s.clone(),
            Value::Int(i) => i.to_string(),
            Value::Float(x) => super::emit::format_float(*x),
            Value::Bool(b) => b.to_string(),
            other => other.type_name().to_string(),
        };
        write!(f, "{plus}{}={value}", self.path)
    }
}

/// Parse one override token. Values are typed by first success of
/// int, float, bool, string.
pub fn parse_override(token: &str) -> Result<OverrideDirective, ConfigError> {
    let malformed = |reason: &str| ConfigError::MalformedOverride { token: token.to_string(), reason: reason.to_string() };
    let (mode, body) = match token.strip_prefix('+') {
        Some(rest) => (OverrideMode::AddNew, rest),
        None => (OverrideMode::SetExisting, token),
    };
    let (path, raw) = body.split_once('=').ok_or_else(|| malformed("expected `path=value`"))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(malformed("empty path"));
    }
    if path.split('.').any(|seg| seg.is_empty()) {
        return Err(malformed("empty path segment"));
    }
    if path.chars().any(|c| c.is_whitespace() || matches!(c, '=' | '+' | '$' | '{' | '}' | '[' | ']')) {
        return Err(malformed("invalid character in path"));
    }
    Ok(OverrideDirective { path: path.to_string(), value: parse_value(raw), mode })
}

fn parse_value(raw: &str) -> Value {
    if let Ok(i) = raw.parse::<i64>() {
        return Value::Int(i);
    }
    if is_decimal_float(raw) {
        if let Ok(f) = raw.parse::<f64>() {
            return Value::Float(f);
        }
    }
    match raw {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => Value::Str(raw.to_string()),
    }
}

/// Decimal float syntax only; words such as `inf` or `nan` stay strings.
fn is_decimal_float(s: &str) -> bool {
    let body = s.strip_prefix(['+', '-']).unwrap_or(s);
    body.chars().next().is_some_and(|c| c.is_ascii_digit() || c == '.')
        && body.chars().any(|c| c.is_ascii_digit())
        && body.chars().all(|c| c.is_ascii_digit() || matches!(c, '.' | 'e' | 'E' | '+' | '-'))
}

/// Apply directives in order. The input tree is not modified on error.
pub fn apply_overrides(tree: &ConfigNode, directives: &[OverrideDirective]) -> Result<ConfigNode, ConfigError> {
    let mut out = tree.clone();
    for d in directives {
        apply_one(&mut out, d)?;
    }
    Ok(out)
}

fn apply_one(tree: &mut ConfigNode, d: &OverrideDirective) -> Result<(), ConfigError> {
    let directive = d.to_string();
    let segs: Vec<&str> = d.path.split('.').collect();
    let (leaf, parents) = segs.split_last().expect("non-empty path");
    let mut node = tree;
    for (i, seg) in parents.iter().enumerate() {
        let prefix = segs[..=i].join(".");
        if !node.contains_key(seg) {
            match d.mode {
                OverrideMode::SetExisting => {
                    return Err(ConfigError::OverrideAbsent { directive, path: d.path.clone() });
                }
                OverrideMode::AddNew => {
                    node.insert(*seg, ConfigNode::new());
                }
            }
        }
        node = match node.get_mut(seg) {
            Some(Value::Map(m)) => m,
            Some(other) => {
                return Err(ConfigError::OverrideConflict {
                    directive,
                    reason: format!("`{prefix}` is a {}, not a map", other.type_name()),
                })
            }
            None => unreachable!("inserted above"),
        };
    }
    match (d.mode, node.get(leaf)) {
        (OverrideMode::SetExisting, None) => Err(ConfigError::OverrideAbsent { directive, path: d.path.clone() }),
        (OverrideMode::AddNew, Some(_)) => Err(ConfigError::OverridePresent { directive, path: d.path.clone() }),
        (OverrideMode::SetExisting, Some(Value::Map(m))) if !m.is_empty() => Err(ConfigError::OverrideConflict {
            directive,
            reason: format!("`{}` is a map; override its leaves instead", d.path),
        }),
        _ => {
            node.insert(*leaf, d.value.clone());
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_document;

    #[test]
    fn command_line_tokens() {
        let d = parse_override("datamodule.selection_train=15").unwrap();
        assert_eq!(d.path, "datamodule.selection_train");
        assert_eq!(d.value, Value::Int(15));
        assert_eq!(d.mode, OverrideMode::SetExisting);
        let s = parse_override("+seed=2149823").unwrap();
        assert_eq!((s.path.as_str(), &s.value, s.mode), ("seed", &Value::Int(2149823), OverrideMode::AddNew));
    }

    #[test]
    fn value_precedence() {
        assert_eq!(parse_override("a=1.5").unwrap().value, Value::Float(1.5));
        assert_eq!(parse_override("a=1e-3").unwrap().value, Value::Float(1e-3));
        assert_eq!(parse_override("a=true").unwrap().value, Value::Bool(true));
        assert_eq!(parse_override("a=unet").unwrap().value, Value::from("unet"));
        assert_eq!(parse_override("a=").unwrap().value, Value::from(""));
        assert_eq!(parse_override("a=nan").unwrap().value, Value::from("nan"));
        assert_eq!(parse_override("a=x=y").unwrap().value, Value::from("x=y"));
        assert_eq!(parse_override("a=-3").unwrap().value, Value::Int(-3));
    }

    #[test]
    fn malformed_tokens() {
        for t in ["=5", "+=5", "noequals", "a..b=1", ".a=1", "a b=1", ""] {
            assert!(matches!(parse_override(t), Err(ConfigError::MalformedOverride { .. })), "{t}");
        }
    }

    #[test]
    fn apply_semantics() {
        let tree = parse_document("datamodule:\n  selection_train: 30\n", "t").unwrap();
        assert_eq!(apply_overrides(&tree, &[]).unwrap(), tree);
        let ds = [parse_override("datamodule.selection_train=15").unwrap(), parse_override("+seed=2149823").unwrap()];
        let out = apply_overrides(&tree, &ds).unwrap();
        assert_eq!(out.get_path("datamodule.selection_train"), Some(&Value::Int(15)));
        assert_eq!(out.get("seed"), Some(&Value::Int(2149823)));

        match apply_overrides(&tree, &[parse_override("foo.bar=1").unwrap()]) {
            Err(e @ ConfigError::OverrideAbsent { .. }) => assert!(e.to_string().contains("foo.bar")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            apply_overrides(&tree, &[parse_override("+datamodule.selection_train=1").unwrap()]),
            Err(ConfigError::OverridePresent { .. })
        ));
        assert!(matches!(
            apply_overrides(&tree, &[parse_override("+datamodule.selection_train.x=1").unwrap()]),
            Err(ConfigError::OverrideConflict { .. })
        ));
        let nested = apply_overrides(&tree, &[parse_override("+a.b.c=x").unwrap()]).unwrap();
        assert_eq!(nested.get_path("a.b.c"), Some(&Value::from("x")));
    }

    #[test]
    fn sequential_equals_batched() {
        let tree = parse_document("a: 1\n", "t").unwrap();
        let d1 = parse_override("a=2").unwrap();
        let d2 = parse_override("+b=3").unwrap();
        let both = apply_overrides(&tree, &[d1.clone(), d2.clone()]).unwrap();
        let seq = apply_overrides(&apply_overrides(&tree, &[d1]).unwrap(), &[d2]).unwrap();
        assert_eq!(both, seq);
    }
}
