//! Single-pass substitution of `${scope:key}` tokens from run-time providers.

use super::{ConfigError, ConfigNode, ResolvedConfig, Value, TARGET_KEY};
use std::collections::BTreeMap;

/// Run-time values by scope, e.g. `datamodule -> {num_classes: 8}`.
pub type Providers = BTreeMap<String, BTreeMap<String, Value>>;

/// Substitute every token. A string that is exactly one token takes the
/// provider value with its native type; tokens embedded in longer strings
/// are replaced textually.
pub fn resolve_interpolations(tree: &ConfigNode, providers: &Providers) -> Result<ResolvedConfig, ConfigError> {
    for (scope, values) in providers {
        for (key, v) in values {
            if contains_token(v) {
                return Err(ConfigError::ProviderInterpolation { scope: scope.clone(), key: key.clone() });
            }
        }
    }
    Ok(ResolvedConfig::new_unchecked(resolve_node(tree, "", providers)?))
}

fn contains_token(v: &Value) -> bool {
    match v {
        Value::Str(s) => s.contains("${"),
        Value::List(items) => items.iter().any(contains_token),
        Value::Map(m) => m.iter().any(|(_, v)| contains_token(v)),
        _ => false,
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() { key.to_string() } else { format!("{prefix}.{key}") }
}

fn resolve_node(node: &ConfigNode, path: &str, providers: &Providers) -> Result<ConfigNode, ConfigError> {
    let mut out = ConfigNode::new();
    for (k, v) in node.iter() {
        let p = join(path, k);
        if k == TARGET_KEY && contains_token(v) {
            return Err(ConfigError::TargetInterpolation { path: p });
        }
        out.insert(k.clone(), resolve_value(v, &p, providers)?);
    }
    Ok(out)
}

fn resolve_value(v: &Value, path: &str, providers: &Providers) -> Result<Value, ConfigError> {
    match v {
        Value::Str(s) if s.contains("${") => resolve_str(s, path, providers),
        Value::List(items) => items
            .iter()
            .enumerate()
            .map(|(i, item)| resolve_value(item, &format!("{path}[{i}]"), providers))
            .collect::<Result<Vec<_>, _>>()
            .map(Value::List),
        Value::Map(m) => Ok(Value::Map(resolve_node(m, path, providers)?)),
        other => Ok(other.clone()),
    }
}

enum Piece<'a> {
    Text(&'a str),
    Token { scope: &'a str, key: &'a str },
}

fn is_ident(s: &str) -> bool {
    let mut c = s.chars();
    c.next().is_some_and(|f| f.is_ascii_alphabetic() || f == '_') && c.all(|x| x.is_ascii_alphanumeric() || x == '_')
}

fn split_pieces<'a>(s: &'a str, path: &str) -> Result<Vec<Piece<'a>>, ConfigError> {
    let malformed = || ConfigError::MalformedInterpolation { path: path.to_string(), text: s.to_string() };
    let mut pieces = Vec::new();
    let mut rest = s;
    while let Some(start) = rest.find("${") {
        if start > 0 {
            pieces.push(Piece::Text(&rest[..start]));
        }
        let after = &rest[start + 2..];
        let end = after.find('}').ok_or_else(malformed)?;
        let (scope, key) = after[..end].split_once(':').ok_or_else(malformed)?;
        if !is_ident(scope) || !is_ident(key) {
            return Err(malformed());
        }
        pieces.push(Piece::Token { scope, key });
        rest = &after[end + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest));
    }
    Ok(pieces)
}

fn lookup<'p>(providers: &'p Providers, scope: &str, key: &str, path: &str) -> Result<&'p Value, ConfigError> {
    let values = providers
        .get(scope)
        .ok_or_else(|| ConfigError::UnknownScope { path: path.to_string(), scope: scope.to_string() })?;
    values.get(key).ok_or_else(|| ConfigError::UnknownKey {
        path: path.to_string(),
        scope: scope.to_string(),
        key: key.to_string(),
    })
}

fn resolve_str(s: &str, path: &str, providers: &Providers) -> Result<Value, ConfigError> {
    let pieces = split_pieces(s, path)?;
    if let [Piece::Token { scope, key }] = pieces.as_slice() {
        return Ok(lookup(providers, scope, key, path)?.clone());
    }
    let mut out = String::new();
    for piece in pieces {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Token { scope, key } => match lookup(providers, scope, key, path)? {
                Value::Str(v) => out.push_str(v),
                Value::Int(i) => out.push_str(&i.to_string()),
                Value::Float(f) => out.push_str(&super::emit::format_float(*f)),
                Value::Bool(b) => out.push_str(&b.to_string()),
                other => {
                    return Err(ConfigError::Unresolvable {
                        path: path.to_string(),
                        reason: format!("cannot embed a {} value from {scope}:{key} in text", other.type_name()),
                    })
                }
            },
        }
    }
    Ok(Value::Str(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_document;

    fn providers() -> Providers {
        let mut dm = BTreeMap::new();
        dm.insert("num_classes".to_string(), Value::Int(8));
        dm.insert("name".to_string(), Value::from("cb55"));
        let mut p = Providers::new();
        p.insert("datamodule".into(), dm);
        p
    }

    #[test]
    fn native_type_is_kept() {
        let t = parse_document("model:\n  num_classes: ${datamodule:num_classes}\n", "t").unwrap();
        let r = resolve_interpolations(&t, &providers()).unwrap();
        assert_eq!(r.node().get_path("model.num_classes"), Some(&Value::Int(8)));
    }

    #[test]
    fn embedded_tokens_are_textual() {
        let t = parse_document("a: \"run_${datamodule:name}_${datamodule:num_classes}\"\nb: [${datamodule:num_classes}]\n", "t")
            .unwrap();
        let r = resolve_interpolations(&t, &providers()).unwrap();
        assert_eq!(r.node().get("a"), Some(&Value::from("run_cb55_8")));
        assert_eq!(r.node().get("b"), Some(&Value::List(vec![Value::Int(8)])));
    }

    #[test]
    fn no_tokens_is_identity_and_idempotent() {
        let t = parse_document("a: 1\nb: {c: x}\n", "t").unwrap();
        let r = resolve_interpolations(&t, &providers()).unwrap();
        assert_eq!(r.node(), &t);
        let t2 = parse_document("n: ${datamodule:num_classes}\n", "t").unwrap();
        let once = resolve_interpolations(&t2, &providers()).unwrap();
        let twice = resolve_interpolations(once.node(), &providers()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn errors() {
        let p = providers();
        let case = |src: &str| resolve_interpolations(&parse_document(src, "t").unwrap(), &p).unwrap_err();
        assert!(matches!(case("a: ${datamodule:missing}\n"), ConfigError::UnknownKey { .. }));
        assert!(matches!(case("a: ${task:x}\n"), ConfigError::UnknownScope { .. }));
        assert!(matches!(case("m:\n  _target_: ${datamodule:name}\n"), ConfigError::TargetInterpolation { .. }));
        assert!(matches!(case("a: \"${datamodule}\"\n"), ConfigError::MalformedInterpolation { .. }));
        assert!(matches!(case("a: \"${datamodule:name\"\n"), ConfigError::MalformedInterpolation { .. }));
        let mut bad = providers();
        bad.get_mut("datamodule").unwrap().insert("loop".into(), Value::from("${datamodule:name}"));
        assert!(matches!(
            resolve_interpolations(&ConfigNode::new(), &bad),
            Err(ConfigError::ProviderInterpolation { .. })
        ));
    }
}
