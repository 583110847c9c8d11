//! Hierarchical experiment configuration: loading with includes, command-line
//! overrides, run-time interpolation, registry-based instantiation and
//! canonical snapshots.

mod compose;
mod emit;
mod interpolate;
mod overrides;
mod parse;
mod registry;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub use compose::{load_config_tree, INCLUDE_KEY};
pub use emit::to_canonical_string;
pub use interpolate::{resolve_interpolations, Providers};
pub use overrides::{apply_overrides, parse_override, OverrideDirective, OverrideMode};
pub use parse::parse_document;
pub use registry::{instantiate, instantiate_as, instantiate_at, Args, Registry};

/// Key naming the registry path of a component node.
pub const TARGET_KEY: &str = "_target_";

/// File name of the snapshot written into every run directory.
pub const SNAPSHOT_FILE: &str = "config.yaml";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config file not found: {path}")]
    MissingFile { path: String },
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("{file}:{line}: duplicate key `{key}`")]
    DuplicateKey { file: String, line: usize, key: String },
    #[error("include cycle: {chain}")]
    IncludeCycle { chain: String },
    #[error("{file}: bad include entry: {message}")]
    BadInclude { file: String, message: String },
    #[error("malformed override `{token}`: {reason}")]
    MalformedOverride { token: String, reason: String },
    #[error("override `{directive}`: key `{path}` does not exist (prefix with `+` to add it)")]
    OverrideAbsent { directive: String, path: String },
    #[error("override `{directive}`: key `{path}` already exists (drop the `+` to change it)")]
    OverridePresent { directive: String, path: String },
    #[error("override `{directive}`: {reason}")]
    OverrideConflict { directive: String, reason: String },
    #[error("{path}: unknown interpolation scope `{scope}`")]
    UnknownScope { path: String, scope: String },
    #[error("{path}: scope `{scope}` has no key `{key}`")]
    UnknownKey { path: String, scope: String, key: String },
    #[error("{path}: malformed interpolation in `{text}`")]
    MalformedInterpolation { path: String, text: String },
    #[error("{path}: interpolation is not allowed in `{TARGET_KEY}`")]
    TargetInterpolation { path: String },
    #[error("provider value {scope}:{key} itself contains an interpolation")]
    ProviderInterpolation { scope: String, key: String },
    #[error("{path}: {reason}")]
    Unresolvable { path: String, reason: String },
    #[error("{path}: node has no `{TARGET_KEY}`")]
    MissingTarget { path: String },
    #[error("{path}: unknown target `{target}`")]
    UnknownTarget { path: String, target: String },
    #[error("{path}: constructing `{target}` failed: {message}")]
    Construct { path: String, target: String, message: String },
}

/// A configuration value.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<Value>),
    Map(ConfigNode),
}

impl Value {
    pub fn as_map(&self) -> Option<&ConfigNode> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    /// Integers widen to floats.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(f) => Some(*f),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Null => "null",
            Value::Bool(_) => "bool",
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::Str(_) => "string",
            Value::List(_) => "list",
            Value::Map(_) => "map",
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}

impl From<ConfigNode> for Value {
    fn from(v: ConfigNode) -> Self {
        Value::Map(v)
    }
}

/// A map node. Keys are unique and iterate in sorted order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigNode {
    entries: BTreeMap<String, Value>,
}

impl ConfigNode {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Value> {
        self.entries.get_mut(key)
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<Value>) -> Option<Value> {
        self.entries.insert(key.into(), value.into())
    }

    pub fn remove(&mut self, key: &str) -> Option<Value> {
        self.entries.remove(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Value)> {
        self.entries.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// The `_target_` registry path, when present and a string.
    pub fn target(&self) -> Option<&str> {
        self.get(TARGET_KEY).and_then(Value::as_str)
    }

    pub fn child(&self, key: &str) -> Option<&ConfigNode> {
        self.get(key).and_then(Value::as_map)
    }

    /// Look up a dotted path such as `datamodule.selection_train`.
    pub fn get_path(&self, path: &str) -> Option<&Value> {
        let mut parts = path.split('.');
        let mut cur = self.get(parts.next()?)?;
        for p in parts {
            cur = cur.as_map()?.get(p)?;
        }
        Some(cur)
    }

    /// Leaf-level merge: maps merge recursively, anything else in `other`
    /// replaces the value here.
    pub fn merge_from(&mut self, other: ConfigNode) {
        for (k, v) in other.entries {
            match (self.entries.get_mut(&k), v) {
                (Some(Value::Map(mine)), Value::Map(theirs)) => mine.merge_from(theirs),
                (_, v) => {
                    self.entries.insert(k, v);
                }
            }
        }
    }
}

impl FromIterator<(String, Value)> for ConfigNode {
    fn from_iter<T: IntoIterator<Item = (String, Value)>>(iter: T) -> Self {
        ConfigNode { entries: iter.into_iter().collect() }
    }
}

/// A fully composed, overridden and interpolated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig(ConfigNode);

impl ResolvedConfig {
    pub(crate) fn new_unchecked(node: ConfigNode) -> Self {
        ResolvedConfig(node)
    }

    pub fn node(&self) -> &ConfigNode {
        &self.0
    }

    pub fn into_node(self) -> ConfigNode {
        self.0
    }

    pub fn to_canonical_string(&self) -> String {
        to_canonical_string(&self.0)
    }
}

/// Write the canonical form of `resolved` to `<run_dir>/config.yaml`.
pub fn snapshot(resolved: &ResolvedConfig, run_dir: &Path) -> Result<PathBuf, ConfigError> {
    let path = run_dir.join(SNAPSHOT_FILE);
    fs::write(&path, resolved.to_canonical_string())
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    Ok(path)
}

/// Read a snapshot back without composing includes.
pub fn read_snapshot(path: &Path) -> Result<ConfigNode, ConfigError> {
    let src = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse_document(&src, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_is_leaf_level() {
        let mut a = parse_document("task:\n  lr: 0.001\n  name: seg\nseed: 1\n", "a").unwrap();
        let b = parse_document("task:\n  lr: 0.01\n", "b").unwrap();
        a.merge_from(b);
        assert_eq!(a.get_path("task.lr"), Some(&Value::Float(0.01)));
        assert_eq!(a.get_path("task.name"), Some(&Value::Str("seg".into())));
        assert_eq!(a.get_path("seed"), Some(&Value::Int(1)));
        assert_eq!(a.get_path("task.missing"), None);
    }

    #[test]
    fn snapshot_is_byte_identical_and_reloads_equal() {
        let dir = tempfile::tempdir().unwrap();
        let node = parse_document("b: [1, 2.5, \"x\"]\na:\n  _target_: models.unet\n  n: 8\n", "t").unwrap();
        let resolved = resolve_interpolations(&node, &Providers::new()).unwrap();
        let p1 = snapshot(&resolved, dir.path()).unwrap();
        let first = fs::read(&p1).unwrap();
        let p2 = snapshot(&resolved, dir.path()).unwrap();
        assert_eq!(first, fs::read(&p2).unwrap());
        assert_eq!(read_snapshot(&p1).unwrap(), node);
    }
}
