//! Registry-based instantiation of `_target_` nodes.

use super::{ConfigError, ConfigNode, Value, TARGET_KEY};
use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};

type Constructor<C> = Box<dyn Fn(&mut Args, &C) -> Result<Box<dyn Any>, String> + Send + Sync>;

/// Maps dotted target paths to constructors. `C` is a caller-supplied
/// context handed to every constructor.
pub struct Registry<C> {
    constructors: BTreeMap<String, Constructor<C>>,
}

impl<C> Default for Registry<C> {
    fn default() -> Self {
        Registry { constructors: BTreeMap::new() }
    }
}

impl<C> Registry<C> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register `f` under `target`, replacing any earlier constructor.
    pub fn register<F>(&mut self, target: &str, f: F)
    where
        F: Fn(&mut Args, &C) -> Result<Box<dyn Any>, String> + Send + Sync + 'static,
    {
        self.constructors.insert(target.to_string(), Box::new(f));
    }

    pub fn contains(&self, target: &str) -> bool {
        self.constructors.contains_key(target)
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.constructors.keys().map(String::as_str)
    }
}

enum Arg {
    Value(Value),
    Component(Box<dyn Any>),
    Components(Vec<Box<dyn Any>>),
}

/// Constructor arguments: the node's keys other than `_target_`, with
/// nested target nodes already built.
pub struct Args {
    path: String,
    target: String,
    args: BTreeMap<String, Arg>,
    used: BTreeSet<String>,
}

impl Args {
    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn contains(&self, key: &str) -> bool {
        self.args.contains_key(key)
    }

    fn take_value(&mut self, key: &str) -> Option<&Value> {
        self.used.insert(key.to_string());
        match self.args.get(key) {
            Some(Arg::Value(Value::Null)) | None => None,
            Some(Arg::Value(v)) => Some(v),
            Some(_) => None,
        }
    }

    fn is_component(&self, key: &str) -> bool {
        matches!(self.args.get(key), Some(Arg::Component(_) | Arg::Components(_)))
    }

    /// Raw value of `key`; `None` when absent or null.
    pub fn value(&mut self, key: &str) -> Result<Option<Value>, String> {
        if self.is_component(key) {
            return Err(format!("`{key}` is a component, expected a plain value"));
        }
        Ok(self.take_value(key).cloned())
    }

    fn typed<T>(&mut self, key: &str, want: &str, f: impl Fn(&Value) -> Option<T>) -> Result<Option<T>, String> {
        match self.value(key)? {
            None => Ok(None),
            Some(v) => f(&v).map(Some).ok_or_else(|| format!("`{key}` must be {want}, found {}", v.type_name())),
        }
    }

    pub fn opt_i64(&mut self, key: &str) -> Result<Option<i64>, String> {
        self.typed(key, "an integer", Value::as_i64)
    }

    pub fn opt_usize(&mut self, key: &str) -> Result<Option<usize>, String> {
        match self.opt_i64(key)? {
            None => Ok(None),
            Some(i) => usize::try_from(i).map(Some).map_err(|_| format!("`{key}` must be non-negative, found {i}")),
        }
    }

    pub fn opt_f64(&mut self, key: &str) -> Result<Option<f64>, String> {
        self.typed(key, "a number", Value::as_f64)
    }

    pub fn opt_bool(&mut self, key: &str) -> Result<Option<bool>, String> {
        self.typed(key, "a boolean", Value::as_bool)
    }

    pub fn opt_str(&mut self, key: &str) -> Result<Option<String>, String> {
        self.typed(key, "a string", |v| v.as_str().map(str::to_string))
    }

    pub fn opt_list(&mut self, key: &str) -> Result<Option<Vec<Value>>, String> {
        self.typed(key, "a list", |v| match v {
            Value::List(l) => Some(l.clone()),
            _ => None,
        })
    }

    pub fn req_i64(&mut self, key: &str) -> Result<i64, String> {
        self.opt_i64(key)?.ok_or_else(|| missing(key))
    }

    pub fn req_usize(&mut self, key: &str) -> Result<usize, String> {
        self.opt_usize(key)?.ok_or_else(|| missing(key))
    }

    pub fn req_f64(&mut self, key: &str) -> Result<f64, String> {
        self.opt_f64(key)?.ok_or_else(|| missing(key))
    }

    pub fn req_str(&mut self, key: &str) -> Result<String, String> {
        self.opt_str(key)?.ok_or_else(|| missing(key))
    }

    /// A nested component built from a child `_target_` node.
    pub fn opt_component<T: 'static>(&mut self, key: &str) -> Result<Option<T>, String> {
        self.used.insert(key.to_string());
        match self.args.remove(key) {
            None | Some(Arg::Value(Value::Null)) => Ok(None),
            Some(Arg::Component(b)) => b
                .downcast::<T>()
                .map(|b| Some(*b))
                .map_err(|_| format!("`{key}` has the wrong component type for this argument")),
            Some(other) => {
                self.args.insert(key.to_string(), other);
                Err(format!("`{key}` must be a node with `{TARGET_KEY}`"))
            }
        }
    }

    pub fn component<T: 'static>(&mut self, key: &str) -> Result<T, String> {
        self.opt_component(key)?.ok_or_else(|| missing(key))
    }

    /// A list whose elements are all `_target_` nodes. Absent means empty.
    pub fn components<T: 'static>(&mut self, key: &str) -> Result<Vec<T>, String> {
        self.used.insert(key.to_string());
        match self.args.remove(key) {
            None | Some(Arg::Value(Value::Null)) => Ok(Vec::new()),
            Some(Arg::Value(Value::List(l))) if l.is_empty() => Ok(Vec::new()),
            Some(Arg::Components(items)) => items
                .into_iter()
                .enumerate()
                .map(|(i, b)| b.downcast::<T>().map(|b| *b).map_err(|_| format!("`{key}[{i}]` has the wrong component type")))
                .collect(),
            Some(Arg::Component(b)) => b
                .downcast::<T>()
                .map(|b| vec![*b])
                .map_err(|_| format!("`{key}` has the wrong component type")),
            Some(other) => {
                self.args.insert(key.to_string(), other);
                Err(format!("`{key}` must be a list of nodes with `{TARGET_KEY}`"))
            }
        }
    }

    /// Fail on any argument the constructor did not consume.
    pub fn finish(&self) -> Result<(), String> {
        let unused: Vec<&str> = self.args.keys().filter(|k| !self.used.contains(*k)).map(String::as_str).collect();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(format!("unexpected argument(s): {}", unused.join(", ")))
        }
    }
}

fn missing(key: &str) -> String {
    format!("missing required argument `{key}`")
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() { key.to_string() } else { format!("{prefix}.{key}") }
}

fn is_target_node(v: &Value) -> bool {
    v.as_map().is_some_and(|m| m.contains_key(TARGET_KEY))
}

/// Instantiate `node`. Errors report `<root>` as the path.
pub fn instantiate<C>(node: &ConfigNode, registry: &Registry<C>, ctx: &C) -> Result<Box<dyn Any>, ConfigError> {
    instantiate_at("", node, registry, ctx)
}

/// Instantiate `node` located at dotted `path` in the full tree.
pub fn instantiate_at<C>(path: &str, node: &ConfigNode, registry: &Registry<C>, ctx: &C) -> Result<Box<dyn Any>, ConfigError> {
    let shown = if path.is_empty() { "<root>".to_string() } else { path.to_string() };
    let target = match node.get(TARGET_KEY) {
        None => return Err(ConfigError::MissingTarget { path: shown }),
        Some(Value::Str(t)) => t.clone(),
        Some(other) => {
            return Err(ConfigError::Construct {
                path: shown,
                target: String::new(),
                message: format!("`{TARGET_KEY}` must be a string, found {}", other.type_name()),
            })
        }
    };
    let ctor = registry
        .constructors
        .get(&target)
        .ok_or_else(|| ConfigError::UnknownTarget { path: shown.clone(), target: target.clone() })?;

    let mut args = BTreeMap::new();
    for (k, v) in node.iter() {
        if k == TARGET_KEY {
            continue;
        }
        let child_path = join(path, k);
        let arg = match v {
            Value::Map(m) if m.contains_key(TARGET_KEY) => Arg::Component(instantiate_at(&child_path, m, registry, ctx)?),
            Value::List(items) if !items.is_empty() && items.iter().all(is_target_node) => {
                let mut built = Vec::with_capacity(items.len());
                for (i, item) in items.iter().enumerate() {
                    let m = item.as_map().expect("checked");
                    built.push(instantiate_at(&format!("{child_path}[{i}]"), m, registry, ctx)?);
                }
                Arg::Components(built)
            }
            Value::List(items) if items.iter().any(is_target_node) => {
                return Err(ConfigError::Construct {
                    path: child_path,
                    target,
                    message: "list mixes component nodes and plain values".into(),
                })
            }
            other => Arg::Value(other.clone()),
        };
        args.insert(k.clone(), arg);
    }
    let mut args = Args { path: shown.clone(), target: target.clone(), args, used: BTreeSet::new() };
    let built = ctor(&mut args, ctx).map_err(|message| ConfigError::Construct { path: shown.clone(), target: target.clone(), message })?;
    args.finish().map_err(|message| ConfigError::Construct { path: shown, target, message })?;
    Ok(built)
}

/// Instantiate and downcast to `T`.
pub fn instantiate_as<T: 'static, C>(path: &str, node: &ConfigNode, registry: &Registry<C>, ctx: &C) -> Result<T, ConfigError> {
    let target = node.target().unwrap_or_default().to_string();
    let built = instantiate_at(path, node, registry, ctx)?;
    built.downcast::<T>().map(|b| *b).map_err(|_| ConfigError::Construct {
        path: if path.is_empty() { "<root>".into() } else { path.to_string() },
        target,
        message: format!("component is not a {}", std::any::type_name::<T>()),
    })
}
