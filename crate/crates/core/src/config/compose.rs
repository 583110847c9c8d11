//! Composition of a config file with the files it includes.
//!
//! A file may carry a top-level `defaults:` list. Each entry is either
//! `group: name`, which loads `<search_root>/<group>/<name>[.yaml]` and
//! mounts it under key `group`, or a bare file name, which loads a sibling
//! of the including file and merges it at the root. Includes apply in list
//! order, then the including file's own keys; merging is leaf-level.

use super::{parse_document, ConfigError, ConfigNode, Value};
use std::fs;
use std::path::{Path, PathBuf};

/// Name of the include list key.
pub const INCLUDE_KEY: &str = "defaults";

/// Load `root_file` (relative paths resolve against `search_root`) and
/// compose all includes.
pub fn load_config_tree(root_file: &Path, search_root: &Path) -> Result<ConfigNode, ConfigError> {
    let path = if root_file.is_absolute() { root_file.to_path_buf() } else { search_root.join(root_file) };
    let path = with_yaml_ext(path);
    let mut stack = Vec::new();
    load_file(&path, search_root, &mut stack)
}

fn with_yaml_ext(path: PathBuf) -> PathBuf {
    if path.exists() || path.extension().is_some_and(|e| e == "yaml" || e == "yml") {
        return path;
    }
    let mut alt = path.clone().into_os_string();
    alt.push(".yaml");
    let alt = PathBuf::from(alt);
    if alt.exists() { alt } else { path }
}

fn load_file(path: &Path, search_root: &Path, stack: &mut Vec<PathBuf>) -> Result<ConfigNode, ConfigError> {
    let display = path.display().to_string();
    if !path.is_file() {
        return Err(ConfigError::MissingFile { path: display });
    }
    let canonical = fs::canonicalize(path).map_err(|source| ConfigError::Io { path: display.clone(), source })?;
    if let Some(first) = stack.iter().position(|p| p == &canonical) {
        let mut chain: Vec<String> = stack[first..].iter().map(|p| p.display().to_string()).collect();
        chain.push(canonical.display().to_string());
        return Err(ConfigError::IncludeCycle { chain: chain.join(" -> ") });
    }
    let src = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: display.clone(), source })?;
    let mut own = parse_document(&src, &display)?;
    let includes = own.remove(INCLUDE_KEY);

    stack.push(canonical);
    let mut tree = ConfigNode::new();
    if let Some(includes) = includes {
        let Value::List(entries) = includes else {
            stack.pop();
            return Err(bad(&display, format!("`{INCLUDE_KEY}` must be a list")));
        };
        let dir = path.parent().unwrap_or(Path::new("."));
        for entry in entries {
            let result = include_entry(&entry, dir, search_root, &display, stack);
            match result {
                Ok(sub) => tree.merge_from(sub),
                Err(e) => {
                    stack.pop();
                    return Err(e);
                }
            }
        }
    }
    stack.pop();
    tree.merge_from(own);
    Ok(tree)
}

fn include_entry(
    entry: &Value,
    dir: &Path,
    search_root: &Path,
    file: &str,
    stack: &mut Vec<PathBuf>,
) -> Result<ConfigNode, ConfigError> {
    match entry {
        Value::Str(name) => {
            check_relative(name, file)?;
            load_file(&with_yaml_ext(dir.join(name)), search_root, stack)
        }
        Value::Map(m) if m.len() == 1 => {
            let (group, name) = m.iter().next().expect("one entry");
            let Some(name) = name.as_str() else {
                return Err(bad(file, format!("include `{group}` must name a file")));
            };
            check_relative(group, file)?;
            check_relative(name, file)?;
            let sub = load_file(&with_yaml_ext(search_root.join(group).join(name)), search_root, stack)?;
            let mut mounted = ConfigNode::new();
            mounted.insert(group.clone(), sub);
            Ok(mounted)
        }
        other => Err(bad(file, format!("expected `group: file` or a file name, found {}", other.type_name()))),
    }
}

fn check_relative(name: &str, file: &str) -> Result<(), ConfigError> {
    let p = Path::new(name);
    if name.is_empty() || p.is_absolute() {
        return Err(bad(file, format!("include path `{name}` must be relative and non-empty")));
    }
    Ok(())
}

fn bad(file: &str, message: String) -> ConfigError {
    ConfigError::BadInclude { file: file.to_string(), message }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(root: &Path, rel: &str, text: &str) {
        let p = root.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, text).unwrap();
    }

    #[test]
    fn groups_mount_and_root_wins() {
        let d = tempfile::tempdir().unwrap();
        let r = d.path();
        write(r, "model/unet.yaml", "_target_: models.unet\nnum_classes: 8\n");
        write(r, "task/semseg.yaml", "lr: 0.001\nname: seg\n");
        write(r, "experiment/e.yaml", "defaults:\n  - model: unet\n  - task: semseg.yaml\ntask:\n  lr: 0.01\n");
        let t = load_config_tree(Path::new("experiment/e.yaml"), r).unwrap();
        assert_eq!(t.get_path("model._target_"), Some(&Value::from("models.unet")));
        assert_eq!(t.get_path("task.lr"), Some(&Value::Float(0.01)));
        assert_eq!(t.get_path("task.name"), Some(&Value::from("seg")));
        assert!(t.get(INCLUDE_KEY).is_none());
        assert_eq!(t, load_config_tree(Path::new("experiment/e"), r).unwrap());
    }

    #[test]
    fn later_includes_override_earlier() {
        let d = tempfile::tempdir().unwrap();
        let r = d.path();
        write(r, "a.yaml", "x: 1\ny: 1\n");
        write(r, "b.yaml", "x: 2\n");
        write(r, "root.yaml", "defaults: [a.yaml, b.yaml]\n");
        let t = load_config_tree(Path::new("root.yaml"), r).unwrap();
        assert_eq!(t.get("x"), Some(&Value::Int(2)));
        assert_eq!(t.get("y"), Some(&Value::Int(1)));
    }

    #[test]
    fn cycles_and_missing_files() {
        let d = tempfile::tempdir().unwrap();
        let r = d.path();
        write(r, "a.yaml", "defaults: [b.yaml]\n");
        write(r, "b.yaml", "defaults: [a.yaml]\n");
        write(r, "self.yaml", "defaults: [self.yaml]\n");
        write(r, "m.yaml", "defaults:\n  - model: nope\n");
        assert!(matches!(load_config_tree(Path::new("a.yaml"), r), Err(ConfigError::IncludeCycle { .. })));
        assert!(matches!(load_config_tree(Path::new("self.yaml"), r), Err(ConfigError::IncludeCycle { .. })));
        assert!(matches!(load_config_tree(Path::new("m.yaml"), r), Err(ConfigError::MissingFile { .. })));
        assert!(matches!(load_config_tree(Path::new("zzz.yaml"), r), Err(ConfigError::MissingFile { .. })));
    }

    #[test]
    fn diamond_is_not_a_cycle() {
        let d = tempfile::tempdir().unwrap();
        let r = d.path();
        write(r, "leaf.yaml", "v: 1\n");
        write(r, "l.yaml", "defaults: [leaf.yaml]\n");
        write(r, "rr.yaml", "defaults: [leaf.yaml]\n");
        write(r, "top.yaml", "defaults: [l.yaml, rr.yaml]\n");
        assert_eq!(load_config_tree(Path::new("top.yaml"), r).unwrap().get("v"), Some(&Value::Int(1)));
    }

    #[test]
    fn parse_errors_name_the_file() {
        let d = tempfile::tempdir().unwrap();
        let r = d.path();
        write(r, "bad.yaml", "a: 1\na: 2\n");
        write(r, "top.yaml", "defaults: [bad.yaml]\n");
        match load_config_tree(Path::new("top.yaml"), r) {
            Err(ConfigError::DuplicateKey { file, line, .. }) => {
                assert!(file.ends_with("bad.yaml"));
                assert_eq!(line, 2);
            }
            other => panic!("{other:?}"),
        }
    }
}
