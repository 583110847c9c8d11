use docseg::config::{load_config_tree, Value};
use docseg::runner::{build, compose, default_registry, RunInvocation};
use std::path::{Path, PathBuf};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn invocation(experiment: &str, overrides: &[&str]) -> RunInvocation {
    RunInvocation {
        experiment: experiment.into(),
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
        config_dir: configs(),
        runs_dir: PathBuf::from("unused"),
    }
}

#[test]
fn every_experiment_builds() {
    let registry = default_registry();
    for entry in std::fs::read_dir(configs().join("experiment")).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let tmp = tempfile::tempdir().unwrap();
        let node = compose(&invocation(&name, &["model.base_channels=2"])).unwrap();
        let built = build(node, &name, tmp.path(), &registry).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(built.task.model.num_classes(), 8, "{name}");
        assert!(tmp.path().join("config.yaml").is_file());
        assert!(tmp.path().join("metrics.csv").is_file());
    }
}

#[test]
fn groups_mount_under_their_keys() {
    let tree = load_config_tree(Path::new("experiment/smoke.yaml"), &configs()).unwrap();
    assert_eq!(tree.get_path("task.optimizer._target_"), Some(&Value::Str("optimizers.adam".into())));
    assert_eq!(tree.get_path("task.loss._target_"), Some(&Value::Str("losses.cross_entropy".into())));
    assert_eq!(tree.get_path("model.base_channels"), Some(&Value::Int(16)));
    assert_eq!(tree.get_path("model.num_classes"), Some(&Value::Str("${datamodule:num_classes}".into())));
    assert_eq!(tree.get_path("trainer.max_epochs"), Some(&Value::Int(10)));
    assert!(tree.get("defaults").is_none());
}

#[test]
fn full_recipe_has_no_seed_so_plus_seed_adds_it() {
    let tree = compose(&invocation("cb55_full_run_unet.yaml", &[])).unwrap();
    assert!(tree.get("seed").is_none());
    assert!(compose(&invocation("cb55_full_run_unet.yaml", &["seed=1"])).is_err());
    let tree = compose(&invocation("cb55_full_run_unet.yaml", &["datamodule.selection_train=15", "+seed=2149823"])).unwrap();
    assert_eq!(tree.get_path("datamodule.selection_train"), Some(&Value::Int(15)));
    assert_eq!(tree.get_path("seed"), Some(&Value::Int(2149823)));
    let candidates = tree.get_path("seed_candidates").unwrap();
    assert!(matches!(candidates, Value::List(l) if l.len() == 3 && l[0] == Value::Int(2149823)));
}

#[test]
fn resolved_snapshot_carries_exported_values() {
    let tmp = tempfile::tempdir().unwrap();
    let node = compose(&invocation("smoke", &[])).unwrap();
    let built = build(node, "smoke", tmp.path(), &default_registry()).unwrap();
    let snap = built.resolved.node();
    assert_eq!(snap.get_path("model.num_classes"), Some(&Value::Int(8)));
    assert_eq!(snap.get_path("task.metric.num_classes"), Some(&Value::Int(8)));
    assert_eq!(snap.get_path("seed"), Some(&Value::Int(2149823)));
    assert!(!built.resolved.to_canonical_string().contains("${"));
}

#[test]
fn unknown_component_argument_names_its_path() {
    let tmp = tempfile::tempdir().unwrap();
    let node = compose(&invocation("smoke", &["+task.optimizer.momentum=0.9"])).unwrap();
    let err = build(node, "smoke", tmp.path(), &default_registry()).err().unwrap();
    assert_eq!(err.exit_code(), 2);
    assert!(err.message.contains("task.optimizer") && err.message.contains("momentum"), "{}", err.message);
}
