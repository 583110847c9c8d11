//! One experiment run from configuration files to a populated run directory.

use crate::callbacks::{shared, CallbackRegistry, CheckCompatibility, GradientStats, SaveValidationOutput, SharedCallback};
use crate::config::{
    apply_overrides, instantiate_as, Args, load_config_tree, parse_override, resolve_interpolations, snapshot, ConfigError, ConfigNode,
    Providers, Registry, ResolvedConfig, Value,
};
use crate::data::{ClassEncoding, CroppedPages, CroppedPagesConfig, DataError, DataModule};
use crate::eval::{ConfusionMetric, EvalError, Metric, MetricKind};
use crate::logging::{ConsoleSink, CsvSink, LoggerSink, MultiLogger, METRICS_FILE};
use crate::model::{build_unet, ComposedModel, UNetConfig};
use crate::nn::{Adam, AdamConfig, CrossEntropy, Loss, Optimizer, Sgd};
use crate::seed::{derive, seed_everything, SeedState};
use crate::task::{fit, test, Device, RunManifest, TaskError, TaskSpec, TrainPlan, Trainer};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

/// Environment variable overriding the run-output root.
pub const RUNS_DIR_ENV: &str = "DOCSEG_RUNS_DIR";
/// Environment variable overriding the configuration root.
pub const CONFIG_DIR_ENV: &str = "DOCSEG_CONFIG_DIR";
pub const DEFAULT_RUNS_DIR: &str = "runs";
pub const DEFAULT_CONFIG_DIR: &str = "configs";
pub const EXPERIMENT_DIR: &str = "experiment";

/// What went wrong, mapped to a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Training,
    Evaluation,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Training => 4,
            ErrorCategory::Evaluation => 5,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ErrorCategory::Config => "config error",
            ErrorCategory::Data => "data error",
            ErrorCategory::Training => "training error",
            ErrorCategory::Evaluation => "evaluation error",
        }
    }
}

#[derive(Debug)]
pub struct RunError {
    pub category: ErrorCategory,
    pub message: String,
}

impl RunError {
    fn new(category: ErrorCategory, message: impl fmt::Display) -> Self {
        RunError { category, message: message.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        self.category.exit_code()
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.category.label(), self.message)
    }
}

impl std::error::Error for RunError {}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::new(ErrorCategory::Config, e)
    }
}

impl From<DataError> for RunError {
    fn from(e: DataError) -> Self {
        RunError::new(ErrorCategory::Data, e)
    }
}

fn task_error(e: TaskError, stage: ErrorCategory) -> RunError {
    let category = match &e {
        TaskError::Data(_) => ErrorCategory::Data,
        TaskError::Eval(EvalError::Data { .. }) => ErrorCategory::Data,
        TaskError::Eval(_) => ErrorCategory::Evaluation,
        TaskError::InvalidPlan(_) | TaskError::Device(_) => ErrorCategory::Config,
        _ => stage,
    };
    RunError::new(category, e)
}

/// Parsed command line of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunInvocation {
    /// Experiment file name under `configs/experiment/`, or a path to any
    /// config file (for example a run snapshot).
    pub experiment: String,
    pub overrides: Vec<String>,
    pub config_dir: PathBuf,
    pub runs_dir: PathBuf,
}

impl RunInvocation {
    /// Split `experiment=<name>` from the override tokens. Directories come
    /// from the environment or the defaults.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<Self, RunError> {
        let mut experiment = None;
        let mut overrides = Vec::new();
        for t in tokens {
            let t = t.as_ref();
            match t.strip_prefix("experiment=") {
                Some(name) if experiment.is_none() => experiment = Some(name.to_string()),
                Some(_) => return Err(RunError::new(ErrorCategory::Config, "`experiment=` given more than once")),
                None => overrides.push(t.to_string()),
            }
        }
        let experiment = experiment
            .filter(|e| !e.is_empty())
            .ok_or_else(|| RunError::new(ErrorCategory::Config, "missing `experiment=<file>`"))?;
        let env_or = |var: &str, default: &str| std::env::var_os(var).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(default));
        Ok(RunInvocation {
            experiment,
            overrides,
            config_dir: env_or(CONFIG_DIR_ENV, DEFAULT_CONFIG_DIR),
            runs_dir: env_or(RUNS_DIR_ENV, DEFAULT_RUNS_DIR),
        })
    }

    /// The experiment file this invocation loads.
    pub fn experiment_path(&self) -> PathBuf {
        let p = Path::new(&self.experiment);
        if p.components().count() > 1 || p.is_absolute() {
            let mut p = p.to_path_buf();
            if p.extension().is_none() {
                p.set_extension("yaml");
            }
            return p;
        }
        let mut p = self.config_dir.join(EXPERIMENT_DIR).join(&self.experiment);
        if p.extension().is_none() {
            p.set_extension("yaml");
        }
        p
    }

    fn default_name(&self) -> String {
        Path::new(&self.experiment).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into())
    }
}

/// Context handed to every registry constructor.
pub struct BuildContext {
    pub run_dir: PathBuf,
    pub seeds: SeedState,
}

/// Loss, optimizer, metric and test settings of a segmentation task; the
/// model is built separately from the top-level `model` node.
pub struct TaskParts {
    pub loss: Box<dyn Loss<f32>>,
    pub optimizer: Box<dyn Optimizer<f32>>,
    pub metric: Box<dyn Metric>,
    pub test_checkpoint: String,
    pub ignore_boundary: bool,
}

fn boxed<T: 'static>(v: T) -> Result<Box<dyn std::any::Any>, String> {
    Ok(Box::new(v))
}

/// Registry with every built-in component.
pub fn default_registry() -> Registry<BuildContext> {
    let mut r = Registry::new();
    r.register("datamodules.cropped_pages", |a: &mut Args, _: &BuildContext| {
        let d = CroppedPagesConfig::default();
        let input_size = match a.value("input_size")? {
            None => d.input_size,
            Some(Value::Int(i)) if i > 0 => Some(i as usize),
            Some(v) => return Err(format!("`input_size` must be a positive integer or null, found {v:?}")),
        };
        let cfg = CroppedPagesConfig {
            root: PathBuf::from(a.req_str("root")?),
            crop_size: a.opt_usize("crop_size")?.unwrap_or(d.crop_size),
            overlap: a.opt_f64("overlap")?.unwrap_or(d.overlap),
            input_size,
            selection_train: a.opt_usize("selection_train")?,
            test_crop_size: a.opt_usize("test_crop_size")?,
            test_overlap: a.opt_f64("test_overlap")?.unwrap_or(d.test_overlap),
            precropped: a.opt_bool("precropped")?.unwrap_or(d.precropped),
        };
        a.finish()?;
        let dm = CroppedPages::new(cfg, ClassEncoding::hisdb()).map_err(|e| e.to_string())?;
        boxed(Box::new(dm) as Box<dyn DataModule>)
    });
    r.register("models.unet", |a, ctx| {
        let d = UNetConfig::default();
        let cfg = UNetConfig {
            num_classes: a.opt_usize("num_classes")?.unwrap_or(d.num_classes),
            base_channels: a.opt_usize("base_channels")?.unwrap_or(d.base_channels),
            depth: a.opt_usize("depth")?.unwrap_or(d.depth),
            in_channels: a.opt_usize("in_channels")?.unwrap_or(d.in_channels),
        };
        a.finish()?;
        boxed(build_unet::<f32>(&cfg, ctx.seeds.init).map_err(|e| e.to_string())?)
    });
    r.register("tasks.semantic_segmentation", |a, _| {
        let loss = a.opt_component::<Box<dyn Loss<f32>>>("loss")?.unwrap_or_else(|| Box::new(CrossEntropy));
        let optimizer = a
            .opt_component::<Box<dyn Optimizer<f32>>>("optimizer")?
            .unwrap_or_else(|| Box::new(Adam::new(AdamConfig::default())));
        let metric = a.component::<Box<dyn Metric>>("metric")?;
        let parts = TaskParts {
            loss,
            optimizer,
            metric,
            test_checkpoint: a.opt_str("test_checkpoint")?.unwrap_or_else(|| "best".into()),
            ignore_boundary: a.opt_bool("ignore_boundary")?.unwrap_or(false),
        };
        a.finish()?;
        boxed(parts)
    });
    r.register("losses.cross_entropy", |a, _| {
        a.finish()?;
        boxed(Box::new(CrossEntropy) as Box<dyn Loss<f32>>)
    });
    r.register("optimizers.adam", |a, _| {
        let d = AdamConfig::default();
        let cfg = AdamConfig {
            lr: a.opt_f64("lr")?.unwrap_or(d.lr),
            beta1: a.opt_f64("beta1")?.unwrap_or(d.beta1),
            beta2: a.opt_f64("beta2")?.unwrap_or(d.beta2),
            eps: a.opt_f64("eps")?.unwrap_or(d.eps),
            weight_decay: a.opt_f64("weight_decay")?.unwrap_or(d.weight_decay),
        };
        a.finish()?;
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
            return Err(format!("`lr` must be positive, found {}", cfg.lr));
        }
        boxed(Box::new(Adam::<f32>::new(cfg)) as Box<dyn Optimizer<f32>>)
    });
    r.register("optimizers.sgd", |a, _| {
        let lr = a.req_f64("lr")?;
        let momentum = a.opt_f64("momentum")?.unwrap_or(0.0);
        a.finish()?;
        boxed(Box::new(Sgd::<f32>::new(lr, momentum)) as Box<dyn Optimizer<f32>>)
    });
    for (target, kind) in [
        ("metrics.miou", MetricKind::MeanIou),
        ("metrics.f1", MetricKind::MacroF1),
        ("metrics.pixel_accuracy", MetricKind::PixelAccuracy),
    ] {
        r.register(target, move |a, _| {
            let n = a.req_usize("num_classes")?;
            a.finish()?;
            if n < 2 {
                return Err(format!("`num_classes` must be at least 2, found {n}"));
            }
            boxed(Box::new(ConfusionMetric::new(kind, n)) as Box<dyn Metric>)
        });
    }
    r.register("callbacks.gradient_stats", |a, _| {
        let every_n_steps = a.opt_i64("every_n_steps")?.unwrap_or(50).max(0) as u64;
        a.finish()?;
        boxed(shared(GradientStats { every_n_steps }))
    });
    r.register("callbacks.save_validation_output", |a, _| {
        let subdir = a.opt_str("subdir")?.unwrap_or_else(|| "val_output".into());
        let every = a.opt_usize("every_n_epochs")?.unwrap_or(1);
        a.finish()?;
        boxed(shared(SaveValidationOutput::new(&subdir, every)))
    });
    r.register("callbacks.check_compatibility", |a, _| {
        a.finish()?;
        boxed(shared(CheckCompatibility))
    });
    r.register("loggers.csv", |a, ctx| {
        let file = a.opt_str("file")?.unwrap_or_else(|| METRICS_FILE.into());
        a.finish()?;
        let sink = CsvSink::create(&ctx.run_dir.join(file)).map_err(|e| e.to_string())?;
        boxed(Box::new(sink) as Box<dyn LoggerSink>)
    });
    r.register("loggers.console", |a, _| {
        let skip = a
            .opt_list("skip_prefixes")?
            .unwrap_or_default()
            .into_iter()
            .map(|v| v.as_str().map(str::to_string).ok_or_else(|| "`skip_prefixes` must list strings".to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        a.finish()?;
        boxed(Box::new(ConsoleSink::new(skip)) as Box<dyn LoggerSink>)
    });
    r
}

/// Compose the experiment file and apply the overrides, without resolving
/// interpolations.
pub fn compose(inv: &RunInvocation) -> Result<ConfigNode, RunError> {
    let directives = inv.overrides.iter().map(|t| parse_override(t)).collect::<Result<Vec<_>, _>>()?;
    let path = inv.experiment_path();
    if !path.is_file() {
        return Err(RunError::new(ErrorCategory::Config, format!("experiment config not found: {}", path.display())));
    }
    let tree = load_config_tree(&path, &inv.config_dir)?;
    Ok(apply_overrides(&tree, &directives)?)
}

fn fresh_seed() -> u64 {
    let nanos = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0);
    derive(nanos, u64::from(std::process::id()), 0) >> 33
}

/// Read `seed`, or draw one and write it into the tree so the snapshot
/// records it.
pub fn ensure_seed(node: &mut ConfigNode) -> Result<u64, RunError> {
    match node.get("seed") {
        None | Some(Value::Null) => {
            let s = fresh_seed();
            node.insert("seed", Value::Int(s as i64));
            Ok(s)
        }
        Some(Value::Int(i)) if *i >= 0 => Ok(*i as u64),
        Some(other) => Err(RunError::new(ErrorCategory::Config, format!("`seed` must be a non-negative integer, found {other:?}"))),
    }
}

/// Create `<root>/<timestamp>_<name>`, adding `_1`, `_2`, ... when taken.
pub fn create_run_dir(root: &Path, name: &str) -> Result<PathBuf, RunError> {
    let io = |p: &Path, e: std::io::Error| RunError::new(ErrorCategory::Config, format!("cannot create run directory {}: {e}", p.display()));
    fs::create_dir_all(root).map_err(|e| io(root, e))?;
    let safe: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect();
    let base = format!("{}_{}", chrono::Local::now().format("%Y-%m-%d_%H-%M-%S"), safe);
    for n in 0u32.. {
        let candidate = if n == 0 { root.join(&base) } else { root.join(format!("{base}_{n}")) };
        match fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io(&candidate, e)),
        }
    }
    unreachable!("u32 suffixes exhausted")
}

fn section<'a>(node: &'a ConfigNode, key: &str) -> Result<&'a ConfigNode, RunError> {
    node.child(key).ok_or_else(|| RunError::new(ErrorCategory::Config, format!("missing `{key}` section")))
}

/// Read the `trainer` section.
pub fn train_plan(node: &ConfigNode, seed: u64) -> Result<TrainPlan, RunError> {
    let t = section(node, "trainer")?;
    let bad = |m: String| RunError::new(ErrorCategory::Config, format!("trainer: {m}"));
    let count = |key: &str| match t.get(key) {
        Some(Value::Int(i)) if *i >= 1 => Ok(*i as usize),
        Some(v) => Err(bad(format!("`{key}` must be a positive integer, found {v:?}"))),
        None => Err(bad(format!("missing `{key}`"))),
    };
    let device = match t.get("device").and_then(Value::as_str).unwrap_or("cpu") {
        "cpu" => Device::Cpu,
        "accelerator" | "gpu" => Device::Accelerator,
        other => return Err(bad(format!("unknown device `{other}`"))),
    };
    for key in t.keys() {
        if !["max_epochs", "batch_size", "device"].contains(&key.as_str()) {
            return Err(bad(format!("unexpected key `{key}`")));
        }
    }
    Ok(TrainPlan { max_epochs: count("max_epochs")?, batch_size: count("batch_size")?, seed, device })
}

fn named_components<T: 'static>(node: &ConfigNode, key: &str, reg: &Registry<BuildContext>, ctx: &BuildContext) -> Result<Vec<T>, RunError> {
    let Some(group) = node.get(key) else { return Ok(Vec::new()) };
    let group = match group {
        Value::Null => return Ok(Vec::new()),
        Value::Map(m) => m,
        other => return Err(RunError::new(ErrorCategory::Config, format!("`{key}` must be a map, found {}", other.type_name()))),
    };
    let mut out = Vec::new();
    for (name, v) in group.iter() {
        match v {
            Value::Null => {}
            Value::Map(m) => out.push(instantiate_as::<T, _>(&format!("{key}.{name}"), m, reg, ctx)?),
            other => {
                return Err(RunError::new(ErrorCategory::Config, format!("`{key}.{name}` must be a component or null, found {}", other.type_name())))
            }
        }
    }
    Ok(out)
}

/// Everything built from a resolved configuration.
pub struct BuiltRun {
    pub resolved: ResolvedConfig,
    pub data: Box<dyn DataModule>,
    pub task: TaskSpec,
    pub plan: TrainPlan,
    pub trainer: Trainer,
    pub test_checkpoint: String,
    pub ignore_boundary: bool,
}

/// Resolve and instantiate `node` into `run_dir`, writing the snapshot.
pub fn build(node: ConfigNode, name: &str, run_dir: &Path, registry: &Registry<BuildContext>) -> Result<BuiltRun, RunError> {
    let mut node = node;
    let seed = ensure_seed(&mut node)?;
    let ctx = BuildContext { run_dir: run_dir.to_path_buf(), seeds: seed_everything(seed) };

    let dm_node = resolve_interpolations(section(&node, "datamodule")?, &Providers::new())?;
    let data = instantiate_as::<Box<dyn DataModule>, _>("datamodule", dm_node.node(), registry, &ctx)?;
    let mut providers = Providers::new();
    providers.insert("datamodule".into(), data.exports());
    let resolved = resolve_interpolations(&node, &providers)?;
    snapshot(&resolved, run_dir)?;
    let root = resolved.node();

    let model = instantiate_as::<ComposedModel<f32>, _>("model", section(root, "model")?, registry, &ctx)?;
    let parts = instantiate_as::<TaskParts, _>("task", section(root, "task")?, registry, &ctx)?;
    let plan = train_plan(root, seed)?;

    let mut callbacks = CallbackRegistry::new();
    for cb in named_components::<SharedCallback>(root, "callbacks", registry, &ctx)? {
        callbacks.register_default(cb).map_err(|e| RunError::new(ErrorCategory::Config, e))?;
    }
    let mut logger = MultiLogger::new();
    for sink in named_components::<Box<dyn LoggerSink>>(root, "loggers", registry, &ctx)? {
        logger.add_sink(sink);
    }
    let known = ["name", "seed", "seed_candidates", "datamodule", "model", "task", "trainer", "callbacks", "loggers"];
    if let Some(k) = root.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(RunError::new(ErrorCategory::Config, format!("unexpected top-level key `{k}`")));
    }
    let task = TaskSpec { loss: parts.loss, optimizer: parts.optimizer, metric: parts.metric, model };
    Ok(BuiltRun {
        resolved: resolved.clone(),
        data,
        task,
        plan,
        trainer: Trainer::new(run_dir, name, callbacks, logger),
        test_checkpoint: parts.test_checkpoint,
        ignore_boundary: parts.ignore_boundary,
    })
}

/// Compose, build, fit and test. Returns the completed manifest.
pub fn run(inv: &RunInvocation) -> Result<RunManifest, RunError> {
    run_with(inv, &default_registry())
}

pub fn run_with(inv: &RunInvocation, registry: &Registry<BuildContext>) -> Result<RunManifest, RunError> {
    let node = compose(inv)?;
    let name = match node.get("name") {
        Some(Value::Str(s)) if !s.is_empty() => s.clone(),
        _ => inv.default_name(),
    };
    let run_dir = create_run_dir(&inv.runs_dir, &name)?;
    log::info!("run directory: {}", run_dir.display());
    let mut b = build(node, &name, &run_dir, registry)?;
    let mut manifest = fit(&mut b.task, &b.plan, b.data.as_mut(), &mut b.trainer).map_err(|e| task_error(e, ErrorCategory::Training))?;
    let out = test(
        &mut b.task,
        b.data.as_ref(),
        &mut manifest,
        &mut b.trainer,
        &b.test_checkpoint,
        b.plan.batch_size,
        b.ignore_boundary,
    )
    .map_err(|e| task_error(e, ErrorCategory::Evaluation))?;
    log::info!(
        "test: mIoU {:.4}, macro F1 {:.4} over {} page(s)",
        out.report.corpus.miou,
        out.report.corpus.macro_f1,
        out.predictions.len()
    );
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_split_experiment_from_overrides() {
        let inv = RunInvocation::from_tokens(&["experiment=a.yaml", "x.y=1", "+seed=3"]).unwrap();
        assert_eq!(inv.experiment, "a.yaml");
        assert_eq!(inv.overrides, vec!["x.y=1", "+seed=3"]);
        assert!(inv.experiment_path().ends_with("experiment/a.yaml"));
        let e = RunInvocation::from_tokens(&["x=1"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        let e = RunInvocation::from_tokens(&["experiment=a", "experiment=b"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn paths_bypass_the_experiment_dir() {
        let inv = RunInvocation::from_tokens(&["experiment=runs/x/config.yaml"]).unwrap();
        assert_eq!(inv.experiment_path(), PathBuf::from("runs/x/config.yaml"));
        let inv = RunInvocation::from_tokens(&["experiment=smoke"]).unwrap();
        assert!(inv.experiment_path().ends_with("experiment/smoke.yaml"));
    }

    #[test]
    fn run_dirs_never_collide() {
        let root = tempfile::tempdir().unwrap();
        let a = create_run_dir(root.path(), "exp").unwrap();
        let b = create_run_dir(root.path(), "exp").unwrap();
        assert_ne!(a, b);
        assert!(a.is_dir() && b.is_dir());
    }

    #[test]
    fn seed_is_inserted_when_absent() {
        let mut n = ConfigNode::new();
        let s = ensure_seed(&mut n).unwrap();
        assert_eq!(n.get("seed"), Some(&Value::Int(s as i64)));
        assert_eq!(ensure_seed(&mut n).unwrap(), s);
        n.insert("seed", Value::Int(-1));
        assert!(ensure_seed(&mut n).is_err());
    }

    #[test]
    fn plan_reads_trainer_section() {
        let node = crate::config::parse_document("trainer:\n  max_epochs: 50\n  batch_size: 16\n", "t").unwrap();
        let p = train_plan(&node, 7).unwrap();
        assert_eq!((p.max_epochs, p.batch_size, p.seed, p.device), (50, 16, 7, Device::Cpu));
        let node = crate::config::parse_document("trainer:\n  max_epochs: 0\n  batch_size: 16\n", "t").unwrap();
        assert!(train_plan(&node, 7).is_err());
    }
}
