//! Lifecycle hooks and the built-in callbacks.
//!
//! Dispatch order for `fit` followed by `test`:
//!
//! ```text
//! on_fit_start
//! per epoch:
//!     on_train_epoch_start
//!     on_train_batch_end        (each training batch)
//!     on_validation_batch_end   (each validation batch)
//!     on_validation_epoch_end
//! on_fit_end
//! on_test_batch_end             (each test batch)
//! ```
//!
//! Callbacks registered on the same hook run in registration order. An
//! error from a callback aborts the run.

use crate::data::{encode_label_png, Batch, ClassEncoding, LabelMap};
use crate::model::{check_compatibility, ComposedModel, Compatibility};
use crate::nn::ParamKind;
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub enum Hook {
    FitStart,
    TrainEpochStart,
    TrainBatchEnd,
    ValidationBatchEnd,
    ValidationEpochEnd,
    TestBatchEnd,
    FitEnd,
}

impl Hook {
    pub const ALL: [Hook; 7] = [
        Hook::FitStart,
        Hook::TrainEpochStart,
        Hook::TrainBatchEnd,
        Hook::ValidationBatchEnd,
        Hook::ValidationEpochEnd,
        Hook::TestBatchEnd,
        Hook::FitEnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Hook::FitStart => "on_fit_start",
            Hook::TrainEpochStart => "on_train_epoch_start",
            Hook::TrainBatchEnd => "on_train_batch_end",
            Hook::ValidationBatchEnd => "on_validation_batch_end",
            Hook::ValidationEpochEnd => "on_validation_epoch_end",
            Hook::TestBatchEnd => "on_test_batch_end",
            Hook::FitEnd => "on_fit_end",
        }
    }

    pub fn from_name(s: &str) -> Option<Hook> {
        Hook::ALL.into_iter().find(|h| h.name() == s)
    }
}

impl fmt::Display for Hook {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-batch results handed to batch-end hooks.
#[derive(Debug, Clone)]
pub struct BatchOutputs {
    pub loss: Option<f64>,
    /// Argmax labels, `(N, S, S)` row-major.
    pub predictions: Vec<u8>,
    pub size: usize,
}

/// What the dataset looks like, for checks against the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataInfo {
    pub num_classes: usize,
    pub in_channels: usize,
    pub input_size: usize,
}

/// Read-only view of the run for one hook invocation. Callbacks may add
/// scalars with [`CallbackContext::log`] and ask for an extra checkpoint.
pub struct CallbackContext<'a> {
    pub hook: Hook,
    pub epoch: usize,
    pub max_epochs: usize,
    pub global_step: u64,
    pub run_dir: &'a Path,
    pub model: &'a ComposedModel<f32>,
    pub data: DataInfo,
    pub encoding: &'a ClassEncoding,
    pub batch: Option<&'a Batch>,
    pub outputs: Option<&'a BatchOutputs>,
    pub batch_idx: usize,
    pub dataloader_idx: usize,
    /// Epoch-level metrics, filled at `on_validation_epoch_end`.
    pub metrics: &'a BTreeMap<String, f64>,
    logs: Vec<(String, f64)>,
    checkpoint_requested: bool,
}

impl<'a> CallbackContext<'a> {
    pub fn new(
        hook: Hook,
        run_dir: &'a Path,
        model: &'a ComposedModel<f32>,
        data: DataInfo,
        encoding: &'a ClassEncoding,
        metrics: &'a BTreeMap<String, f64>,
    ) -> Self {
        CallbackContext {
            hook,
            epoch: 0,
            max_epochs: 0,
            global_step: 0,
            run_dir,
            model,
            data,
            encoding,
            batch: None,
            outputs: None,
            batch_idx: 0,
            dataloader_idx: 0,
            metrics,
            logs: Vec::new(),
            checkpoint_requested: false,
        }
    }

    pub fn log(&mut self, key: impl Into<String>, value: f64) {
        self.logs.push((key.into(), value));
    }

    pub fn request_checkpoint(&mut self) {
        self.checkpoint_requested = true;
    }

    pub fn take_logs(&mut self) -> Vec<(String, f64)> {
        std::mem::take(&mut self.logs)
    }

    pub fn checkpoint_requested(&self) -> bool {
        self.checkpoint_requested
    }
}

/// User code injected at lifecycle hooks. Every hook defaults to a no-op.
pub trait Callback: Send {
    fn name(&self) -> &str;

    /// Hooks to register for when none are given explicitly.
    fn default_hooks(&self) -> Vec<Hook> {
        Hook::ALL.to_vec()
    }

    fn on_fit_start(&mut self, _ctx: &mut CallbackContext) -> Result<(), String> {
        Ok(())
    }
    fn on_train_epoch_start(&mut self, _ctx: &mut CallbackContext) -> Result<(), String> {
        Ok(())
    }
    fn on_train_batch_end(&mut self, _ctx: &mut CallbackContext) -> Result<(), String> {
        Ok(())
    }
    fn on_validation_batch_end(&mut self, _ctx: &mut CallbackContext) -> Result<(), String> {
        Ok(())
    }
    fn on_validation_epoch_end(&mut self, _ctx: &mut CallbackContext) -> Result<(), String> {
        Ok(())
    }
    fn on_test_batch_end(&mut self, _ctx: &mut CallbackContext) -> Result<(), String> {
        Ok(())
    }
    fn on_fit_end(&mut self, _ctx: &mut CallbackContext) -> Result<(), String> {
        Ok(())
    }
}

fn call(cb: &mut dyn Callback, hook: Hook, ctx: &mut CallbackContext) -> Result<(), String> {
    match hook {
        Hook::FitStart => cb.on_fit_start(ctx),
        Hook::TrainEpochStart => cb.on_train_epoch_start(ctx),
        Hook::TrainBatchEnd => cb.on_train_batch_end(ctx),
        Hook::ValidationBatchEnd => cb.on_validation_batch_end(ctx),
        Hook::ValidationEpochEnd => cb.on_validation_epoch_end(ctx),
        Hook::TestBatchEnd => cb.on_test_batch_end(ctx),
        Hook::FitEnd => cb.on_fit_end(ctx),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CallbackError {
    #[error("callback `{0}` is already registered")]
    Duplicate(String),
    #[error("callback `{0}` registered for no hooks")]
    NoHooks(String),
    #[error("callback `{callback}` failed in {hook}: {message}")]
    Failed { callback: String, hook: Hook, message: String },
}

pub type SharedCallback = Arc<Mutex<dyn Callback>>;

pub fn shared<C: Callback + 'static>(cb: C) -> SharedCallback {
    Arc::new(Mutex::new(cb))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct RegistrationId(pub usize);

struct Registration {
    callback: SharedCallback,
    hooks: Vec<Hook>,
}

#[derive(Default)]
pub struct CallbackRegistry {
    entries: Vec<Registration>,
}

impl CallbackRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn register(&mut self, callback: SharedCallback, hooks: &[Hook]) -> Result<RegistrationId, CallbackError> {
        let name = callback.lock().map(|c| c.name().to_string()).unwrap_or_else(|_| "<poisoned>".into());
        if hooks.is_empty() {
            return Err(CallbackError::NoHooks(name));
        }
        if self.entries.iter().any(|e| Arc::ptr_eq(&e.callback, &callback)) {
            return Err(CallbackError::Duplicate(name));
        }
        let mut hooks = hooks.to_vec();
        hooks.sort();
        hooks.dedup();
        self.entries.push(Registration { callback, hooks });
        Ok(RegistrationId(self.entries.len() - 1))
    }

    /// Register for the callback's default hooks.
    pub fn register_default(&mut self, callback: SharedCallback) -> Result<RegistrationId, CallbackError> {
        let hooks = callback.lock().map(|c| c.default_hooks()).unwrap_or_default();
        self.register(callback, &hooks)
    }

    pub fn dispatch(&self, hook: Hook, ctx: &mut CallbackContext) -> Result<(), CallbackError> {
        for e in self.entries.iter().filter(|e| e.hooks.contains(&hook)) {
            let mut cb = e.callback.lock().map_err(|_| CallbackError::Failed {
                callback: "<poisoned>".into(),
                hook,
                message: "callback panicked earlier".into(),
            })?;
            call(&mut *cb, hook, ctx).map_err(|message| CallbackError::Failed { callback: cb.name().to_string(), hook, message })?;
        }
        Ok(())
    }
}

/// Per-parameter gradient mean/std/min/max, logged as `grad/<param>/<stat>`.
pub struct GradientStats {
    pub every_n_steps: u64,
}

impl Callback for GradientStats {
    fn name(&self) -> &str {
        "gradient_stats"
    }

    fn default_hooks(&self) -> Vec<Hook> {
        vec![Hook::TrainBatchEnd]
    }

    fn on_train_batch_end(&mut self, ctx: &mut CallbackContext) -> Result<(), String> {
        if self.every_n_steps == 0 || ctx.global_step % self.every_n_steps != 0 {
            return Ok(());
        }
        let mut stats = Vec::new();
        ctx.model.visit(&mut |name, p| {
            if p.kind == ParamKind::Weight && !p.grad.is_empty() {
                stats.push((name.to_string(), gradient_summary(&p.grad)));
            }
        });
        for (name, [mean, std, min, max]) in stats {
            ctx.log(format!("grad/{name}/mean"), mean);
            ctx.log(format!("grad/{name}/std"), std);
            ctx.log(format!("grad/{name}/min"), min);
            ctx.log(format!("grad/{name}/max"), max);
        }
        Ok(())
    }
}

/// `[mean, population std, min, max]`.
pub fn gradient_summary(g: &[f32]) -> [f64; 4] {
    let n = g.len() as f64;
    let mean = g.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = g.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let min = g.iter().fold(f64::INFINITY, |m, &v| m.min(v as f64));
    let max = g.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    [mean, var.sqrt(), min, max]
}

/// Writes each validation batch's predictions, tiled horizontally, as a
/// ground-truth-format PNG under `<run_dir>/<subdir>/`.
pub struct SaveValidationOutput {
    pub subdir: String,
    pub every_n_epochs: usize,
    written: Vec<PathBuf>,
}

impl SaveValidationOutput {
    pub fn new(subdir: &str, every_n_epochs: usize) -> Self {
        SaveValidationOutput { subdir: subdir.to_string(), every_n_epochs, written: Vec::new() }
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}

impl Callback for SaveValidationOutput {
    fn name(&self) -> &str {
        "save_validation_output"
    }

    fn default_hooks(&self) -> Vec<Hook> {
        vec![Hook::ValidationBatchEnd]
    }

    fn on_validation_batch_end(&mut self, ctx: &mut CallbackContext) -> Result<(), String> {
        if self.every_n_epochs == 0 || (ctx.epoch + 1) % self.every_n_epochs != 0 {
            return Ok(());
        }
        let out = ctx.outputs.ok_or("no batch outputs")?;
        let s = out.size;
        let n = if s == 0 { 0 } else { out.predictions.len() / (s * s) };
        let mut tiled = vec![0u8; n * s * s];
        for k in 0..n {
            for row in 0..s {
                let src = &out.predictions[(k * s + row) * s..(k * s + row + 1) * s];
                tiled[row * n * s + k * s..row * n * s + (k + 1) * s].copy_from_slice(src);
            }
        }
        let labels = LabelMap::from_classes(n * s, s, tiled);
        let png = encode_label_png(&labels, ctx.encoding).map_err(|e| e.to_string())?;
        let dir = ctx.run_dir.join(&self.subdir);
        fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        let path = dir.join(format!("epoch{:03}_batch{:04}.png", ctx.epoch, ctx.batch_idx));
        fs::write(&path, png).map_err(|e| format!("{}: {e}", path.display()))?;
        self.written.push(path);
        Ok(())
    }
}

/// Fails the run at start when backbone, header and data disagree.
pub struct CheckCompatibility;

impl Callback for CheckCompatibility {
    fn name(&self) -> &str {
        "check_compatibility"
    }

    fn default_hooks(&self) -> Vec<Hook> {
        vec![Hook::FitStart]
    }

    fn on_fit_start(&mut self, ctx: &mut CallbackContext) -> Result<(), String> {
        let m = ctx.model;
        let mut problems = match check_compatibility(&m.backbone_spec(), &m.header_spec()) {
            Compatibility::Ok => Vec::new(),
            Compatibility::Mismatch(p) => p,
        };
        if m.num_classes() != ctx.data.num_classes {
            problems.push(format!("model predicts {} classes, data has {}", m.num_classes(), ctx.data.num_classes));
        }
        if m.in_channels() != ctx.data.in_channels {
            problems.push(format!("model takes {} channels, data has {}", m.in_channels(), ctx.data.in_channels));
        }
        let d = m.size_divisor();
        if ctx.data.input_size % d != 0 {
            problems.push(format!("input size {} is not a multiple of {d}", ctx.data.input_size));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }
}

/// One recorded hook invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HookEvent {
    pub hook: Hook,
    pub epoch: usize,
    pub batch_idx: usize,
}

/// Records every hook it sees; clones share the log.
#[derive(Clone, Default)]
pub struct Recorder {
    events: Arc<Mutex<Vec<HookEvent>>>,
}

impl Recorder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> Vec<HookEvent> {
        self.events.lock().expect("recorder poisoned").clone()
    }

    fn push(&self, ctx: &CallbackContext) {
        self.events.lock().expect("recorder poisoned").push(HookEvent { hook: ctx.hook, epoch: ctx.epoch, batch_idx: ctx.batch_idx });
    }
}

impl Callback for Recorder {
    fn name(&self) -> &str {
        "recorder"
    }
    fn on_fit_start(&mut self, ctx: &mut CallbackContext) -> Result<(), String> {
        self.push(ctx);
        Ok(())
    }
    fn on_train_epoch_start(&mut self, ctx: &mut CallbackContext) -> Result<(), String> {
        self.push(ctx);
        Ok(())
    }
    fn on_train_batch_end(&mut self, ctx: &mut CallbackContext) -> Result<(), String> {
        self.push(ctx);
        Ok(())
    }
    fn on_validation_batch_end(&mut self, ctx: &mut CallbackContext) -> Result<(), String> {
        self.push(ctx);
        Ok(())
    }
    fn on_validation_epoch_end(&mut self, ctx: &mut CallbackContext) -> Result<(), String> {
        self.push(ctx);
        Ok(())
    }
    fn on_test_batch_end(&mut self, ctx: &mut CallbackContext) -> Result<(), String> {
        self.push(ctx);
        Ok(())
    }
    fn on_fit_end(&mut self, ctx: &mut CallbackContext) -> Result<(), String> {
        self.push(ctx);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_unet, UNetConfig};

    struct Failing;
    impl Callback for Failing {
        fn name(&self) -> &str {
            "failing"
        }
        fn on_fit_end(&mut self, _: &mut CallbackContext) -> Result<(), String> {
            Err("boom".into())
        }
    }

    struct Tagger(&'static str, Arc<Mutex<Vec<&'static str>>>);
    impl Callback for Tagger {
        fn name(&self) -> &str {
            self.0
        }
        fn on_fit_start(&mut self, _: &mut CallbackContext) -> Result<(), String> {
            self.1.lock().unwrap().push(self.0);
            Ok(())
        }
    }

    fn model(classes: usize) -> ComposedModel<f32> {
        build_unet(&UNetConfig { num_classes: classes, base_channels: 2, depth: 2, in_channels: 3 }, 0).unwrap()
    }

    fn with_ctx<R>(hook: Hook, m: &ComposedModel<f32>, info: DataInfo, f: impl FnOnce(&mut CallbackContext) -> R) -> R {
        let enc = ClassEncoding::hisdb();
        let metrics = BTreeMap::new();
        let dir = std::env::temp_dir();
        let mut ctx = CallbackContext::new(hook, &dir, m, info, &enc, &metrics);
        f(&mut ctx)
    }

    const INFO: DataInfo = DataInfo { num_classes: 8, in_channels: 3, input_size: 16 };

    #[test]
    fn registration_rules_and_order() {
        let mut reg = CallbackRegistry::new();
        let order = Arc::new(Mutex::new(Vec::new()));
        let a = shared(Tagger("a", order.clone()));
        let b = shared(Tagger("b", order.clone()));
        reg.register(a.clone(), &[Hook::FitStart]).unwrap();
        reg.register(b, &[Hook::FitStart]).unwrap();
        assert!(matches!(reg.register(a, &[Hook::FitEnd]), Err(CallbackError::Duplicate(_))));
        assert!(matches!(reg.register(shared(CheckCompatibility), &[]), Err(CallbackError::NoHooks(_))));
        let m = model(8);
        with_ctx(Hook::FitStart, &m, INFO, |ctx| reg.dispatch(Hook::FitStart, ctx)).unwrap();
        assert_eq!(*order.lock().unwrap(), ["a", "b"]);
        with_ctx(Hook::FitEnd, &m, INFO, |ctx| CallbackRegistry::new().dispatch(Hook::FitEnd, ctx)).unwrap();
    }

    #[test]
    fn failure_names_callback_and_hook() {
        let mut reg = CallbackRegistry::new();
        reg.register_default(shared(Failing)).unwrap();
        let m = model(8);
        let err = with_ctx(Hook::FitEnd, &m, INFO, |ctx| reg.dispatch(Hook::FitEnd, ctx)).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("failing") && text.contains("on_fit_end") && text.contains("boom"), "{text}");
    }

    #[test]
    fn compatibility_check_catches_class_and_size_mismatch() {
        let mut cc = CheckCompatibility;
        let good = model(8);
        assert!(with_ctx(Hook::FitStart, &good, INFO, |ctx| cc.on_fit_start(ctx)).is_ok());
        let wrong = model(5);
        let msg = with_ctx(Hook::FitStart, &wrong, INFO, |ctx| cc.on_fit_start(ctx)).unwrap_err();
        assert!(msg.contains("5 classes"));
        let odd = DataInfo { input_size: 15, ..INFO };
        assert!(with_ctx(Hook::FitStart, &good, odd, |ctx| cc.on_fit_start(ctx)).unwrap_err().contains("multiple"));
    }

    #[test]
    fn gradient_summary_values() {
        assert_eq!(gradient_summary(&[1.0, 3.0]), [2.0, 1.0, 1.0, 3.0]);
    }

    #[test]
    fn hook_names_round_trip() {
        for h in Hook::ALL {
            assert_eq!(Hook::from_name(h.name()), Some(h));
        }
    }
}
