use super::{format_for_loss, CheckpointSet, EpochRecord, RunManifest, TaskError, TaskSpec, TestRecord, TrainPlan};
use crate::callbacks::{BatchOutputs, CallbackContext, CallbackRegistry, DataInfo, Hook};
use crate::config::SNAPSHOT_FILE;
use crate::data::{encode_label_png, Batch, DataModule, LabelMap, Split};
use crate::eval::{evaluate_corpus, ConfusionMatrix, MetricReport, ProbabilityMap, Reassembler};
use crate::logging::{MultiLogger, METRICS_FILE};
use crate::model::{load_part, save_part};
use crate::model::Part;
use crate::nn::{softmax_nchw, Mode};
use crate::seed::seed_everything;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const TEST_OUTPUT_DIR: &str = "test_output";

/// Run-scoped services: output directory, callbacks and loggers.
pub struct Trainer {
    pub run_dir: PathBuf,
    pub experiment: String,
    pub callbacks: CallbackRegistry,
    pub logger: MultiLogger,
    global_step: u64,
    epoch: usize,
}

impl Trainer {
    pub fn new(run_dir: &Path, experiment: &str, callbacks: CallbackRegistry, logger: MultiLogger) -> Self {
        Trainer { run_dir: run_dir.to_path_buf(), experiment: experiment.to_string(), callbacks, logger, global_step: 0, epoch: 0 }
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }
}

struct HookCall<'a> {
    batch: Option<&'a Batch>,
    outputs: Option<&'a BatchOutputs>,
    batch_idx: usize,
    dataloader_idx: usize,
    metrics: &'a BTreeMap<String, f64>,
}

const NO_METRICS: &BTreeMap<String, f64> = &BTreeMap::new();

impl<'a> HookCall<'a> {
    fn plain() -> Self {
        HookCall { batch: None, outputs: None, batch_idx: 0, dataloader_idx: 0, metrics: NO_METRICS }
    }
}

fn data_info(data: &dyn DataModule) -> DataInfo {
    DataInfo { num_classes: data.num_classes(), in_channels: data.in_channels(), input_size: data.input_size() }
}

fn dispatch(
    trainer: &mut Trainer,
    hook: Hook,
    task: &TaskSpec,
    data: &dyn DataModule,
    max_epochs: usize,
    call: HookCall,
    manifest: Option<&mut RunManifest>,
) -> Result<(), TaskError> {
    if trainer.callbacks.is_empty() {
        return Ok(());
    }
    let (logs, wants_checkpoint) = {
        let mut ctx = CallbackContext::new(hook, &trainer.run_dir, &task.model, data_info(data), data.encoding(), call.metrics);
        ctx.epoch = trainer.epoch;
        ctx.max_epochs = max_epochs;
        ctx.global_step = trainer.global_step;
        ctx.batch = call.batch;
        ctx.outputs = call.outputs;
        ctx.batch_idx = call.batch_idx;
        ctx.dataloader_idx = call.dataloader_idx;
        trainer.callbacks.dispatch(hook, &mut ctx)?;
        let wants = ctx.checkpoint_requested();
        (ctx.take_logs(), wants)
    };
    for (key, value) in logs {
        trainer.logger.log_scalar(&key, value, trainer.global_step, trainer.epoch as u64)?;
    }
    if wants_checkpoint {
        let tag = format!("epoch{:03}", trainer.epoch);
        let set = save_checkpoints(&trainer.run_dir, &tag, trainer.epoch, task)?;
        if let Some(m) = manifest {
            m.checkpoints.insert(tag, set);
        }
    }
    Ok(())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TaskError + '_ {
    move |source| TaskError::Io { path: path.display().to_string(), source }
}

fn save_checkpoints(run_dir: &Path, tag: &str, epoch: usize, task: &TaskSpec) -> Result<CheckpointSet, TaskError> {
    let rel = PathBuf::from(CHECKPOINT_DIR).join(tag);
    let dir = run_dir.join(&rel);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for part in [Part::Full, Part::Backbone, Part::Header] {
        save_part(&task.model, part, &dir.join(part.file_name()))?;
    }
    Ok(CheckpointSet {
        epoch,
        full: rel.join(Part::Full.file_name()),
        backbone: rel.join(Part::Backbone.file_name()),
        header: rel.join(Part::Header.file_name()),
    })
}

/// Train for `plan.max_epochs` epochs, validating after each, keeping the
/// best (by validation mIoU) and the last weights.
pub fn fit(task: &mut TaskSpec, plan: &TrainPlan, data: &mut dyn DataModule, trainer: &mut Trainer) -> Result<RunManifest, TaskError> {
    plan.validate()?;
    data.prepare()?;
    let seeds = seed_everything(plan.seed);
    let input = data.input_size();
    task.model.check_input([plan.batch_size, data.in_channels(), input, input])?;
    fs::create_dir_all(&trainer.run_dir).map_err(io_err(&trainer.run_dir))?;

    let mut manifest = RunManifest {
        run_dir: trainer.run_dir.clone(),
        experiment: trainer.experiment.clone(),
        seed: plan.seed,
        seeds,
        config_snapshot: PathBuf::from(SNAPSHOT_FILE),
        metrics_log: PathBuf::from(METRICS_FILE),
        metric_name: task.metric.name().to_string(),
        epochs: Vec::new(),
        best_epoch: None,
        checkpoints: BTreeMap::new(),
        test: None,
    };
    let data: &dyn DataModule = data;
    let num_classes = data.num_classes();
    trainer.epoch = 0;
    dispatch(trainer, Hook::FitStart, task, data, plan.max_epochs, HookCall::plain(), Some(&mut manifest))?;
    let mut best = f64::NEG_INFINITY;

    for epoch in 0..plan.max_epochs {
        trainer.epoch = epoch;
        let started = Instant::now();
        dispatch(trainer, Hook::TrainEpochStart, task, data, plan.max_epochs, HookCall::plain(), Some(&mut manifest))?;

        let train_plan = data.train_plan(epoch, &seeds)?;
        if train_plan.is_empty() {
            return Err(TaskError::Data(crate::data::DataError::Empty("no training samples".into())));
        }
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, chunk) in train_plan.chunks(plan.batch_size).enumerate() {
            let batch = data.load(Split::Train, chunk)?;
            task.model.zero_grad();
            let logits = task.model.forward(&batch.images, Mode::Train)?;
            let (flat, targets) = format_for_loss(&logits, &batch.labels)?;
            let (loss, grad) = task.loss.compute(&flat, targets);
            if !loss.is_finite() {
                return Err(TaskError::NonFiniteLoss { epoch, batch: b, value: loss });
            }
            task.model.backward(&grad.to_nchw(logits.shape()));
            task.optimizer.begin_step();
            let opt = &mut task.optimizer;
            task.model.visit_mut(&mut |name, p| opt.update(name, p));
            trainer.global_step += 1;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            let outputs = BatchOutputs { loss: Some(loss), predictions: flat.argmax(), size: batch.images.height() };
            let call = HookCall { batch: Some(&batch), outputs: Some(&outputs), batch_idx: b, ..HookCall::plain() };
            dispatch(trainer, Hook::TrainBatchEnd, task, data, plan.max_epochs, call, Some(&mut manifest))?;
        }
        let train_loss = loss_sum / seen as f64;

        let val_plan = data.val_plan(epoch, &seeds)?;
        if val_plan.is_empty() {
            return Err(TaskError::Data(crate::data::DataError::Empty("no validation samples".into())));
        }
        task.metric.reset();
        let mut cm = ConfusionMatrix::new(num_classes);
        let (mut vloss_sum, mut vseen) = (0.0, 0usize);
        for (b, chunk) in val_plan.chunks(plan.batch_size).enumerate() {
            let batch = data.load(Split::Val, chunk)?;
            let logits = task.model.forward(&batch.images, Mode::Eval)?;
            let (flat, targets) = format_for_loss(&logits, &batch.labels)?;
            let (loss, _) = task.loss.compute(&flat, targets);
            if !loss.is_finite() {
                return Err(TaskError::NonFiniteLoss { epoch, batch: b, value: loss });
            }
            let preds = flat.argmax();
            task.metric.update(targets, &preds)?;
            cm.add_slices(targets, &preds)?;
            vloss_sum += loss * chunk.len() as f64;
            vseen += chunk.len();
            let outputs = BatchOutputs { loss: Some(loss), predictions: preds, size: batch.images.height() };
            let call = HookCall { batch: Some(&batch), outputs: Some(&outputs), batch_idx: b, ..HookCall::plain() };
            dispatch(trainer, Hook::ValidationBatchEnd, task, data, plan.max_epochs, call, Some(&mut manifest))?;
        }
        let record = EpochRecord {
            epoch,
            global_step: trainer.global_step,
            train_loss,
            val_loss: vloss_sum / vseen as f64,
            val_miou: cm.miou()?,
            val_metric: task.metric.compute()?,
        };
        let step = trainer.global_step;
        let mut metrics = BTreeMap::new();
        metrics.insert("train/loss".to_string(), record.train_loss);
        metrics.insert("val/loss".to_string(), record.val_loss);
        metrics.insert("val/miou".to_string(), record.val_miou);
        metrics.insert(format!("val/{}", task.metric.name()), record.val_metric);
        for (k, v) in &metrics {
            trainer.logger.log_scalar(k, *v, step, epoch as u64)?;
        }
        log::info!(
            "epoch {}/{}: train loss {:.4}, val loss {:.4}, val mIoU {:.4} ({:.1}s)",
            epoch + 1,
            plan.max_epochs,
            record.train_loss,
            record.val_loss,
            record.val_miou,
            started.elapsed().as_secs_f64()
        );
        let call = HookCall { metrics: &metrics, ..HookCall::plain() };
        dispatch(trainer, Hook::ValidationEpochEnd, task, data, plan.max_epochs, call, Some(&mut manifest))?;

        if record.val_miou > best {
            best = record.val_miou;
            manifest.best_epoch = Some(epoch);
            manifest.checkpoints.insert("best".into(), save_checkpoints(&trainer.run_dir, "best", epoch, task)?);
        }
        manifest.checkpoints.insert("last".into(), save_checkpoints(&trainer.run_dir, "last", epoch, task)?);
        manifest.epochs.push(record);
        manifest.save()?;
    }
    dispatch(trainer, Hook::FitEnd, task, data, plan.max_epochs, HookCall::plain(), Some(&mut manifest))?;
    trainer.logger.flush()?;
    manifest.save()?;
    Ok(manifest)
}

/// Predictions and scores of the test stage.
#[derive(Debug, Clone)]
pub struct TestOutputs {
    pub predictions: BTreeMap<String, LabelMap>,
    pub report: MetricReport,
}

/// Predict every test page with the `checkpoint` weights (usually `best`),
/// write the label images and the evaluation report under `test_output/`.
pub fn test(
    task: &mut TaskSpec,
    data: &dyn DataModule,
    manifest: &mut RunManifest,
    trainer: &mut Trainer,
    checkpoint: &str,
    batch_size: usize,
    ignore_boundary: bool,
) -> Result<TestOutputs, TaskError> {
    let set = manifest.checkpoints.get(checkpoint).ok_or_else(|| TaskError::MissingCheckpoint(checkpoint.to_string()))?;
    let path = manifest.run_dir.join(&set.full);
    if !path.is_file() {
        return Err(TaskError::MissingCheckpoint(format!("{checkpoint} ({})", path.display())));
    }
    load_part(&path, &mut task.model)?;
    let out_rel = PathBuf::from(TEST_OUTPUT_DIR);
    let out_dir = manifest.run_dir.join(&out_rel);
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;

    let classes = data.num_classes();
    let batch_size = batch_size.max(1);
    let mut predictions = BTreeMap::new();
    let mut ground_truth = BTreeMap::new();
    let mut files = Vec::new();
    let mut batch_idx = 0;
    for page in data.test_pages()? {
        let specs = data.test_specs(&page);
        let mut acc = Reassembler::new(page.width, page.height, classes);
        for chunk in specs.chunks(batch_size) {
            let batch = data.load(Split::Test, chunk)?;
            let logits = task.model.forward(&batch.images, Mode::Eval)?;
            let probs = softmax_nchw(&logits);
            let s = batch.images.height();
            for (k, spec) in chunk.iter().enumerate() {
                acc.add(spec.origin(), &ProbabilityMap::new(s, classes, probs.sample(k).to_vec()))?;
            }
            let outputs = BatchOutputs { loss: None, predictions: crate::nn::PixelLogits::from_nchw(&logits).argmax(), size: s };
            let call = HookCall { batch: Some(&batch), outputs: Some(&outputs), batch_idx, dataloader_idx: page.index, metrics: NO_METRICS };
            dispatch(trainer, Hook::TestBatchEnd, task, data, 0, call, None)?;
            batch_idx += 1;
        }
        let labels = acc.finish()?;
        let rel = out_rel.join(format!("{}.png", page.page_id));
        let png = encode_label_png(&labels, data.encoding())?;
        fs::write(manifest.run_dir.join(&rel), png).map_err(io_err(&rel))?;
        files.push(rel);
        ground_truth.insert(page.page_id.clone(), data.ground_truth(Split::Test, page.index)?.clone());
        predictions.insert(page.page_id.clone(), labels);
    }
    if predictions.is_empty() {
        return Err(TaskError::Data(crate::data::DataError::Empty("test split has no pages".into())));
    }
    let report = evaluate_corpus(&predictions, &ground_truth, &data.class_names(), ignore_boundary)?;
    let report_rel = out_rel.join("report.txt");
    let summary_rel = out_rel.join("summary.txt");
    fs::write(manifest.run_dir.join(&report_rel), report.to_text()).map_err(io_err(&report_rel))?;
    fs::write(manifest.run_dir.join(&summary_rel), report.to_summary()).map_err(io_err(&summary_rel))?;

    let step = trainer.global_step;
    let epoch = manifest.epochs.len() as u64;
    trainer.logger.log_scalar("test/miou", report.corpus.miou, step, epoch)?;
    trainer.logger.log_scalar("test/f1_macro", report.corpus.macro_f1, step, epoch)?;
    trainer.logger.log_scalar("test/f1_weighted", report.corpus.weighted_f1, step, epoch)?;
    trainer.logger.flush()?;

    manifest.test = Some(TestRecord {
        checkpoint: checkpoint.to_string(),
        pages: predictions.keys().cloned().collect(),
        predictions: files,
        report: report_rel,
        summary: summary_rel,
        miou: report.corpus.miou,
        f1_macro: report.corpus.macro_f1,
        f1_weighted: report.corpus.weighted_f1,
    });
    manifest.save()?;
    Ok(TestOutputs { predictions, report })
}
