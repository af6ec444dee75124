//! The training lifecycle and its ERM defaults.

use std::path::PathBuf;

use fairtrain_tensor::{Binding, Container, Graph, Optimizer, Tensor};

use super::losses::{erm_loss, LossRecord, LossTerms};
use crate::config::{ExperimentConfig, MethodName};
use crate::data::{Batch, BatchPlan, DatasetBundle, GroupLayout, Sampler};
use crate::error::{Error, Result, StageContext};
use crate::evaluation::{evaluate_log, is_improvement, metric_class, ConflictReference, MetricReport, PredictionLog};
use crate::modeling::train::OptimSettings;
use crate::modeling::{Forward, Mode, Network};
use crate::seed::{SeedState, Stream};
use crate::tooling::{load_checkpoint, save_checkpoint, CheckpointKind, CheckpointMeta, CheckpointRecord, RunLog};

const EVAL_BATCH: usize = 256;

/// Serialized method-specific state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MethodState {
    pub arrays: Container,
    pub meta: serde_json::Value,
}

impl MethodState {
    pub fn put<T: fairtrain_tensor::Float>(&mut self, name: &str, t: &Tensor<T>) {
        self.arrays.insert_tensor(name, t);
    }

    pub fn put_vec(&mut self, name: &str, v: &[f64]) {
        let t = Tensor::new(&[v.len()], v.to_vec()).expect("1-d shape");
        self.arrays.insert_tensor(name, &t);
    }

    pub fn get<T: fairtrain_tensor::Float>(&self, name: &str) -> Result<Tensor<T>> {
        self.arrays
            .tensor(name)
            .map_err(|e| Error::Checkpoint(format!("missing method state `{name}`: {e}")))
    }

    pub fn get_vec(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get::<f64>(name)?.into_data())
    }

    pub fn save_network(&mut self, name: &str, net: &Network<f32>) {
        net.save_to(&mut self.arrays, &format!("{name}/"));
    }

    pub fn load_network(&self, name: &str, net: &mut Network<f32>) -> Result<()> {
        net.load_from(&self.arrays, &format!("{name}/"))
            .map_err(|e| Error::Checkpoint(format!("missing method state `{name}`: {e}")))
    }

    pub fn save_optimizer(&mut self, name: &str, opt: &Optimizer<f32>) {
        for (k, t) in opt.state_tensors() {
            self.arrays.insert_tensor(format!("{name}/{k}"), &t);
        }
        self.set_meta(&format!("{name}.steps"), serde_json::json!(opt.steps()));
    }

    pub fn load_optimizer(&self, name: &str, opt: &mut Optimizer<f32>) -> Result<()> {
        let steps = self
            .meta
            .get(format!("{name}.steps"))
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint(format!("missing method state `{name}.steps`")))?;
        let prefix = format!("{name}/");
        let mut tensors = Vec::new();
        for key in self.arrays.entries.keys().filter(|k| k.starts_with(&prefix)) {
            tensors.push((key[prefix.len()..].to_string(), self.arrays.tensor::<f32>(key)?));
        }
        opt.load_state(steps, tensors)?;
        Ok(())
    }

    pub fn set_meta(&mut self, key: &str, value: serde_json::Value) {
        if !self.meta.is_object() {
            self.meta = serde_json::json!({});
        }
        self.meta[key] = value;
    }
}

/// Mutable state shared by the lifecycle stages.
pub struct TrainContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub bundle: &'a DatasetBundle,
    pub model: Network<f32>,
    pub optimizer: Optimizer<f32>,
    pub seeds: SeedState,
    pub sampler: Sampler,
    /// 0-based index of the current epoch.
    pub epoch: usize,
    pub global_step: u64,
    pub reference: ConflictReference,
    /// Names of the lifecycle stages invoked, in order.
    pub trace: Vec<String>,
}

impl<'a> TrainContext<'a> {
    pub fn new(cfg: &'a ExperimentConfig, bundle: &'a DatasetBundle, model: Network<f32>, seeds: SeedState) -> Result<Self> {
        let train = bundle.train();
        let reference = ConflictReference::from_labels(
            &bundle.layout,
            (0..train.len()).map(|i| (train.targets[i], train.bias_row(i))),
        )?;
        let optimizer = OptimSettings::from(&cfg.train).build();
        Ok(Self {
            cfg,
            bundle,
            model,
            optimizer,
            seeds,
            sampler: Sampler::Shuffle,
            epoch: 0,
            global_step: 0,
            reference,
            trace: Vec::new(),
        })
    }

    pub fn settings(&self) -> OptimSettings {
        OptimSettings::from(&self.cfg.train)
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.bundle.layout
    }

    pub fn param(&self, key: &str) -> f64 {
        self.cfg.param(key)
    }

    /// Replaces the training sampler; takes effect from the next epoch.
    pub fn update_dataloaders(&mut self, sampler: Sampler) {
        self.trace.push("update_dataloaders".into());
        self.sampler = sampler;
    }

    /// One optimizer step of the main model on the loss built by `loss`.
    pub fn model_step<F>(&mut self, batch: &Batch, loss: F) -> Result<LossRecord>
    where
        F: FnOnce(&mut Graph<f32>, &mut Binding<'_, f32>, &Network<f32>, &Forward<f32>) -> Result<LossTerms>,
    {
        model_step(&mut self.model, &mut self.optimizer, &batch.x, loss)
    }

    /// The ERM step: mean cross-entropy.
    pub fn erm_step(&mut self, batch: &Batch) -> Result<LossRecord> {
        let targets = batch.targets.clone();
        self.model_step(batch, |g, _, _, out| erm_loss(g, out.logits, &targets))
    }
}

/// Forward in train mode, build a loss, backpropagate and step `opt`.
pub fn model_step<F>(net: &mut Network<f32>, opt: &mut Optimizer<f32>, x: &Tensor<f32>, loss: F) -> Result<LossRecord>
where
    F: FnOnce(&mut Graph<f32>, &mut Binding<'_, f32>, &Network<f32>, &Forward<f32>) -> Result<LossTerms>,
{
    let mut g = Graph::new();
    let mut bind = Binding::new(&net.params);
    let xv = g.constant(x.clone());
    let out = net.forward(&mut g, &mut bind, xv, Mode::Train)?;
    let terms = loss(&mut g, &mut bind, net, &out)?;
    let rec = terms.record(&g);
    rec.check_finite()?;
    let grads = g.backward(terms.total)?;
    let pg = bind.grads(&g, &grads);
    drop(bind);
    opt.step(&mut net.params, &pg)?;
    net.update_running_stats(&out.bn_stats);
    Ok(rec)
}

/// Lifecycle stages; every default is the ERM behaviour.
pub trait TrainerHooks {
    fn method(&self) -> MethodName;

    /// Classifier heads of the main model.
    fn heads(&self, _layout: &GroupLayout) -> usize {
        1
    }

    /// One-time preprocessing before training; skipped on resume.
    fn prepare(&mut self, _ctx: &mut TrainContext<'_>) -> Result<()> {
        Ok(())
    }

    fn before_training(&mut self, _ctx: &mut TrainContext<'_>) -> Result<()> {
        Ok(())
    }

    fn before_epoch(&mut self, _ctx: &mut TrainContext<'_>) -> Result<()> {
        Ok(())
    }

    fn train_step(&mut self, ctx: &mut TrainContext<'_>, batch: &Batch) -> Result<LossRecord> {
        ctx.erm_step(batch)
    }

    fn after_step(&mut self, _ctx: &mut TrainContext<'_>, _batch: &Batch, _rec: &LossRecord) -> Result<()> {
        Ok(())
    }

    /// Class logits `(n, K)` used for evaluation.
    fn eval_logits(&self, ctx: &TrainContext<'_>, batch: &Batch) -> Result<Tensor<f32>> {
        Ok(ctx.model.infer(&batch.x)?.1)
    }

    fn evaluate(&mut self, ctx: &mut TrainContext<'_>, split: &str) -> Result<MetricReport> {
        evaluate_split(self, ctx, split)
    }

    fn after_epoch(&mut self, _ctx: &mut TrainContext<'_>, _reports: &[MetricReport]) -> Result<()> {
        Ok(())
    }

    fn after_training(&mut self, _ctx: &mut TrainContext<'_>) -> Result<()> {
        Ok(())
    }

    fn save_state(&self, _state: &mut MethodState) -> Result<()> {
        Ok(())
    }

    /// Restores what `prepare` and training built; replaces `prepare` on resume.
    fn load_state(&mut self, _ctx: &mut TrainContext<'_>, _state: &MethodState) -> Result<()> {
        Ok(())
    }
}

/// Predictions of the hooks' evaluation path over a whole split.
pub fn evaluate_split<H: TrainerHooks + ?Sized>(hooks: &H, ctx: &TrainContext<'_>, split: &str) -> Result<MetricReport> {
    let set = ctx.bundle.split(split)?;
    let mut log = PredictionLog::new(split);
    let positions: Vec<usize> = (0..set.len()).collect();
    for chunk in positions.chunks(EVAL_BATCH) {
        let batch = ctx.bundle.batch(split, chunk)?;
        let logits = hooks.eval_logits(ctx, &batch)?;
        if !logits.all_finite() {
            return Err(Error::Training(format!("non-finite logits while evaluating `{split}`")));
        }
        for (i, pred) in logits.argmax_rows().into_iter().enumerate() {
            log.push(batch.indices[i], batch.targets[i], batch.bias_row(i), pred);
        }
    }
    evaluate_log(&log, &ctx.bundle.layout, Some(&ctx.reference), &ctx.cfg.eval.primary_metric)
}

/// `lr · γ^{#milestones ≤ epoch}` for a 0-based epoch index.
pub fn lr_at(base: f64, gamma: f64, milestones: &[usize], epoch: usize) -> f64 {
    let passed = milestones.iter().filter(|&&m| m <= epoch).count();
    base * gamma.powi(passed as i32)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Continue from `ckpt_latest` if present.
    pub resume: bool,
    /// Ignore config fingerprint mismatches on resume.
    pub force: bool,
    /// Return after this many completed epochs (simulates an interruption).
    pub stop_after: Option<usize>,
}

/// Result of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub epochs_completed: usize,
    /// Reports of the last evaluated epoch, one per evaluation split.
    pub final_reports: Vec<MetricReport>,
    pub best_epoch: Option<usize>,
    pub best_value: Option<f64>,
    pub best_reports: Vec<MetricReport>,
    pub trace: Vec<String>,
}

impl RunOutcome {
    pub fn final_report(&self, split: &str) -> Option<&MetricReport> {
        self.final_reports.iter().find(|r| r.split == split)
    }

    pub fn best_report(&self, split: &str) -> Option<&MetricReport> {
        self.best_reports.iter().find(|r| r.split == split)
    }
}

struct Bookkeeping {
    best_value: Option<f64>,
    best_epoch: Option<usize>,
    best_reports: Vec<MetricReport>,
}

fn checkpoint_record(ctx: &TrainContext<'_>, hooks: &dyn TrainerHooks, book: &Bookkeeping, completed: usize) -> Result<CheckpointRecord> {
    let mut arrays = Container::default();
    ctx.model.save_to(&mut arrays, "model/");
    for (k, t) in ctx.optimizer.state_tensors() {
        arrays.insert_tensor(format!("optim/{k}"), &t);
    }
    let mut state = MethodState::default();
    hooks.save_state(&mut state)?;
    for (k, e) in state.arrays.entries {
        arrays.entries.insert(format!("method/{k}"), e);
    }
    Ok(CheckpointRecord {
        config_fingerprint: ctx.cfg.fingerprint(),
        meta: CheckpointMeta {
            epoch: completed,
            global_step: ctx.global_step,
            best_value: book.best_value,
            best_epoch: book.best_epoch,
            best_reports: book.best_reports.clone(),
            seeds: ctx.seeds.snapshot(),
            optimizer_steps: ctx.optimizer.steps(),
            model_fingerprint: ctx.model.fingerprint(),
            method: hooks.method().to_string(),
            method_meta: state.meta,
        },
        arrays,
    })
}

fn restore(ctx: &mut TrainContext<'_>, hooks: &mut dyn TrainerHooks, rec: &CheckpointRecord) -> Result<()> {
    if rec.meta.method != hooks.method().as_str() {
        return Err(Error::Checkpoint(format!(
            "checkpoint was written by method `{}`, not `{}`",
            rec.meta.method,
            hooks.method()
        )));
    }
    if rec.meta.model_fingerprint != ctx.model.fingerprint() {
        return Err(Error::Checkpoint(format!(
            "checkpoint model `{}` does not match `{}`",
            rec.meta.model_fingerprint,
            ctx.model.fingerprint()
        )));
    }
    ctx.model.load_from(&rec.arrays, "model/")?;
    let mut optim = Vec::new();
    let mut state = MethodState { arrays: Container::default(), meta: rec.meta.method_meta.clone() };
    for (k, e) in &rec.arrays.entries {
        if let Some(name) = k.strip_prefix("optim/") {
            optim.push((name.to_string(), rec.arrays.tensor::<f32>(k)?));
        } else if let Some(name) = k.strip_prefix("method/") {
            state.arrays.entries.insert(name.to_string(), e.clone());
        }
    }
    ctx.optimizer.load_state(rec.meta.optimizer_steps, optim)?;
    ctx.seeds = SeedState::restore(&rec.meta.seeds)?;
    ctx.global_step = rec.meta.global_step;
    ctx.epoch = rec.meta.epoch;
    hooks.load_state(ctx, &state)
}

fn evaluate_all(hooks: &mut dyn TrainerHooks, ctx: &mut TrainContext<'_>) -> Result<Vec<MetricReport>> {
    let splits = ctx.cfg.eval.splits.clone();
    let mut reports = Vec::with_capacity(splits.len());
    for split in &splits {
        ctx.trace.push(format!("evaluate:{split}"));
        reports.push(hooks.evaluate(ctx, split).stage("evaluate")?);
    }
    Ok(reports)
}

/// Restores `path` into `ctx` and evaluates every configured split.
pub fn evaluate_checkpoint(
    hooks: &mut dyn TrainerHooks,
    ctx: &mut TrainContext<'_>,
    path: &std::path::Path,
    force: bool,
) -> Result<Vec<MetricReport>> {
    let fp = ctx.cfg.fingerprint();
    let rec = load_checkpoint(path, (!force).then_some(fp.as_str()))?;
    restore(ctx, hooks, &rec).stage("restore")?;
    evaluate_all(hooks, ctx)
}

/// Runs the lifecycle: prepare, before_training, epochs of
/// (before_epoch, steps, evaluate, after_epoch), after_training.
pub fn base_trainer_run(hooks: &mut dyn TrainerHooks, ctx: &mut TrainContext<'_>, opts: RunOptions) -> Result<RunOutcome> {
    let cfg = ctx.cfg;
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let groups = ctx.bundle.layout.num_groups();
    let metric = metric_class(&cfg.eval.primary_metric)
        .ok_or_else(|| Error::config("eval.primary_metric", "unknown metric"))?;
    let mut book = Bookkeeping { best_value: None, best_epoch: None, best_reports: Vec::new() };

    let latest = dir.join(CheckpointKind::Latest.file_name());
    let resumed = opts.resume && latest.is_file();
    let log;
    if resumed {
        let fp = cfg.fingerprint();
        let rec = load_checkpoint(&latest, (!opts.force).then_some(fp.as_str()))?;
        ctx.trace.push("restore".into());
        restore(ctx, hooks, &rec).stage("restore")?;
        book.best_value = rec.meta.best_value;
        book.best_epoch = rec.meta.best_epoch;
        book.best_reports = rec.meta.best_reports.clone();
        log = RunLog::resume(&dir, groups, rec.meta.epoch)?;
        if rec.meta.epoch >= cfg.train.epochs {
            log.line(&format!("run already complete at epoch {}; nothing to do", rec.meta.epoch))?;
            let final_reports = evaluate_all(hooks, ctx)?;
            return Ok(RunOutcome {
                run_dir: dir,
                epochs_completed: rec.meta.epoch,
                final_reports,
                best_epoch: book.best_epoch,
                best_value: book.best_value,
                best_reports: book.best_reports,
                trace: std::mem::take(&mut ctx.trace),
            });
        }
        log.line(&format!("resumed from epoch {}", rec.meta.epoch))?;
    } else {
        std::fs::write(dir.join("config.resolved"), cfg.to_yaml()).map_err(|e| Error::io(dir.join("config.resolved"), e))?;
        log = RunLog::create(&dir, groups)?;
        log.line(&format!(
            "run {} / {} / {} / seed {}",
            cfg.dataset.name, cfg.method.name, cfg.model.name, cfg.seed
        ))?;
        ctx.trace.push("prepare".into());
        hooks.prepare(ctx).stage("prepare")?;
    }
    ctx.trace.push("before_training".into());
    hooks.before_training(ctx).stage("before_training")?;

    if cfg.train.epochs == 0 {
        let reports = evaluate_all(hooks, ctx)?;
        for r in &reports {
            log.log_metrics(r, 0, None)?;
        }
        return Ok(RunOutcome {
            run_dir: dir,
            epochs_completed: 0,
            final_reports: reports.clone(),
            best_epoch: Some(0),
            best_value: reports.iter().find(|r| r.split == cfg.eval.selection_split).and_then(|r| r.primary_value()),
            best_reports: reports,
            trace: std::mem::take(&mut ctx.trace),
        });
    }

    let start = ctx.epoch;
    let mut final_reports = Vec::new();
    for e in start..cfg.train.epochs {
        match run_epoch(hooks, ctx, &log, e) {
            Ok(reports) => {
                let completed = e + 1;
                let sel = reports
                    .iter()
                    .find(|r| r.split == cfg.eval.selection_split)
                    .and_then(|r| r.primary_value())
                    .ok_or_else(|| Error::Metric(format!("primary metric unavailable on `{}`", cfg.eval.selection_split)))?;
                let improved = book.best_value.is_none_or(|b| is_improvement(sel, b, metric.higher_is_better));
                if improved {
                    book.best_value = Some(sel);
                    book.best_epoch = Some(completed);
                    book.best_reports = reports.clone();
                }
                let rec = checkpoint_record(ctx, hooks, &book, completed).stage("after_epoch")?;
                save_checkpoint(&dir, &rec, CheckpointKind::Latest)?;
                if improved {
                    save_checkpoint(&dir, &rec, CheckpointKind::Best)?;
                }
                if cfg.train.ckpt_interval > 0 && completed % cfg.train.ckpt_interval == 0 {
                    save_checkpoint(&dir, &rec, CheckpointKind::Epoch(completed))?;
                }
                ctx.trace.push(format!("after_epoch:{completed}"));
                hooks.after_epoch(ctx, &reports).stage("after_epoch")?;
                final_reports = reports;
                if opts.stop_after == Some(completed) && completed < cfg.train.epochs {
                    log.line(&format!("stopped after epoch {completed}"))?;
                    return Ok(RunOutcome {
                        run_dir: dir,
                        epochs_completed: completed,
                        final_reports,
                        best_epoch: book.best_epoch,
                        best_value: book.best_value,
                        best_reports: book.best_reports,
                        trace: std::mem::take(&mut ctx.trace),
                    });
                }
            }
            Err(err) => {
                if let Ok(rec) = checkpoint_record(ctx, hooks, &book, e) {
                    let _ = save_checkpoint(&dir, &rec, CheckpointKind::Abort);
                }
                let _ = log.line(&format!("aborted in epoch {}: {err}", e + 1));
                return Err(err);
            }
        }
    }
    ctx.trace.push("after_training".into());
    hooks.after_training(ctx).stage("after_training")?;
    log.line(&format!(
        "best epoch {} with {} {}",
        book.best_epoch.map_or("-".into(), |e| e.to_string()),
        cfg.eval.primary_metric,
        book.best_value.map_or("-".into(), crate::tooling::format_float)
    ))?;
    Ok(RunOutcome {
        run_dir: dir,
        epochs_completed: cfg.train.epochs,
        final_reports,
        best_epoch: book.best_epoch,
        best_value: book.best_value,
        best_reports: book.best_reports,
        trace: std::mem::take(&mut ctx.trace),
    })
}

fn run_epoch(hooks: &mut dyn TrainerHooks, ctx: &mut TrainContext<'_>, log: &RunLog, e: usize) -> Result<Vec<MetricReport>> {
    let cfg = ctx.cfg;
    ctx.epoch = e;
    ctx.optimizer.set_lr(lr_at(cfg.train.lr, cfg.train.lr_gamma, &cfg.train.lr_milestones, e));
    ctx.trace.push(format!("before_epoch:{}", e + 1));
    hooks.before_epoch(ctx).stage("before_epoch")?;
    let n = ctx.bundle.train().len();
    let order = ctx.sampler.epoch_order(n, ctx.seeds.stream(Stream::Shuffle))?;
    let plan = BatchPlan::new(order, cfg.train.batch_size);
    let (mut loss_sum, mut steps) = (0.0, 0usize);
    for positions in plan.batches() {
        let batch = ctx.bundle.batch("train", positions)?;
        let rec = hooks.train_step(ctx, &batch).stage("train_step")?;
        ctx.global_step += 1;
        hooks.after_step(ctx, &batch, &rec).stage("after_step")?;
        loss_sum += rec.total;
        steps += 1;
    }
    ctx.trace.push(format!("steps:{steps}"));
    let reports = evaluate_all(hooks, ctx)?;
    let train_loss = (steps > 0).then(|| loss_sum / steps as f64);
    for r in &reports {
        log.log_metrics(r, e + 1, train_loss)?;
    }
    Ok(reports)
}
