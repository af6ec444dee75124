//! End-to-end runs: data, model and method wired into the trainer.

use std::path::Path;

use crate::config::ExperimentConfig;
use crate::data::mnist::{build_generated_bundle, normalization};
use crate::data::{build_bundle, load_attribute_dataset, BundleMeta, DatasetBundle, ImageOptions};
use crate::error::{Result, StageContext};
use crate::evaluation::MetricReport;
use crate::mitigation::{base_trainer_run, build_hooks, RunOptions, RunOutcome, TrainContext, TrainerHooks};
use crate::modeling::{build_model, Network};
use crate::seed::{seed_all, SeedState, Stream};

/// Builds the configured dataset, drawing generation randomness from the data stream.
pub fn build_dataset(cfg: &ExperimentConfig, seeds: &mut SeedState) -> Result<DatasetBundle> {
    let d = &cfg.dataset;
    if d.name.is_generated() {
        return build_generated_bundle(d, cfg.seed, seeds.stream(Stream::Data));
    }
    let opts = ImageOptions { image_size: d.image_size, crop_size: d.crop_size };
    let splits = load_attribute_dataset(&d.root, Path::new(&d.metadata), opts, d.name.has_bias_labels())?;
    let meta = BundleMeta { normalization: normalization(&d.mean, &d.std), ..BundleMeta::default() };
    build_bundle(d.name.as_str(), splits, meta)
}

/// Everything a run needs before the lifecycle starts.
pub struct Prepared {
    pub bundle: DatasetBundle,
    pub hooks: Box<dyn TrainerHooks>,
    pub model: Network<f32>,
    pub seeds: SeedState,
}

pub fn prepare_run(cfg: &ExperimentConfig) -> Result<Prepared> {
    let mut seeds = seed_all(cfg.seed);
    let bundle = build_dataset(cfg, &mut seeds).stage("data")?;
    let hooks = build_hooks(cfg, &bundle.layout)?;
    let (c, _, _) = bundle.image_shape();
    let heads = hooks.heads(&bundle.layout);
    let model = build_model(cfg.model.name, bundle.num_classes(), heads, c, seeds.stream(Stream::ModelInit)).stage("model")?;
    Ok(Prepared { bundle, hooks, model, seeds })
}

/// Runs the full lifecycle for `cfg`, writing logs and checkpoints under its run directory.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunOutcome> {
    let Prepared { bundle, mut hooks, model, seeds } = prepare_run(cfg)?;
    let mut ctx = TrainContext::new(cfg, &bundle, model, seeds)?;
    base_trainer_run(hooks.as_mut(), &mut ctx, opts)
}

/// Evaluates a saved checkpoint on every configured split.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, ckpt: &Path, force: bool) -> Result<Vec<MetricReport>> {
    let Prepared { bundle, mut hooks, model, seeds } = prepare_run(cfg)?;
    let mut ctx = TrainContext::new(cfg, &bundle, model, seeds)?;
    crate::mitigation::evaluate_checkpoint(hooks.as_mut(), &mut ctx, ckpt, force)
}
