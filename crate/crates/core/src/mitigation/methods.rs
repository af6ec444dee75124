//! Lifecycle hooks of the mitigation methods.

use std::path::Path;

use fairtrain_tensor::functional::cross_entropy;
use fairtrain_tensor::{Binding, Graph, Optimizer, Tensor};

use super::embeddings::{load_embeddings, synthesize_embeddings, EmbeddingTable, SYNTHETIC_EMBED_DIM};
use super::losses::*;
use super::params::param_defaults;
use super::trainer::{model_step, MethodState, TrainContext, TrainerHooks};
use crate::config::{ExperimentConfig, MethodName};
use crate::data::{Batch, GroupLayout, Sampler};
use crate::error::{Error, Result};
use crate::modeling::train::{fit_classifier, predict_split};
use crate::modeling::{build_model, train_bias_capturing_model, train_vanilla_model, Mode, Network, ProjectionLayer};

/// Hooks for the configured method.
pub fn build_hooks(cfg: &ExperimentConfig, layout: &GroupLayout) -> Result<Box<dyn TrainerHooks>> {
    build_method(cfg.method.name, cfg, layout)
}

/// Hooks for `name`; parameters come from `cfg.method.params`, falling back to defaults.
pub fn build_method(name: MethodName, cfg: &ExperimentConfig, layout: &GroupLayout) -> Result<Box<dyn TrainerHooks>> {
    let defaults = param_defaults(name, cfg.dataset.name);
    let p = |k: &str| {
        cfg.method
            .params
            .get(k)
            .or_else(|| defaults.get(k))
            .copied()
            .unwrap_or_else(|| panic!("no default for {name} parameter `{k}`"))
    };
    Ok(match name {
        MethodName::Erm => Box::new(Erm),
        MethodName::GroupDro => Box::new(GroupDro { eta: p("eta"), q: vec![1.0 / layout.num_groups() as f64; layout.num_groups()] }),
        MethodName::Di => Box::new(Di),
        MethodName::End => Box::new(End { lambda_dis: p("lambda_dis"), lambda_ent: p("lambda_ent") }),
        MethodName::Bb => Box::new(Bb { epsilon: p("epsilon"), prior: Vec::new() }),
        MethodName::Badd => Box::new(BAdd { bias: BiasFeatures::new(p("bias_epochs"), Combine::Sum, false) }),
        MethodName::Lff => Box::new(Lff { q: p("q"), alpha: p("ema"), state: None }),
        MethodName::Sd => Box::new(Sd { lambda: p("lambda") }),
        MethodName::Jtt => Box::new(Jtt { lambda_up: p("lambda_up"), id_epochs: p("id_epochs") as usize, weights: Vec::new() }),
        MethodName::SoftCon => Box::new(SoftCon {
            tau: p("tau"),
            ce_weight: p("ce_weight"),
            bias: BiasFeatures::new(p("bias_epochs"), Combine::Concat, false),
        }),
        MethodName::Debian => Box::new(Debian { disc: None }),
        MethodName::Flac => Box::new(Flac {
            lambda: p("lambda"),
            tau_z: p("tau_z"),
            tau_b: p("tau_b"),
            bias: BiasFeatures::new(p("bias_epochs"), Combine::Concat, p("vanilla_bias_model") == 1.0),
        }),
        MethodName::Mavias => Box::new(Mavias {
            lambda1: p("lambda1"),
            lambda2: p("lambda2"),
            embeddings_path: cfg.method.embeddings.clone(),
            state: None,
        }),
    })
}

fn in_channels(ctx: &TrainContext<'_>) -> usize {
    ctx.bundle.image_shape().0
}

// ---- ERM ----

pub struct Erm;

impl TrainerHooks for Erm {
    fn method(&self) -> MethodName {
        MethodName::Erm
    }
}

// ---- GroupDRO ----

pub struct GroupDro {
    pub eta: f64,
    pub q: Vec<f64>,
}

impl TrainerHooks for GroupDro {
    fn method(&self) -> MethodName {
        MethodName::GroupDro
    }

    fn train_step(&mut self, ctx: &mut TrainContext<'_>, batch: &Batch) -> Result<LossRecord> {
        let (eta, q) = (self.eta, &mut self.q);
        ctx.model_step(batch, |g, _, _, out| groupdro_loss(g, out.logits, &batch.targets, &batch.groups, q, eta))
    }

    fn save_state(&self, state: &mut MethodState) -> Result<()> {
        state.put_vec("q", &self.q);
        Ok(())
    }

    fn load_state(&mut self, _ctx: &mut TrainContext<'_>, state: &MethodState) -> Result<()> {
        self.q = state.get_vec("q")?;
        Ok(())
    }
}

// ---- DI ----

/// One head per bias combination ("domain").
pub struct Di;

impl TrainerHooks for Di {
    fn method(&self) -> MethodName {
        MethodName::Di
    }

    fn heads(&self, layout: &GroupLayout) -> usize {
        layout.num_combinations()
    }

    fn train_step(&mut self, ctx: &mut TrainContext<'_>, batch: &Batch) -> Result<LossRecord> {
        let k = ctx.bundle.num_classes();
        ctx.model_step(batch, |g, _, _, out| di_train_loss(g, out.logits, &batch.combos, &batch.targets, k))
    }

    fn eval_logits(&self, ctx: &TrainContext<'_>, batch: &Batch) -> Result<Tensor<f32>> {
        let logits = ctx.model.infer(&batch.x)?.1;
        di_inference(&logits, ctx.model.heads())
    }
}

// ---- EnD ----

pub struct End {
    pub lambda_dis: f64,
    pub lambda_ent: f64,
}

impl TrainerHooks for End {
    fn method(&self) -> MethodName {
        MethodName::End
    }

    fn train_step(&mut self, ctx: &mut TrainContext<'_>, batch: &Batch) -> Result<LossRecord> {
        if batch.len() < 2 {
            return ctx.erm_step(batch);
        }
        let (l1, l2) = (self.lambda_dis, self.lambda_ent);
        ctx.model_step(batch, |g, _, _, out| {
            let mut terms = erm_loss(g, out.logits, &batch.targets)?;
            let (dis, ent) = end_regularizers(g, out.features, &batch.combos, &batch.targets)?;
            terms.add_term(g, "dis", dis, l1)?;
            terms.add_term(g, "ent", ent, l2)?;
            Ok(terms)
        })
    }
}

// ---- BB ----

pub struct Bb {
    pub epsilon: f64,
    /// `K × A` log prior, row-major.
    pub prior: Vec<f64>,
}

impl TrainerHooks for Bb {
    fn method(&self) -> MethodName {
        MethodName::Bb
    }

    fn prepare(&mut self, ctx: &mut TrainContext<'_>) -> Result<()> {
        let layout = ctx.layout();
        let train = ctx.bundle.train();
        let combos = (0..train.len())
            .map(|i| layout.combination_index(train.bias_row(i)))
            .collect::<Result<Vec<_>>>()?;
        self.prior = compute_bias_prior(&train.targets, &combos, layout.num_classes, layout.num_combinations(), self.epsilon);
        Ok(())
    }

    fn train_step(&mut self, ctx: &mut TrainContext<'_>, batch: &Batch) -> Result<LossRecord> {
        let (k, a) = (ctx.layout().num_classes, ctx.layout().num_combinations());
        if self.prior.len() != k * a {
            return Err(Error::Training("bb: prior missing; prepare did not run".into()));
        }
        let rows = prior_rows(&self.prior, k, a, &batch.combos);
        ctx.model_step(batch, |g, _, _, out| bb_loss(g, out.logits, &rows, &batch.targets))
    }

    fn save_state(&self, state: &mut MethodState) -> Result<()> {
        state.put_vec("prior", &self.prior);
        Ok(())
    }

    fn load_state(&mut self, _ctx: &mut TrainContext<'_>, state: &MethodState) -> Result<()> {
        self.prior = state.get_vec("prior")?;
        Ok(())
    }
}

// ---- shared: bias-capturing features ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Combine {
    Sum,
    Concat,
}

/// Frozen bias-capturing models and their train-split features.
struct BiasFeatures {
    epochs: usize,
    combine: Combine,
    vanilla: bool,
    nets: Vec<Network<f32>>,
    /// `(n_train, D_b)`, indexed by train position.
    train: Option<Tensor<f32>>,
}

impl BiasFeatures {
    fn new(epochs: f64, combine: Combine, vanilla: bool) -> Self {
        Self { epochs: epochs as usize, combine, vanilla, nets: Vec::new(), train: None }
    }

    fn fit(&mut self, ctx: &mut TrainContext<'_>) -> Result<()> {
        let settings = ctx.settings();
        let arch = ctx.cfg.model.name;
        self.nets.clear();
        if self.vanilla {
            let mut init = ctx.seeds.derive("method/vanilla_init");
            let mut shuffle = ctx.seeds.derive("method/vanilla_shuffle");
            let m = train_vanilla_model(ctx.bundle, self.epochs, arch, &settings, &mut init, &mut shuffle)?;
            self.nets.push(m.net);
        } else {
            for k in 0..ctx.layout().num_attributes() {
                let mut init = ctx.seeds.derive(&format!("method/bias{k}_init"));
                let mut shuffle = ctx.seeds.derive(&format!("method/bias{k}_shuffle"));
                let m = train_bias_capturing_model(ctx.bundle, k, self.epochs, arch, &settings, &mut init, &mut shuffle)?;
                self.nets.push(m.net);
            }
        }
        ctx.trace.push("bias_model".into());
        self.precompute(ctx)
    }

    fn precompute(&mut self, ctx: &TrainContext<'_>) -> Result<()> {
        let mut parts = Vec::with_capacity(self.nets.len());
        for net in &self.nets {
            let (f, _) = predict_split(net, ctx.bundle, "train")?;
            if !f.all_finite() {
                return Err(Error::Model("bias-capturing model emitted non-finite features".into()));
            }
            parts.push(f);
        }
        let n = ctx.bundle.train().len();
        let combined = match self.combine {
            Combine::Sum => {
                let mut acc = parts[0].clone();
                for p in &parts[1..] {
                    acc.add_assign(p);
                }
                acc
            }
            Combine::Concat => {
                let dims: Vec<usize> = parts.iter().map(|p| p.dim(1)).collect();
                let total: usize = dims.iter().sum();
                let mut data = Vec::with_capacity(n * total);
                for i in 0..n {
                    for p in &parts {
                        data.extend_from_slice(p.row(i));
                    }
                }
                Tensor::new(&[n, total], data)?
            }
        };
        self.train = Some(combined);
        Ok(())
    }

    fn rows(&self, positions: &[usize]) -> Result<Tensor<f32>> {
        self.train
            .as_ref()
            .map(|t| t.select_rows(positions))
            .ok_or_else(|| Error::Training("bias features missing; prepare did not run".into()))
    }

    fn save(&self, state: &mut MethodState) {
        for (k, net) in self.nets.iter().enumerate() {
            state.save_network(&format!("bias{k}"), net);
        }
        state.set_meta("bias_models", serde_json::json!(self.nets.len()));
    }

    fn load(&mut self, ctx: &mut TrainContext<'_>, state: &MethodState) -> Result<()> {
        let count = state
            .meta
            .get("bias_models")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("missing method state `bias_models`".into()))? as usize;
        let layout = ctx.layout();
        self.nets.clear();
        for k in 0..count {
            let classes = if self.vanilla { layout.num_classes } else { layout.cardinalities[k] };
            let mut rng = ctx.seeds.derive("method/restore");
            let mut net = build_model(ctx.cfg.model.name, classes, 1, in_channels(ctx), &mut rng)?;
            state.load_network(&format!("bias{k}"), &mut net)?;
            self.nets.push(net);
        }
        self.precompute(ctx)
    }
}

// ---- BAdd ----

pub struct BAdd {
    bias: BiasFeatures,
}

impl TrainerHooks for BAdd {
    fn method(&self) -> MethodName {
        MethodName::Badd
    }

    fn prepare(&mut self, ctx: &mut TrainContext<'_>) -> Result<()> {
        self.bias.fit(ctx)
    }

    fn train_step(&mut self, ctx: &mut TrainContext<'_>, batch: &Batch) -> Result<LossRecord> {
        let b = self.bias.rows(&batch.positions)?;
        ctx.model_step(batch, |g, bind, net, out| {
            let bv = g.constant(b);
            let logits = badd_forward(g, out.features, bv, |g, zb| net.head(g, bind, zb), true)?;
            erm_loss(g, logits, &batch.targets)
        })
    }

    fn save_state(&self, state: &mut MethodState) -> Result<()> {
        self.bias.save(state);
        Ok(())
    }

    fn load_state(&mut self, ctx: &mut TrainContext<'_>, state: &MethodState) -> Result<()> {
        self.bias.load(ctx, state)
    }
}

// ---- LfF ----

struct LffState {
    aux: Network<f32>,
    aux_opt: Optimizer<f32>,
    ema_b: Vec<f64>,
    ema_m: Vec<f64>,
    seen_b: Vec<bool>,
    seen_m: Vec<bool>,
}

pub struct Lff {
    pub q: f64,
    pub alpha: f64,
    state: Option<LffState>,
}

impl Lff {
    fn new_state(ctx: &TrainContext<'_>) -> Result<LffState> {
        let n = ctx.bundle.train().len();
        let mut rng = ctx.seeds.derive("method/lff_aux_init");
        let aux = build_model(ctx.cfg.model.name, ctx.bundle.num_classes(), 1, in_channels(ctx), &mut rng)?;
        Ok(LffState {
            aux,
            aux_opt: ctx.settings().build(),
            ema_b: vec![0.0; n],
            ema_m: vec![0.0; n],
            seen_b: vec![false; n],
            seen_m: vec![false; n],
        })
    }

    /// Current per-sample weights at train positions.
    pub fn weights(&self, positions: &[usize]) -> Vec<f64> {
        match &self.state {
            Some(s) => {
                let b: Vec<f64> = positions.iter().map(|&p| s.ema_b[p]).collect();
                let m: Vec<f64> = positions.iter().map(|&p| s.ema_m[p]).collect();
                lff_sample_weights(&b, &m)
            }
            None => vec![0.5; positions.len()],
        }
    }
}

fn ema_first(ema: &mut [f64], seen: &mut [bool], positions: &[usize], losses: &[f64], alpha: f64) {
    for (&p, &l) in positions.iter().zip(losses) {
        if seen[p] {
            ema[p] = alpha * ema[p] + (1.0 - alpha) * l;
        } else {
            ema[p] = l;
            seen[p] = true;
        }
    }
}

impl TrainerHooks for Lff {
    fn method(&self) -> MethodName {
        MethodName::Lff
    }

    fn prepare(&mut self, ctx: &mut TrainContext<'_>) -> Result<()> {
        self.state = Some(Self::new_state(ctx)?);
        Ok(())
    }

    fn train_step(&mut self, ctx: &mut TrainContext<'_>, batch: &Batch) -> Result<LossRecord> {
        let (q, alpha) = (self.q, self.alpha);
        let s = self.state.as_mut().ok_or_else(|| Error::Training("lff: prepare did not run".into()))?;
        let mut aux_ce = Vec::new();
        let aux_rec = model_step(&mut s.aux, &mut s.aux_opt, &batch.x, |g, _, _, out| {
            let ce = cross_entropy(g, out.logits, &batch.targets)?;
            aux_ce = g.value(ce).to_f64_vec();
            gce_loss(g, out.logits, &batch.targets, q)
        })?;
        let (ema_b, ema_m, seen_b, seen_m) = (&mut s.ema_b, &mut s.ema_m, &mut s.seen_b, &mut s.seen_m);
        let mut rec = ctx.model_step(batch, |g, _, _, out| {
            let ce = cross_entropy(g, out.logits, &batch.targets)?;
            let main_ce = g.value(ce).to_f64_vec();
            ema_first(ema_b, seen_b, &batch.positions, &aux_ce, alpha);
            ema_first(ema_m, seen_m, &batch.positions, &main_ce, alpha);
            let b: Vec<f64> = batch.positions.iter().map(|&p| ema_b[p]).collect();
            let m: Vec<f64> = batch.positions.iter().map(|&p| ema_m[p]).collect();
            let w = lff_sample_weights(&b, &m);
            weighted_ce(g, out.logits, &batch.targets, &w)
        })?;
        rec.components.push(("aux_gce".into(), aux_rec.total));
        Ok(rec)
    }

    fn save_state(&self, state: &mut MethodState) -> Result<()> {
        if let Some(s) = &self.state {
            state.save_network("aux", &s.aux);
            state.save_optimizer("aux_opt", &s.aux_opt);
            state.put_vec("ema_b", &s.ema_b);
            state.put_vec("ema_m", &s.ema_m);
            state.put_vec("seen_b", &s.seen_b.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>());
            state.put_vec("seen_m", &s.seen_m.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>());
        }
        Ok(())
    }

    fn load_state(&mut self, ctx: &mut TrainContext<'_>, state: &MethodState) -> Result<()> {
        let mut s = Self::new_state(ctx)?;
        state.load_network("aux", &mut s.aux)?;
        state.load_optimizer("aux_opt", &mut s.aux_opt)?;
        s.ema_b = state.get_vec("ema_b")?;
        s.ema_m = state.get_vec("ema_m")?;
        s.seen_b = state.get_vec("seen_b")?.iter().map(|&v| v != 0.0).collect();
        s.seen_m = state.get_vec("seen_m")?.iter().map(|&v| v != 0.0).collect();
        self.state = Some(s);
        Ok(())
    }
}

// ---- SD ----

pub struct Sd {
    pub lambda: f64,
}

impl TrainerHooks for Sd {
    fn method(&self) -> MethodName {
        MethodName::Sd
    }

    fn train_step(&mut self, ctx: &mut TrainContext<'_>, batch: &Batch) -> Result<LossRecord> {
        let lambda = self.lambda;
        ctx.model_step(batch, |g, _, _, out| {
            let mut terms = erm_loss(g, out.logits, &batch.targets)?;
            let pen = sd_penalty(g, out.logits)?;
            terms.add_term(g, "sd", pen, lambda)?;
            Ok(terms)
        })
    }
}

// ---- JTT ----

pub struct Jtt {
    pub lambda_up: f64,
    pub id_epochs: usize,
    pub weights: Vec<f64>,
}

/// Train positions misclassified by `net`.
pub fn error_set(net: &Network<f32>, ctx: &TrainContext<'_>) -> Result<Vec<usize>> {
    let (_, logits) = predict_split(net, ctx.bundle, "train")?;
    let train = ctx.bundle.train();
    Ok(logits
        .argmax_rows()
        .into_iter()
        .enumerate()
        .filter(|&(i, p)| p != train.targets[i])
        .map(|(i, _)| i)
        .collect())
}

impl TrainerHooks for Jtt {
    fn method(&self) -> MethodName {
        MethodName::Jtt
    }

    fn prepare(&mut self, ctx: &mut TrainContext<'_>) -> Result<()> {
        let mut init = ctx.seeds.derive("method/jtt_id_init");
        let mut shuffle = ctx.seeds.derive("method/jtt_id_shuffle");
        let mut id = build_model(ctx.cfg.model.name, ctx.bundle.num_classes(), 1, in_channels(ctx), &mut init)?;
        fit_classifier(&mut id, ctx.bundle, &ctx.bundle.train().targets, self.id_epochs, &ctx.settings(), &mut shuffle)?;
        ctx.trace.push("identification".into());
        let errors = error_set(&id, ctx)?;
        self.weights = jtt_weights(ctx.bundle.train().len(), &errors, self.lambda_up)?;
        ctx.update_dataloaders(Sampler::Weighted(self.weights.clone()));
        Ok(())
    }

    fn save_state(&self, state: &mut MethodState) -> Result<()> {
        state.put_vec("weights", &self.weights);
        Ok(())
    }

    fn load_state(&mut self, ctx: &mut TrainContext<'_>, state: &MethodState) -> Result<()> {
        self.weights = state.get_vec("weights")?;
        ctx.sampler = Sampler::Weighted(self.weights.clone());
        Ok(())
    }
}

// ---- SoftCon ----

pub struct SoftCon {
    pub tau: f64,
    pub ce_weight: f64,
    bias: BiasFeatures,
}

impl TrainerHooks for SoftCon {
    fn method(&self) -> MethodName {
        MethodName::SoftCon
    }

    fn prepare(&mut self, ctx: &mut TrainContext<'_>) -> Result<()> {
        self.bias.fit(ctx)
    }

    fn train_step(&mut self, ctx: &mut TrainContext<'_>, batch: &Batch) -> Result<LossRecord> {
        if batch.len() < 2 {
            return ctx.erm_step(batch);
        }
        let b = self.bias.rows(&batch.positions)?.cast::<f64>();
        let (tau, w) = (self.tau, self.ce_weight);
        ctx.model_step(batch, |g, _, _, out| softcon_loss(g, out.features, out.logits, &batch.targets, &b, tau, w))
    }

    fn save_state(&self, state: &mut MethodState) -> Result<()> {
        self.bias.save(state);
        Ok(())
    }

    fn load_state(&mut self, ctx: &mut TrainContext<'_>, state: &MethodState) -> Result<()> {
        self.bias.load(ctx, state)
    }
}

// ---- Debian ----

struct Discoverer {
    net: Network<f32>,
    opt: Optimizer<f32>,
}

pub struct Debian {
    disc: Option<Discoverer>,
}

impl Debian {
    fn new_disc(ctx: &TrainContext<'_>) -> Result<Discoverer> {
        let mut rng = ctx.seeds.derive("method/debian_disc_init");
        let net = build_model(ctx.cfg.model.name, 1, 1, in_channels(ctx), &mut rng)?;
        Ok(Discoverer { net, opt: ctx.settings().build() })
    }
}

fn sigmoid(v: f32) -> f64 {
    1.0 / (1.0 + (-(v as f64)).exp())
}

impl TrainerHooks for Debian {
    fn method(&self) -> MethodName {
        MethodName::Debian
    }

    fn prepare(&mut self, ctx: &mut TrainContext<'_>) -> Result<()> {
        self.disc = Some(Self::new_disc(ctx)?);
        Ok(())
    }

    fn train_step(&mut self, ctx: &mut TrainContext<'_>, batch: &Batch) -> Result<LossRecord> {
        let disc = self.disc.as_mut().ok_or_else(|| Error::Training("debian: prepare did not run".into()))?;
        if ctx.global_step % 2 == 0 {
            let d: Vec<f64> = disc.net.infer(&batch.x)?.1.data().iter().map(|&v| sigmoid(v)).collect();
            let w = debian_weights(&d, &batch.targets);
            ctx.model_step(batch, |g, _, _, out| weighted_ce(g, out.logits, &batch.targets, &w))
        } else {
            let (_, logits) = ctx.model.infer(&batch.x)?;
            let mut g = Graph::<f32>::no_grad();
            let lv = g.constant(logits);
            let ce = cross_entropy(&mut g, lv, &batch.targets)?;
            let losses = g.value(ce).to_f64_vec();
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            let rec = model_step(&mut disc.net, &mut disc.opt, &batch.x, |g, _, _, out| {
                let d = g.sigmoid(out.logits);
                let gap = debian_gap(g, d, &losses)?;
                let total = g.neg(gap);
                Ok(LossTerms { total, components: vec![("gap".into(), gap)], per_sample: None })
            })?;
            Ok(LossRecord { total: mean, components: rec.components, per_sample: losses })
        }
    }

    fn save_state(&self, state: &mut MethodState) -> Result<()> {
        if let Some(d) = &self.disc {
            state.save_network("discoverer", &d.net);
            state.save_optimizer("discoverer_opt", &d.opt);
        }
        Ok(())
    }

    fn load_state(&mut self, ctx: &mut TrainContext<'_>, state: &MethodState) -> Result<()> {
        let mut d = Self::new_disc(ctx)?;
        state.load_network("discoverer", &mut d.net)?;
        state.load_optimizer("discoverer_opt", &mut d.opt)?;
        self.disc = Some(d);
        Ok(())
    }
}

// ---- FLAC ----

pub struct Flac {
    pub lambda: f64,
    pub tau_z: f64,
    pub tau_b: f64,
    bias: BiasFeatures,
}

impl TrainerHooks for Flac {
    fn method(&self) -> MethodName {
        MethodName::Flac
    }

    fn prepare(&mut self, ctx: &mut TrainContext<'_>) -> Result<()> {
        self.bias.fit(ctx)
    }

    fn train_step(&mut self, ctx: &mut TrainContext<'_>, batch: &Batch) -> Result<LossRecord> {
        if batch.len() < 2 {
            return ctx.erm_step(batch);
        }
        let b = self.bias.rows(&batch.positions)?;
        let (lambda, tz, tb) = (self.lambda, self.tau_z, self.tau_b);
        ctx.model_step(batch, |g, _, _, out| {
            let mut terms = erm_loss(g, out.logits, &batch.targets)?;
            if lambda != 0.0 {
                let reg = flac_regularizer(g, out.features, &b, tz, tb)?;
                terms.add_term(g, "flac", reg, lambda)?;
            }
            Ok(terms)
        })
    }

    fn save_state(&self, state: &mut MethodState) -> Result<()> {
        self.bias.save(state);
        Ok(())
    }

    fn load_state(&mut self, ctx: &mut TrainContext<'_>, state: &MethodState) -> Result<()> {
        self.bias.load(ctx, state)
    }
}

// ---- MAVias ----

struct MaviasState {
    table: EmbeddingTable,
    proj: ProjectionLayer<f32>,
    proj_opt: Optimizer<f32>,
}

pub struct Mavias {
    pub lambda1: f64,
    pub lambda2: f64,
    embeddings_path: String,
    state: Option<MaviasState>,
}

impl Mavias {
    fn new_state(&self, ctx: &TrainContext<'_>) -> Result<MaviasState> {
        let table = if !self.embeddings_path.is_empty() {
            let path = Path::new(&self.embeddings_path);
            let path = if path.is_relative() && !path.exists() {
                Path::new(&ctx.cfg.dataset.root).join(path)
            } else {
                path.to_path_buf()
            };
            load_embeddings(&path)?
        } else if ctx.cfg.dataset.name.is_generated() {
            let splits: Vec<_> = ctx.bundle.splits.values().collect();
            let mut rng = ctx.seeds.derive("method/mavias_tags");
            synthesize_embeddings(&splits, &ctx.layout().cardinalities, SYNTHETIC_EMBED_DIM, &mut rng)
        } else {
            return Err(Error::config(
                "method.embeddings",
                format!("mavias needs a bias-embedding file for {}", ctx.cfg.dataset.name),
            ));
        };
        let mut rng = ctx.seeds.derive("method/mavias_proj_init");
        let proj = ProjectionLayer::random(table.dim, ctx.model.feature_dim(), &mut rng);
        Ok(MaviasState { table, proj, proj_opt: ctx.settings().build() })
    }
}

impl TrainerHooks for Mavias {
    fn method(&self) -> MethodName {
        MethodName::Mavias
    }

    fn prepare(&mut self, ctx: &mut TrainContext<'_>) -> Result<()> {
        let s = self.new_state(ctx)?;
        let train = ctx.bundle.train();
        s.table.gather(&train.indices)?;
        self.state = Some(s);
        Ok(())
    }

    fn train_step(&mut self, ctx: &mut TrainContext<'_>, batch: &Batch) -> Result<LossRecord> {
        let s = self.state.as_mut().ok_or_else(|| Error::Training("mavias: prepare did not run".into()))?;
        let e = s.table.gather(&batch.indices)?;
        let (l1, l2) = (self.lambda1, self.lambda2);
        let net = &ctx.model;
        let mut g = Graph::new();
        let mut bind = Binding::new(&net.params);
        let mut pbind = Binding::new(&s.proj.params);
        let xv = g.constant(batch.x.clone());
        let out = net.forward(&mut g, &mut bind, xv, Mode::Train)?;
        let ev = g.constant(e);
        let phi = s.proj.forward(&mut g, &mut pbind, ev)?;
        let terms = mavias_loss(&mut g, out.features, phi, |g, zc| net.head(g, &mut bind, zc), &batch.targets, l1, l2)?;
        let rec = terms.record(&g);
        rec.check_finite()?;
        let grads = g.backward(terms.total)?;
        let main_grads = bind.grads(&g, &grads);
        let proj_grads = pbind.grads(&g, &grads);
        drop(bind);
        drop(pbind);
        ctx.optimizer.step(&mut ctx.model.params, &main_grads)?;
        s.proj_opt.step(&mut s.proj.params, &proj_grads)?;
        ctx.model.update_running_stats(&out.bn_stats);
        Ok(rec)
    }

    fn save_state(&self, state: &mut MethodState) -> Result<()> {
        if let Some(s) = &self.state {
            for (name, p) in s.proj.params.iter() {
                state.put(&format!("proj/{name}"), &p.value);
            }
            state.save_optimizer("proj_opt", &s.proj_opt);
        }
        Ok(())
    }

    fn load_state(&mut self, ctx: &mut TrainContext<'_>, state: &MethodState) -> Result<()> {
        let mut s = self.new_state(ctx)?;
        for name in ["proj.weight", "proj.bias"] {
            *s.proj.params.get_mut(name).expect("projection parameter") = state.get(&format!("proj/{name}"))?;
        }
        state.load_optimizer("proj_opt", &mut s.proj_opt)?;
        self.state = Some(s);
        Ok(())
    }
}
