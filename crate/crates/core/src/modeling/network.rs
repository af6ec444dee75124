use fairtrain_tensor::{BatchStats, Binding, Container, Float, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelName;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: ModelName,
    pub num_classes: usize,
    pub heads: usize,
    pub in_channels: usize,
}

impl ModelSpec {
    pub fn fingerprint(&self) -> String {
        format!("{}/k{}/h{}/c{}", self.arch, self.num_classes, self.heads, self.in_channels)
    }
}

#[derive(Debug, Clone, Copy)]
enum Block {
    Basic { in_c: usize, out_c: usize, stride: usize },
    Bottleneck { in_c: usize, mid_c: usize, stride: usize },
}

/// Feature extractor plus one or more linear classification heads.
#[derive(Debug, Clone)]
pub struct Network<T: Float> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
    feature_dim: usize,
    blocks: Vec<Block>,
}

/// Outputs of one forward pass.
pub struct Forward<T> {
    /// `(n, D)`.
    pub features: Var,
    /// `(n, heads·K)`.
    pub logits: Var,
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

fn kaiming<T: Float, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn uniform<T: Float, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

struct Builder<'r, T: Float, R: Rng + ?Sized> {
    params: ParamStore<T>,
    rng: &'r mut R,
}

impl<T: Float, R: Rng + ?Sized> Builder<'_, T, R> {
    fn conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize) {
        let w = kaiming(self.rng, &[out_c, in_c, k, k], in_c * k * k);
        self.params.insert(format!("{name}.weight"), w, true);
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.params.insert(format!("{name}.gamma"), Tensor::full(&[c], T::one()), true);
        self.params.insert(format!("{name}.beta"), Tensor::zeros(&[c]), true);
        self.params.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]), false);
        self.params.insert(format!("{name}.running_var"), Tensor::full(&[c], T::one()), false);
    }

    fn linear(&mut self, name: &str, out_d: usize, in_d: usize) {
        let bound = 1.0 / (in_d as f64).sqrt();
        let w = uniform(self.rng, &[out_d, in_d], bound);
        let b = uniform(self.rng, &[out_d], bound);
        self.params.insert(format!("{name}.weight"), w, true);
        self.params.insert(format!("{name}.bias"), b, true);
    }
}

const SIMPLE_WIDTHS: [usize; 4] = [16, 32, 64, 128];

fn resnet_blocks(arch: ModelName) -> Vec<Block> {
    let (counts, bottleneck) = match arch {
        ModelName::ResNet18 => ([2, 2, 2, 2], false),
        _ => ([3, 4, 6, 3], true),
    };
    let mut blocks = Vec::new();
    let mut in_c = 64;
    for (stage, &count) in counts.iter().enumerate() {
        let width = 64 << stage;
        for i in 0..count {
            let stride = if stage > 0 && i == 0 { 2 } else { 1 };
            if bottleneck {
                blocks.push(Block::Bottleneck { in_c, mid_c: width, stride });
                in_c = width * 4;
            } else {
                blocks.push(Block::Basic { in_c, out_c: width, stride });
                in_c = width;
            }
        }
    }
    blocks
}

/// Builds a model with parameters drawn from `rng` (the model-init stream).
pub fn build_model<T: Float, R: Rng + ?Sized>(
    name: ModelName,
    num_classes: usize,
    heads: usize,
    in_channels: usize,
    rng: &mut R,
) -> Result<Network<T>> {
    if num_classes == 0 || heads == 0 {
        return Err(Error::Model(format!("need K >= 1 and heads >= 1, got K={num_classes}, heads={heads}")));
    }
    let spec = ModelSpec { arch: name, num_classes, heads, in_channels };
    let mut b = Builder { params: ParamStore::new(), rng };
    let (feature_dim, blocks) = match name {
        ModelName::SimpleConvNet => {
            let mut c_in = in_channels;
            for (i, &w) in SIMPLE_WIDTHS.iter().enumerate() {
                b.conv(&format!("conv{i}"), w, c_in, 3);
                b.bn(&format!("bn{i}"), w);
                c_in = w;
            }
            (c_in, Vec::new())
        }
        ModelName::ResNet18 | ModelName::ResNet50 => {
            b.conv("stem.conv", 64, in_channels, 7);
            b.bn("stem.bn", 64);
            let blocks = resnet_blocks(name);
            let mut out_dim = 64;
            for (i, blk) in blocks.iter().enumerate() {
                let p = format!("block{i}");
                match *blk {
                    Block::Basic { in_c, out_c, stride } => {
                        b.conv(&format!("{p}.conv1"), out_c, in_c, 3);
                        b.bn(&format!("{p}.bn1"), out_c);
                        b.conv(&format!("{p}.conv2"), out_c, out_c, 3);
                        b.bn(&format!("{p}.bn2"), out_c);
                        if stride != 1 || in_c != out_c {
                            b.conv(&format!("{p}.down"), out_c, in_c, 1);
                            b.bn(&format!("{p}.down_bn"), out_c);
                        }
                        out_dim = out_c;
                    }
                    Block::Bottleneck { in_c, mid_c, stride } => {
                        let out_c = mid_c * 4;
                        b.conv(&format!("{p}.conv1"), mid_c, in_c, 1);
                        b.bn(&format!("{p}.bn1"), mid_c);
                        b.conv(&format!("{p}.conv2"), mid_c, mid_c, 3);
                        b.bn(&format!("{p}.bn2"), mid_c);
                        b.conv(&format!("{p}.conv3"), out_c, mid_c, 1);
                        b.bn(&format!("{p}.bn3"), out_c);
                        if stride != 1 || in_c != out_c {
                            b.conv(&format!("{p}.down"), out_c, in_c, 1);
                            b.bn(&format!("{p}.down_bn"), out_c);
                        }
                        out_dim = out_c;
                    }
                }
            }
            (out_dim, blocks)
        }
        ModelName::VitB16 => {
            return Err(Error::Model("vit_b16 is registered but not implemented".into()));
        }
    };
    b.linear("head", heads * num_classes, feature_dim);
    Ok(Network { spec, params: b.params, feature_dim, blocks })
}

struct Ctx<'a, 'b, 's, T: Float> {
    g: &'a mut Graph<T>,
    bind: &'b mut Binding<'s, T>,
    mode: Mode,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<T: Float> Ctx<'_, '_, '_, T> {
    fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.bind.var(self.g, &format!("{name}.weight"));
        Ok(self.g.conv2d(x, w, None, stride, pad)?)
    }

    fn bn(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.bind.var(self.g, &format!("{name}.gamma"));
        let beta = self.bind.var(self.g, &format!("{name}.beta"));
        let out = match self.mode {
            Mode::Train => {
                let y = self.g.batch_norm(x, gamma, beta, None, T::lit(BN_EPS))?;
                if let Some(s) = self.g.batch_stats(y) {
                    self.stats.push((name.to_string(), s));
                }
                y
            }
            Mode::Eval => {
                let store = self.bind.store();
                let mean = store.get(&format!("{name}.running_mean")).expect("bn buffer").data();
                let var = store.get(&format!("{name}.running_var")).expect("bn buffer").data();
                self.g.batch_norm(x, gamma, beta, Some((mean, var)), T::lit(BN_EPS))?
            }
        };
        Ok(out)
    }

    fn conv_bn(&mut self, x: Var, conv: &str, bn: &str, stride: usize, pad: usize, relu: bool) -> Result<Var> {
        let y = self.conv(x, conv, stride, pad)?;
        let y = self.bn(y, bn)?;
        Ok(if relu { self.g.relu(y) } else { y })
    }
}

impl<T: Float> Network<T> {
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn heads(&self) -> usize {
        self.spec.heads
    }

    pub fn fingerprint(&self) -> String {
        self.spec.fingerprint()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::Model(format!(
                "input shape {shape:?} does not match (n, {}, h, w)",
                self.spec.in_channels
            )));
        }
        let min_side = match self.spec.arch {
            ModelName::SimpleConvNet => 16,
            _ => 32,
        };
        if shape[2] < min_side || shape[3] < min_side {
            return Err(Error::Model(format!("input {shape:?} smaller than {min_side}×{min_side}")));
        }
        Ok(())
    }

    /// Penultimate features `z`, shape `(n, D)`.
    pub fn features(
        &self,
        g: &mut Graph<T>,
        bind: &mut Binding<'_, T>,
        x: Var,
        mode: Mode,
        stats: &mut Vec<(String, BatchStats<T>)>,
    ) -> Result<Var> {
        self.check_input(g.shape(x))?;
        let mut c = Ctx { g, bind, mode, stats: Vec::new() };
        let mut h = x;
        match self.spec.arch {
            ModelName::SimpleConvNet => {
                for i in 0..SIMPLE_WIDTHS.len() {
                    h = c.conv_bn(h, &format!("conv{i}"), &format!("bn{i}"), 1, 1, true)?;
                    h = c.g.max_pool2d(h, 2, 2, 0)?;
                }
            }
            _ => {
                h = c.conv_bn(h, "stem.conv", "stem.bn", 2, 3, true)?;
                h = c.g.max_pool2d(h, 3, 2, 1)?;
                for (i, blk) in self.blocks.iter().enumerate() {
                    let p = format!("block{i}");
                    let has_down = c.bind.store().get(&format!("{p}.down.weight")).is_some();
                    let (body, stride) = match *blk {
                        Block::Basic { stride, .. } => {
                            let y = c.conv_bn(h, &format!("{p}.conv1"), &format!("{p}.bn1"), stride, 1, true)?;
                            (c.conv_bn(y, &format!("{p}.conv2"), &format!("{p}.bn2"), 1, 1, false)?, stride)
                        }
                        Block::Bottleneck { stride, .. } => {
                            let y = c.conv_bn(h, &format!("{p}.conv1"), &format!("{p}.bn1"), 1, 0, true)?;
                            let y = c.conv_bn(y, &format!("{p}.conv2"), &format!("{p}.bn2"), stride, 1, true)?;
                            (c.conv_bn(y, &format!("{p}.conv3"), &format!("{p}.bn3"), 1, 0, false)?, stride)
                        }
                    };
                    let skip = if has_down {
                        c.conv_bn(h, &format!("{p}.down"), &format!("{p}.down_bn"), stride, 0, false)?
                    } else {
                        h
                    };
                    let sum = c.g.add(body, skip)?;
                    h = c.g.relu(sum);
                }
            }
        }
        let z = c.g.global_avg_pool(h)?;
        stats.extend(c.stats);
        Ok(z)
    }

    /// Logits of all heads, `(n, heads·K)`.
    pub fn head(&self, g: &mut Graph<T>, bind: &mut Binding<'_, T>, z: Var) -> Result<Var> {
        let d = g.shape(z).get(1).copied().unwrap_or(0);
        if d != self.feature_dim {
            return Err(Error::Model(format!("head expects {} features, got {d}", self.feature_dim)));
        }
        let w = bind.var(g, "head.weight");
        let b = bind.var(g, "head.bias");
        Ok(g.linear(z, w, Some(b))?)
    }

    pub fn forward(&self, g: &mut Graph<T>, bind: &mut Binding<'_, T>, x: Var, mode: Mode) -> Result<Forward<T>> {
        let mut bn_stats = Vec::new();
        let features = self.features(g, bind, x, mode, &mut bn_stats)?;
        let logits = self.head(g, bind, features)?;
        Ok(Forward { features, logits, bn_stats })
    }

    /// Exponential moving update of batch-norm running statistics.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<T>)]) {
        let m = T::lit(BN_MOMENTUM);
        for (name, s) in stats {
            let unbias = if s.count > 1 { T::lit(s.count as f64 / (s.count - 1) as f64) } else { T::one() };
            if let Some(rm) = self.params.get_mut(&format!("{name}.running_mean")) {
                for (r, &b) in rm.data_mut().iter_mut().zip(&s.mean) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
            if let Some(rv) = self.params.get_mut(&format!("{name}.running_var")) {
                for (r, &b) in rv.data_mut().iter_mut().zip(&s.var) {
                    *r = (T::one() - m) * *r + m * b * unbias;
                }
            }
        }
    }

    /// Eval-mode `(features, logits)` computed without a tape, in chunks.
    pub fn infer(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(x.shape())?;
        let n = x.dim(0);
        let width = self.spec.heads * self.spec.num_classes;
        let mut feats = Vec::with_capacity(n * self.feature_dim);
        let mut logits = Vec::with_capacity(n * width);
        let row = x.len() / n.max(1);
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::new(&shape, x.data()[start * row..end * row].to_vec())?;
            let mut g = Graph::no_grad();
            let mut bind = Binding::frozen(&self.params);
            let xv = g.constant(chunk);
            let out = self.forward(&mut g, &mut bind, xv, Mode::Eval)?;
            feats.extend_from_slice(g.value(out.features).data());
            logits.extend_from_slice(g.value(out.logits).data());
            start = end;
        }
        Ok((Tensor::new(&[n, self.feature_dim], feats)?, Tensor::new(&[n, width], logits)?))
    }

    pub fn extract_features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.infer(x)?.0)
    }

    pub fn save_to(&self, c: &mut Container, prefix: &str) {
        for (name, p) in self.params.iter() {
            c.insert_tensor(format!("{prefix}{name}"), &p.value);
        }
    }

    /// Restores parameters saved under `prefix`; shapes must match.
    pub fn load_from(&mut self, c: &Container, prefix: &str) -> Result<()> {
        let names: Vec<String> = self.params.names().map(str::to_string).collect();
        for name in names {
            let t: Tensor<T> = c.tensor(&format!("{prefix}{name}"))?;
            let slot = self.params.get_mut(&name).expect("listed");
            if slot.shape() != t.shape() {
                return Err(Error::Model(format!("parameter {name}: shape {:?} vs {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(())
    }

    /// Standalone parameter file keyed by the architecture fingerprint.
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(self.fingerprint());
        self.save_to(&mut c, "");
        c
    }

    pub fn load_container(&mut self, c: &Container) -> Result<()> {
        if c.fingerprint != self.fingerprint() {
            return Err(Error::Model(format!(
                "architecture fingerprint `{}` does not match `{}`",
                c.fingerprint,
                self.fingerprint()
            )));
        }
        self.load_from(c, "")
    }
}

/// Splits `(n, heads·K)` logits into per-head rows: `out[i][h]` is head `h` of sample `i`.
pub fn per_head<T: Float>(logits: &Tensor<T>, heads: usize) -> Vec<Vec<Vec<T>>> {
    let n = logits.dim(0);
    let k = logits.dim(1) / heads.max(1);
    (0..n)
        .map(|i| (0..heads).map(|h| logits.row(i)[h * k..(h + 1) * k].to_vec()).collect())
        .collect()
}
