//! Loss functions and weighting rules of the mitigation methods.
//!
//! Graph-level functions take and return [`Var`]s so they compose with the
//! model's tape; numeric helpers operate on plain slices.

use fairtrain_tensor::functional::{cosine_matrix, cross_entropy, rowwise_cosine, weighted_sum};
use fairtrain_tensor::{Float, Graph, Tensor, Var};

use crate::error::{Error, Result};

/// Values reported for one step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossRecord {
    pub total: f64,
    pub components: Vec<(String, f64)>,
    pub per_sample: Vec<f64>,
}

impl LossRecord {
    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn check_finite(&self) -> Result<()> {
        if !self.total.is_finite() {
            return Err(Error::Training(format!("non-finite total loss {}", self.total)));
        }
        if let Some((n, v)) = self.components.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Training(format!("non-finite loss component {n} = {v}")));
        }
        Ok(())
    }
}

/// Graph nodes of a loss: the scalar total plus named scalar components.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub components: Vec<(String, Var)>,
    /// `(n, 1)` per-sample task losses.
    pub per_sample: Option<Var>,
}

impl LossTerms {
    pub fn record<T: Float>(&self, g: &Graph<T>) -> LossRecord {
        LossRecord {
            total: g.value(self.total).item().as_f64(),
            components: self
                .components
                .iter()
                .map(|(n, v)| (n.clone(), g.value(*v).item().as_f64()))
                .collect(),
            per_sample: self.per_sample.map(|v| g.value(v).to_f64_vec()).unwrap_or_default(),
        }
    }

    /// `total += coef · var`, recording `var` as a component.
    pub fn add_term<T: Float>(&mut self, g: &mut Graph<T>, name: &str, var: Var, coef: f64) -> Result<()> {
        let scaled = g.scale(var, T::lit(coef));
        self.total = g.add(self.total, scaled)?;
        self.components.push((name.to_string(), var));
        Ok(())
    }
}

fn check_finite_values<T: Float>(g: &Graph<T>, v: Var, what: &str) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::Training(format!("non-finite {what}")))
    }
}

fn check_rows_nonzero<T: Float>(t: &Tensor<T>, what: &str) -> Result<()> {
    let d = t.dim(1);
    for i in 0..t.dim(0) {
        if t.data()[i * d..(i + 1) * d].iter().all(|&v| v == T::zero()) {
            return Err(Error::Training(format!("zero-norm {what} row {i}")));
        }
    }
    Ok(())
}

fn constant_matrix<T: Float>(g: &mut Graph<T>, n: usize, m: usize, f: impl Fn(usize, usize) -> f64) -> Result<Var> {
    let data: Vec<f64> = (0..n * m).map(|i| f(i / m, i % m)).collect();
    Ok(g.constant(Tensor::from_f64(&[n, m], &data)?))
}

const MASKED: f64 = -1e9;

// ---- ERM ----

/// Mean cross-entropy with per-sample losses.
pub fn erm_loss<T: Float>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<LossTerms> {
    check_finite_values(g, logits, "logits")?;
    let ce = cross_entropy(g, logits, targets)?;
    let total = g.mean(ce);
    Ok(LossTerms { total, components: vec![("task".into(), total)], per_sample: Some(ce) })
}

/// Mean of `w_i · ℓ_i` for constant weights.
pub fn weighted_ce<T: Float>(g: &mut Graph<T>, logits: Var, targets: &[usize], weights: &[f64]) -> Result<LossTerms> {
    check_finite_values(g, logits, "logits")?;
    let n = targets.len();
    if weights.len() != n || n == 0 {
        return Err(Error::Training(format!("{} weights for {n} samples", weights.len())));
    }
    let ce = cross_entropy(g, logits, targets)?;
    let w: Vec<T> = weights.iter().map(|&w| T::lit(w / n as f64)).collect();
    let total = weighted_sum(g, ce, &w)?;
    Ok(LossTerms { total, components: vec![("task".into(), total)], per_sample: Some(ce) })
}

// ---- GroupDRO ----

/// Exponentiated-gradient group weights.
///
/// Returns `(robust loss, q')` with `q'_g ∝ q_g·exp(η·L_g)` over groups present
/// in the batch (absent groups keep their weight before renormalization).
pub fn groupdro_update(losses: &[f64], groups: &[usize], q: &[f64], eta: f64) -> Result<(f64, Vec<f64>)> {
    if losses.is_empty() {
        return Err(Error::Training("groupdro: empty batch".into()));
    }
    if losses.len() != groups.len() {
        return Err(Error::Training("groupdro: losses and groups differ in length".into()));
    }
    let (sums, counts) = group_sums(losses, groups, q.len())?;
    let mut next: Vec<f64> = q.to_vec();
    for g in 0..q.len() {
        if counts[g] > 0 {
            next[g] = q[g] * (eta * sums[g] / counts[g] as f64).exp();
        }
    }
    let z: f64 = next.iter().sum();
    next.iter_mut().for_each(|v| *v /= z);
    let robust = (0..q.len())
        .filter(|&g| counts[g] > 0)
        .map(|g| next[g] * sums[g] / counts[g] as f64)
        .sum();
    Ok((robust, next))
}

fn group_sums(losses: &[f64], groups: &[usize], g_total: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut sums = vec![0.0; g_total];
    let mut counts = vec![0usize; g_total];
    for (&l, &g) in losses.iter().zip(groups) {
        if g >= g_total {
            return Err(Error::Training(format!("group {g} >= {g_total}")));
        }
        sums[g] += l;
        counts[g] += 1;
    }
    Ok((sums, counts))
}

/// Per-sample coefficients `q'_g / n_g` so that `Σ c_i ℓ_i = Σ_g q'_g L_g`.
pub fn groupdro_sample_weights(groups: &[usize], q: &[f64]) -> Vec<f64> {
    let mut counts = vec![0usize; q.len()];
    for &g in groups {
        counts[g] += 1;
    }
    groups.iter().map(|&g| q[g] / counts[g] as f64).collect()
}

/// Robust loss node given the updated weights.
pub fn groupdro_loss<T: Float>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    groups: &[usize],
    q: &mut Vec<f64>,
    eta: f64,
) -> Result<LossTerms> {
    check_finite_values(g, logits, "logits")?;
    let ce = cross_entropy(g, logits, targets)?;
    let losses = g.value(ce).to_f64_vec();
    let (_, next) = groupdro_update(&losses, groups, q, eta)?;
    let coef: Vec<T> = groupdro_sample_weights(groups, &next).into_iter().map(T::lit).collect();
    let total = weighted_sum(g, ce, &coef)?;
    *q = next;
    Ok(LossTerms { total, components: vec![("robust".into(), total)], per_sample: Some(ce) })
}

// ---- DI ----

/// CE of each sample against its own domain's head.
pub fn di_train_loss<T: Float>(
    g: &mut Graph<T>,
    logits: Var,
    domains: &[usize],
    targets: &[usize],
    num_classes: usize,
) -> Result<LossTerms> {
    let width = g.shape(logits)[1];
    let heads = width / num_classes.max(1);
    if let Some(&d) = domains.iter().find(|&&d| d >= heads) {
        return Err(Error::Training(format!("domain {d} has no head ({heads} heads)")));
    }
    let selected = g.select_block(logits, domains, num_classes)?;
    erm_loss(g, selected, targets)
}

/// Element-wise sum of all heads: `(n, heads·K) -> (n, K)`.
pub fn di_inference<T: Float>(logits: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let n = logits.dim(0);
    let width = logits.dim(1);
    if heads == 0 || width % heads != 0 {
        return Err(Error::Training(format!("{width} logits do not split into {heads} heads")));
    }
    let k = width / heads;
    let mut out = vec![T::zero(); n * k];
    for i in 0..n {
        let row = logits.row(i);
        for h in 0..heads {
            for j in 0..k {
                out[i * k + j] += row[h * k + j];
            }
        }
    }
    Ok(Tensor::new(&[n, k], out)?)
}

// ---- EnD ----

/// `(L_dis, L_ent)` over the batch.
///
/// `L_dis` averages, over bias groups having pairs, the mean `|cos|` of distinct
/// same-bias pairs. `L_ent` averages, over classes having pairs, the mean
/// `1 − cos` of same-class pairs with different biases.
pub fn end_regularizers<T: Float>(
    g: &mut Graph<T>,
    z: Var,
    bias_ids: &[usize],
    targets: &[usize],
) -> Result<(Var, Var)> {
    check_rows_nonzero(g.value(z), "feature")?;
    let n = targets.len();
    let cos = cosine_matrix(g, z)?;
    let dis_w = pair_weights(n, bias_ids, |i, j| i != j && bias_ids[i] == bias_ids[j]);
    let ent_w = pair_weights(n, targets, |i, j| targets[i] == targets[j] && bias_ids[i] != bias_ids[j]);
    let abs = g.abs(cos);
    let wd = constant_matrix(g, n, n, |i, j| dis_w[i * n + j])?;
    let dis_terms = g.mul(abs, wd)?;
    let l_dis = g.sum(dis_terms);
    let we = constant_matrix(g, n, n, |i, j| ent_w[i * n + j])?;
    let ent_terms = g.mul(cos, we)?;
    let ent_cos = g.sum(ent_terms);
    let mass: f64 = ent_w.iter().sum();
    let neg = g.neg(ent_cos);
    let l_ent = g.add_scalar(neg, T::lit(mass));
    Ok((l_dis, l_ent))
}

/// Weights `1 / (#keyed groups with pairs · #pairs in group)` on selected ordered pairs.
fn pair_weights(n: usize, key: &[usize], select: impl Fn(usize, usize) -> bool) -> Vec<f64> {
    let max_key = key.iter().copied().max().map_or(0, |k| k + 1);
    let mut pairs = vec![0usize; max_key];
    for i in 0..n {
        for j in 0..n {
            if select(i, j) {
                pairs[key[i]] += 1;
            }
        }
    }
    let active = pairs.iter().filter(|&&p| p > 0).count();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if select(i, j) {
                w[i * n + j] = 1.0 / (active as f64 * pairs[key[i]] as f64);
            }
        }
    }
    w
}

// ---- BB ----

/// `p[y, a] = log((c(y,a) + ε) / (Σ_y' c(y',a) + K·ε))`, row-major `K × A`.
pub fn bias_prior(counts: &[usize], num_classes: usize, num_combos: usize, eps: f64) -> Vec<f64> {
    let mut p = vec![0.0; num_classes * num_combos];
    for a in 0..num_combos {
        let col: f64 = (0..num_classes).map(|y| counts[y * num_combos + a] as f64).sum();
        for y in 0..num_classes {
            let c = counts[y * num_combos + a] as f64;
            p[y * num_combos + a] = ((c + eps) / (col + num_classes as f64 * eps)).ln();
        }
    }
    p
}

/// Counts targets × bias combinations and returns the smoothed log prior.
pub fn compute_bias_prior(targets: &[usize], combos: &[usize], num_classes: usize, num_combos: usize, eps: f64) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes * num_combos];
    for (&y, &a) in targets.iter().zip(combos) {
        counts[y * num_combos + a] += 1;
    }
    bias_prior(&counts, num_classes, num_combos, eps)
}

/// Per-sample prior rows `p[:, a_i]`, shape `(n, K)`.
pub fn prior_rows(prior: &[f64], num_classes: usize, num_combos: usize, combos: &[usize]) -> Vec<f64> {
    combos
        .iter()
        .flat_map(|&a| (0..num_classes).map(move |y| prior[y * num_combos + a]))
        .collect()
}

/// CE on `logits + p`.
pub fn bb_loss<T: Float>(g: &mut Graph<T>, logits: Var, rows: &[f64], targets: &[usize]) -> Result<LossTerms> {
    let shape = g.shape(logits).to_vec();
    if rows.len() != shape.iter().product::<usize>() {
        return Err(Error::Training("bb: prior rows do not match logits".into()));
    }
    let p = g.constant(Tensor::from_f64(&shape, rows)?);
    let adjusted = g.add(logits, p)?;
    erm_loss(g, adjusted, targets)
}

// ---- BAdd ----

/// Train: `head(z + b)`; eval: `head(z)`. `b` must be a constant node.
pub fn badd_forward<T: Float>(
    g: &mut Graph<T>,
    z: Var,
    b: Var,
    head: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
    train: bool,
) -> Result<Var> {
    if g.shape(z) != g.shape(b) {
        return Err(Error::Training(format!(
            "badd: bias features {:?} vs features {:?}",
            g.shape(b),
            g.shape(z)
        )));
    }
    if train {
        let zb = g.add(z, b)?;
        head(g, zb)
    } else {
        head(g, z)
    }
}

// ---- LfF ----

/// Generalized cross-entropy `(1 − p_y^q) / q`, averaged.
pub fn gce_loss<T: Float>(g: &mut Graph<T>, logits: Var, targets: &[usize], q: f64) -> Result<LossTerms> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Training(format!("gce: q = {q} outside (0, 1]")));
    }
    check_finite_values(g, logits, "logits")?;
    let lsm = g.log_softmax(logits)?;
    let logp = g.gather(lsm, targets)?;
    let scaled = g.scale(logp, T::lit(q));
    let pq = g.exp(scaled);
    let neg = g.neg(pq);
    let one_minus = g.add_scalar(neg, T::one());
    let per = g.scale(one_minus, T::lit(1.0 / q));
    let total = g.mean(per);
    Ok(LossTerms { total, components: vec![("gce".into(), total)], per_sample: Some(per) })
}

pub const LFF_DELTA: f64 = 1e-8;

/// `w_i = ema_b / (ema_b + ema_m + δ)`.
pub fn lff_sample_weights(ema_biased: &[f64], ema_main: &[f64]) -> Vec<f64> {
    ema_biased
        .iter()
        .zip(ema_main)
        .map(|(&b, &m)| b / (b + m + LFF_DELTA))
        .collect()
}

/// `ema ← α·ema + (1−α)·loss` at the given positions.
pub fn ema_update(ema: &mut [f64], positions: &[usize], losses: &[f64], alpha: f64) {
    for (&p, &l) in positions.iter().zip(losses) {
        ema[p] = alpha * ema[p] + (1.0 - alpha) * l;
    }
}

// ---- SD ----

/// `λ · mean_i ‖ŷ_i‖²`; returns the unscaled mean squared norm.
pub fn sd_penalty<T: Float>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let sq = g.square(logits)?;
    let per = g.sum_axis(sq, 1)?;
    Ok(g.mean(per))
}

// ---- JTT ----

pub fn jtt_weights(n: usize, error_set: &[usize], lambda_up: f64) -> Result<Vec<f64>> {
    if lambda_up < 1.0 {
        return Err(Error::Training(format!("jtt: lambda_up = {lambda_up} < 1")));
    }
    let mut w = vec![1.0; n];
    for &i in error_set {
        if i >= n {
            return Err(Error::Training(format!("jtt: error-set position {i} >= {n}")));
        }
        w[i] = lambda_up;
    }
    Ok(w)
}

// ---- SoftCon ----

/// `w_ij = 1 − cos(b_i, b_j)`, row-major `n × n`.
pub fn softcon_pair_weights(b: &Tensor<f64>) -> Result<Vec<f64>> {
    check_rows_nonzero(b, "bias feature")?;
    let (n, d) = (b.dim(0), b.dim(1));
    let norms: Vec<f64> = (0..n).map(|i| b.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = (0..d).map(|k| b.row(i)[k] * b.row(j)[k]).sum();
            let v = 1.0 - dot / (norms[i] * norms[j]);
            w[i * n + j] = if v < 1e-12 { 0.0 } else { v };
        }
    }
    Ok(w)
}

/// Bias-weighted supervised contrastive loss (without the CE term).
pub fn softcon_contrastive<T: Float>(
    g: &mut Graph<T>,
    z: Var,
    targets: &[usize],
    pair_w: &[f64],
    tau: f64,
) -> Result<Var> {
    let n = targets.len();
    if n < 2 {
        return Err(Error::Training("softcon: batch needs at least 2 samples".into()));
    }
    if tau <= 0.0 {
        return Err(Error::Training(format!("softcon: tau = {tau} must be positive")));
    }
    check_rows_nonzero(g.value(z), "feature")?;
    let cos = cosine_matrix(g, z)?;
    let logits = g.scale(cos, T::lit(1.0 / tau));
    let mask = constant_matrix(g, n, n, |i, j| if i == j { MASKED } else { 0.0 })?;
    let masked = g.add(logits, mask)?;
    let log_prob = g.log_softmax(masked)?;
    let mut coef = vec![0.0; n * n];
    let mut anchors = 0usize;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && targets[j] == targets[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1;
        let wsum: f64 = pos.iter().map(|&j| pair_w[i * n + j]).sum();
        if wsum > 0.0 {
            for &j in &pos {
                coef[i * n + j] = pair_w[i * n + j] / wsum;
            }
        }
    }
    let scale = if anchors > 0 { -1.0 / anchors as f64 } else { 0.0 };
    let c = constant_matrix(g, n, n, |i, j| coef[i * n + j] * scale)?;
    let terms = g.mul(log_prob, c)?;
    Ok(g.sum(terms))
}

pub fn softcon_loss<T: Float>(
    g: &mut Graph<T>,
    z: Var,
    logits: Var,
    targets: &[usize],
    b: &Tensor<f64>,
    tau: f64,
    ce_weight: f64,
) -> Result<LossTerms> {
    let w = softcon_pair_weights(b)?;
    let con = softcon_contrastive(g, z, targets, &w, tau)?;
    let ce = erm_loss(g, logits, targets)?;
    let scaled = g.scale(ce.total, T::lit(ce_weight));
    let total = g.add(con, scaled)?;
    Ok(LossTerms {
        total,
        components: vec![("contrastive".into(), con), ("task".into(), ce.total)],
        per_sample: ce.per_sample,
    })
}

// ---- Debian ----

/// `w_i = d_i / mean_{j: y_j = y_i} d_j`; singleton classes get weight 1.
pub fn debian_weights(d: &[f64], targets: &[usize]) -> Vec<f64> {
    let k = targets.iter().copied().max().map_or(0, |m| m + 1);
    let mut sum = vec![0.0; k];
    let mut cnt = vec![0usize; k];
    for (&di, &y) in d.iter().zip(targets) {
        sum[y] += di;
        cnt[y] += 1;
    }
    d.iter()
        .zip(targets)
        .map(|(&di, &y)| {
            let mean = sum[y] / cnt[y] as f64;
            if cnt[y] < 2 || mean <= 0.0 {
                1.0
            } else {
                di / mean
            }
        })
        .collect()
}

/// Signed gap `Σ dℓ/Σ d − Σ(1−d)ℓ/Σ(1−d)` between the discoverer's two soft partitions.
pub fn debian_gap<T: Float>(g: &mut Graph<T>, d: Var, losses: &[f64]) -> Result<Var> {
    let n = losses.len();
    let l = g.constant(Tensor::from_f64(&[n, 1], losses)?);
    let dl = g.mul(d, l)?;
    let num_a = g.sum(dl);
    let den_a = g.sum(d);
    let den_a = g.add_scalar(den_a, T::lit(1e-8));
    let a = g.div(num_a, den_a)?;
    let neg_d = g.neg(d);
    let comp = g.add_scalar(neg_d, T::one());
    let cl = g.mul(comp, l)?;
    let num_b = g.sum(cl);
    let den_b = g.sum(comp);
    let den_b = g.add_scalar(den_b, T::lit(1e-8));
    let b = g.div(num_b, den_b)?;
    Ok(g.sub(a, b)?)
}

// ---- FLAC ----

/// Row-wise softmax log-probabilities of `cos(x)/τ` with the diagonal excluded.
fn similarity_log_probs<T: Float>(g: &mut Graph<T>, x: Var, tau: f64) -> Result<Var> {
    let n = g.shape(x)[0];
    let cos = cosine_matrix(g, x)?;
    let scaled = g.scale(cos, T::lit(1.0 / tau));
    let mask = constant_matrix(g, n, n, |i, j| if i == j { MASKED } else { 0.0 })?;
    let masked = g.add(scaled, mask)?;
    Ok(g.log_softmax(masked)?)
}

/// Mean Jeffreys divergence between similarity distributions of `z` and `b`.
pub fn flac_regularizer<T: Float>(g: &mut Graph<T>, z: Var, b: &Tensor<T>, tau_z: f64, tau_b: f64) -> Result<Var> {
    let n = g.shape(z)[0];
    if n < 2 {
        return Err(Error::Training("flac: batch needs at least 2 samples".into()));
    }
    if b.dim(0) != n {
        return Err(Error::Training("flac: bias features and features differ in rows".into()));
    }
    check_rows_nonzero(g.value(z), "feature")?;
    check_rows_nonzero(b, "bias feature")?;
    let log_p = similarity_log_probs(g, z, tau_z)?;
    let bv = g.constant(b.clone());
    let log_q = similarity_log_probs(g, bv, tau_b)?;
    let p = g.exp(log_p);
    let q = g.exp(log_q);
    let dp = g.sub(p, q)?;
    let dl = g.sub(log_p, log_q)?;
    let j = g.mul(dp, dl)?;
    let off = constant_matrix(g, n, n, |i, k| if i == k { 0.0 } else { 1.0 / n as f64 })?;
    let jm = g.mul(j, off)?;
    Ok(g.sum(jm))
}

// ---- MAVias ----

/// `CE(head(z + λ2·φ(e)), y) + λ1 · mean cos²(z, φ(e))`.
pub fn mavias_loss<T: Float>(
    g: &mut Graph<T>,
    z: Var,
    phi_e: Var,
    head: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>,
    targets: &[usize],
    lambda1: f64,
    lambda2: f64,
) -> Result<LossTerms> {
    if g.shape(z) != g.shape(phi_e) {
        return Err(Error::Training(format!(
            "mavias: projected embeddings {:?} vs features {:?}",
            g.shape(phi_e),
            g.shape(z)
        )));
    }
    let shifted = g.scale(phi_e, T::lit(lambda2));
    let combined = g.add(z, shifted)?;
    let logits = head(g, combined)?;
    let mut terms = erm_loss(g, logits, targets)?;
    if lambda1 != 0.0 {
        check_rows_nonzero(g.value(z), "feature")?;
        check_rows_nonzero(g.value(phi_e), "projected embedding")?;
        let cos = rowwise_cosine(g, z, phi_e)?;
        let sq = g.square(cos)?;
        let reg = g.mean(sq);
        terms.add_term(g, "reg", reg, lambda1)?;
    }
    Ok(terms)
}
