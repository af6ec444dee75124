//! Random loss inputs plus the reduction and gradient harnesses shared by test targets.

use fairtrain_core::mitigation::losses::*;
use fairtrain_tensor::functional::{cross_entropy, finite_difference, weighted_sum};
use fairtrain_tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{labels, uniform};

/// Every method other than ERM.
pub const METHODS: [&str; 12] = ["groupdro", "di", "end", "bb", "badd", "lff", "sd", "jtt", "softcon", "debian", "flac", "mavias"];

pub const GROUPS: usize = 4;
pub const COMBOS: usize = 3;
pub const EMBED: usize = 5;

/// Inputs of one synthetic batch: features, a linear head, bias side information.
#[derive(Debug, Clone)]
pub struct Case {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub z: Tensor<f64>,
    pub w: Tensor<f64>,
    pub c: Tensor<f64>,
    pub targets: Vec<usize>,
    pub combos: Vec<usize>,
    /// Round-robin groups, equally sized when `n` is a multiple of [`GROUPS`].
    pub groups: Vec<usize>,
    pub b: Tensor<f64>,
    pub e: Tensor<f64>,
    pub wp: Tensor<f64>,
    pub cp: Tensor<f64>,
    pub wd: Tensor<f64>,
    pub prior: Vec<f64>,
    pub ema_b: Vec<f64>,
    pub ema_m: Vec<f64>,
    pub error_set: Vec<usize>,
}

pub fn random_case(rng: &mut ChaCha8Rng, n: usize) -> Case {
    let k = rng.random_range(2..=5);
    let d = rng.random_range(4..=8);
    let targets = labels(n, k, rng);
    let combos = labels(n, COMBOS, rng);
    let error_set = (0..n).filter(|_| rng.random::<f64>() < 0.3).collect();
    Case {
        n,
        k,
        d,
        z: uniform(&[n, d], -1.0, 1.0, rng),
        w: uniform(&[COMBOS * k, d], -1.0, 1.0, rng),
        c: uniform(&[COMBOS * k], -0.5, 0.5, rng),
        targets,
        combos,
        groups: (0..n).map(|i| i % GROUPS).collect(),
        b: uniform(&[n, d], -1.0, 1.0, rng),
        e: uniform(&[n, EMBED], -1.0, 1.0, rng),
        wp: uniform(&[d, EMBED], -1.0, 1.0, rng),
        cp: uniform(&[d], -0.5, 0.5, rng),
        wd: uniform(&[1, d], -1.0, 1.0, rng),
        prior: uniform(&[k * COMBOS], -3.0, 0.0, rng).into_data(),
        ema_b: uniform(&[n], 0.1, 2.0, rng).into_data(),
        ema_m: uniform(&[n], 0.1, 2.0, rng).into_data(),
        error_set,
    }
}

impl Case {
    /// Head weights of the first `heads` heads.
    fn head_params(&self, heads: usize) -> (Tensor<f64>, Tensor<f64>) {
        let rows = heads * self.k;
        let w = Tensor::new(&[rows, self.d], self.w.data()[..rows * self.d].to_vec()).unwrap();
        let c = Tensor::new(&[rows], self.c.data()[..rows].to_vec()).unwrap();
        (w, c)
    }
}

fn head(g: &mut Graph<f64>, z: Var, w: Var, c: Var) -> Var {
    g.linear(z, w, Some(c)).unwrap()
}

fn erm_total(case: &Case) -> f64 {
    let (w, c) = case.head_params(1);
    let mut g = Graph::new();
    let (z, w, c) = (g.constant(case.z.clone()), g.constant(w), g.constant(c));
    let logits = head(&mut g, z, w, c);
    erm_loss(&mut g, logits, &case.targets).unwrap().record(&g).total
}

/// `(method total with coefficients neutralized, ERM total)` for one batch.
///
/// LfF's total is doubled (weights 0.5) and SoftCon's divided by its CE weight.
pub fn reduction(method: &str, case: &Case) -> (f64, f64) {
    let (w1, c1) = case.head_params(1);
    let mut g = Graph::new();
    let z = g.constant(case.z.clone());
    let w = g.constant(w1);
    let c = g.constant(c1);
    let logits = head(&mut g, z, w, c);
    let y = &case.targets;
    let n = case.n;
    let total = match method {
        "groupdro" => {
            let mut q = vec![1.0 / GROUPS as f64; GROUPS];
            groupdro_loss(&mut g, logits, y, &case.groups, &mut q, 0.0).unwrap().record(&g).total
        }
        "di" => di_train_loss(&mut g, logits, &vec![0; n], y, case.k).unwrap().record(&g).total,
        "end" => {
            let mut t = erm_loss(&mut g, logits, y).unwrap();
            let (dis, ent) = end_regularizers(&mut g, z, &case.combos, y).unwrap();
            t.add_term(&mut g, "dis", dis, 0.0).unwrap();
            t.add_term(&mut g, "ent", ent, 0.0).unwrap();
            t.record(&g).total
        }
        "bb" => {
            let uniform_prior = vec![(1.0 / case.k as f64).ln(); case.k * COMBOS];
            let rows = prior_rows(&uniform_prior, case.k, COMBOS, &case.combos);
            bb_loss(&mut g, logits, &rows, y).unwrap().record(&g).total
        }
        "badd" => {
            let zeros = g.constant(Tensor::zeros(&[n, case.d]));
            let out = badd_forward(&mut g, z, zeros, |g, v| Ok(head(g, v, w, c)), true).unwrap();
            erm_loss(&mut g, out, y).unwrap().record(&g).total
        }
        "lff" => {
            let wts = lff_sample_weights(&case.ema_b, &case.ema_b);
            2.0 * weighted_ce(&mut g, logits, y, &wts).unwrap().record(&g).total
        }
        "sd" => {
            let mut t = erm_loss(&mut g, logits, y).unwrap();
            let pen = sd_penalty(&mut g, logits).unwrap();
            t.add_term(&mut g, "sd", pen, 0.0).unwrap();
            t.record(&g).total
        }
        "jtt" => {
            let wts = jtt_weights(n, &[], 100.0).unwrap();
            weighted_ce(&mut g, logits, y, &wts).unwrap().record(&g).total
        }
        "softcon" => {
            let row = case.b.row(0).to_vec();
            let same = Tensor::new(&[n, case.d], row.repeat(n)).unwrap();
            let ce_weight = 0.01;
            softcon_loss(&mut g, z, logits, y, &same, 0.07, ce_weight).unwrap().record(&g).total / ce_weight
        }
        "debian" => {
            let wts = debian_weights(&vec![0.5; n], y);
            weighted_ce(&mut g, logits, y, &wts).unwrap().record(&g).total
        }
        "flac" => {
            let mut t = erm_loss(&mut g, logits, y).unwrap();
            let reg = flac_regularizer(&mut g, z, &case.b, 0.5, 0.5).unwrap();
            t.add_term(&mut g, "flac", reg, 0.0).unwrap();
            t.record(&g).total
        }
        "mavias" => {
            let phi = g.constant(case.b.clone());
            mavias_loss(&mut g, z, phi, |g, v| Ok(head(g, v, w, c)), y, 0.0, 0.0).unwrap().record(&g).total
        }
        other => panic!("unknown method {other}"),
    };
    (total, erm_total(case))
}

/// Largest relative L2 error `‖a − n‖ / max(‖a‖, ‖n‖)` over all inputs.
pub fn gradcheck(inputs: &[Tensor<f64>], step: f64, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let numeric = finite_difference(&inputs[k], step, |probe| {
            let mut vals = inputs.to_vec();
            vals[k] = probe.clone();
            let mut g = Graph::new();
            let vs: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vs);
            g.value(out).item()
        });
        let diff: f64 = analytic.data().iter().zip(numeric.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = l2(&analytic).max(l2(&numeric));
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        worst = worst.max(rel);
    }
    worst
}

fn l2(t: &Tensor<f64>) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Worst relative gradient error of `method`'s loss with respect to the
/// features, the head and (where present) the method's own parameters.
pub fn method_gradient_error(method: &str, case: &Case, step: f64) -> f64 {
    let y = case.targets.clone();
    let n = case.n;
    let k = case.k;
    let (w1, c1) = case.head_params(1);
    let base = vec![case.z.clone(), w1.clone(), c1.clone()];
    match method {
        "erm" => gradcheck(&base, step, |g, v| {
            let l = head(g, v[0], v[1], v[2]);
            erm_loss(g, l, &y).unwrap().total
        }),
        "groupdro" => {
            // the group weights are constants within a step
            let mut q = vec![1.0 / GROUPS as f64; GROUPS];
            let mut g = Graph::new();
            let (z, w, c) = (g.constant(case.z.clone()), g.constant(w1.clone()), g.constant(c1.clone()));
            let l = head(&mut g, z, w, c);
            groupdro_loss(&mut g, l, &y, &case.groups, &mut q, 0.5).unwrap();
            let coef = groupdro_sample_weights(&case.groups, &q);
            let fixed = gradcheck(&base, step, |g, v| {
                let l = head(g, v[0], v[1], v[2]);
                let ce = cross_entropy(g, l, &y).unwrap();
                weighted_sum(g, ce, &coef).unwrap()
            });
            fixed.max(groupdro_matches_fixed(case, &coef))
        }
        "di" => gradcheck(&[case.z.clone(), case.w.clone(), case.c.clone()], step, |g, v| {
            let l = head(g, v[0], v[1], v[2]);
            di_train_loss(g, l, &case.combos, &y, k).unwrap().total
        }),
        "end" => gradcheck(&base, step, |g, v| {
            let l = head(g, v[0], v[1], v[2]);
            let mut t = erm_loss(g, l, &y).unwrap();
            let (dis, ent) = end_regularizers(g, v[0], &case.combos, &y).unwrap();
            t.add_term(g, "dis", dis, 1.0).unwrap();
            t.add_term(g, "ent", ent, 1.0).unwrap();
            t.total
        }),
        "bb" => {
            let rows = prior_rows(&case.prior, k, COMBOS, &case.combos);
            gradcheck(&base, step, |g, v| {
                let l = head(g, v[0], v[1], v[2]);
                bb_loss(g, l, &rows, &y).unwrap().total
            })
        }
        "badd" => gradcheck(&base, step, |g, v| {
            let b = g.constant(case.b.clone());
            let l = badd_forward(g, v[0], b, |g, x| Ok(head(g, x, v[1], v[2])), true).unwrap();
            erm_loss(g, l, &y).unwrap().total
        }),
        "lff" => {
            let wts = lff_sample_weights(&case.ema_b, &case.ema_m);
            let main = gradcheck(&base, step, |g, v| {
                let l = head(g, v[0], v[1], v[2]);
                weighted_ce(g, l, &y, &wts).unwrap().total
            });
            let aux = gradcheck(&base, step, |g, v| {
                let l = head(g, v[0], v[1], v[2]);
                gce_loss(g, l, &y, 0.7).unwrap().total
            });
            main.max(aux)
        }
        "sd" => gradcheck(&base, step, |g, v| {
            let l = head(g, v[0], v[1], v[2]);
            let mut t = erm_loss(g, l, &y).unwrap();
            let pen = sd_penalty(g, l).unwrap();
            t.add_term(g, "sd", pen, 0.1).unwrap();
            t.total
        }),
        "jtt" => {
            let wts = jtt_weights(n, &case.error_set, 100.0).unwrap();
            gradcheck(&base, step, |g, v| {
                let l = head(g, v[0], v[1], v[2]);
                weighted_ce(g, l, &y, &wts).unwrap().total
            })
        }
        "softcon" => gradcheck(&base, step, |g, v| {
            let l = head(g, v[0], v[1], v[2]);
            softcon_loss(g, v[0], l, &y, &case.b, 0.5, 0.01).unwrap().total
        }),
        "debian" => {
            let d: Vec<f64> = (0..n).map(|i| 1.0 / (1.0 + (-case.ema_b[i] + 1.0).exp())).collect();
            let wts = debian_weights(&d, &y);
            let main = gradcheck(&base, step, |g, v| {
                let l = head(g, v[0], v[1], v[2]);
                weighted_ce(g, l, &y, &wts).unwrap().total
            });
            let losses = case.ema_m.clone();
            let disc = gradcheck(&[case.z.clone(), case.wd.clone()], step, |g, v| {
                let logit = g.linear(v[0], v[1], None).unwrap();
                let d = g.sigmoid(logit);
                let gap = debian_gap(g, d, &losses).unwrap();
                g.neg(gap)
            });
            main.max(disc)
        }
        "flac" => gradcheck(&base, step, |g, v| {
            let l = head(g, v[0], v[1], v[2]);
            let mut t = erm_loss(g, l, &y).unwrap();
            let reg = flac_regularizer(g, v[0], &case.b, 0.5, 0.5).unwrap();
            t.add_term(g, "flac", reg, 100.0).unwrap();
            t.total
        }),
        "mavias" => {
            let inputs = vec![case.z.clone(), w1, c1, case.wp.clone(), case.cp.clone()];
            gradcheck(&inputs, step, |g, v| {
                let e = g.constant(case.e.clone());
                let phi = g.linear(e, v[3], Some(v[4])).unwrap();
                mavias_loss(g, v[0], phi, |g, x| Ok(head(g, x, v[1], v[2])), &y, 0.5, 0.6).unwrap().total
            })
        }
        other => panic!("unknown method {other}"),
    }
}

/// Relative difference between the analytic gradient of `groupdro_loss` and that
/// of the fixed-weight objective built from the same updated weights.
fn groupdro_matches_fixed(case: &Case, coef: &[f64]) -> f64 {
    let (w1, c1) = case.head_params(1);
    let grad_of = |use_loss: bool| {
        let mut g = Graph::new();
        let z = g.param(case.z.clone());
        let w = g.param(w1.clone());
        let c = g.param(c1.clone());
        let l = head(&mut g, z, w, c);
        let total = if use_loss {
            let mut q = vec![1.0 / GROUPS as f64; GROUPS];
            groupdro_loss(&mut g, l, &case.targets, &case.groups, &mut q, 0.5).unwrap().total
        } else {
            let ce = cross_entropy(&mut g, l, &case.targets).unwrap();
            weighted_sum(&mut g, ce, coef).unwrap()
        };
        let grads = g.backward(total).unwrap();
        [z, w, c].iter().flat_map(|v| grads.get(*v).unwrap().to_f64_vec()).collect::<Vec<f64>>()
    };
    let a = grad_of(true);
    let b = grad_of(false);
    let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(b.iter().map(|v| v * v).sum::<f64>().sqrt());
    diff / scale
}
