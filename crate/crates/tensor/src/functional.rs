//! Composite operations built from graph primitives.

use crate::error::Result;
use crate::{Float, Graph, Tensor, Var};

/// Per-sample cross-entropy `-log softmax(logits)[target]`, shape `(n, 1)`.
pub fn cross_entropy<T: Float>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let lsm = g.log_softmax(logits)?;
    let picked = g.gather(lsm, targets)?;
    Ok(g.neg(picked))
}

/// Rows scaled to unit L2 norm.
pub fn normalize_rows<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let sq = g.square(x)?;
    let ss = g.sum_axis(sq, 1)?;
    let norm = g.sqrt(ss);
    g.div(x, norm)
}

/// Pairwise cosine similarity of the rows of `x`, shape `(n, n)`.
pub fn cosine_matrix<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let xn = normalize_rows(g, x)?;
    let xt = g.transpose(xn)?;
    g.matmul(xn, xt)
}

/// Row-wise cosine similarity of two equally shaped matrices, shape `(n, 1)`.
pub fn rowwise_cosine<T: Float>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let an = normalize_rows(g, a)?;
    let bn = normalize_rows(g, b)?;
    let prod = g.mul(an, bn)?;
    g.sum_axis(prod, 1)
}

/// Weighted sum `Σ wᵢ·xᵢ` of a column vector against constant weights.
pub fn weighted_sum<T: Float>(g: &mut Graph<T>, x: Var, weights: &[T]) -> Result<Var> {
    let n = weights.len();
    let w = g.constant(Tensor::new(&[n, 1], weights.to_vec())?);
    let wx = g.mul(x, w)?;
    Ok(g.sum(wx))
}

/// Central finite-difference gradient of a scalar function at `x`.
pub fn finite_difference<T: Float>(
    x: &Tensor<T>,
    step: f64,
    mut f: impl FnMut(&Tensor<T>) -> f64,
) -> Tensor<T> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::lit(step);
        let up = f(&probe);
        probe.data_mut()[i] = orig - T::lit(step);
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push(T::lit((up - down) / (2.0 * step)));
    }
    Tensor::new(x.shape(), out).expect("same shape")
}
