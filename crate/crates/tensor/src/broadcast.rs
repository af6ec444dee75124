//! Same-rank broadcasting for elementwise binary ops.

use crate::error::{Result, TensorError};

pub(crate) struct Plan {
    pub out: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    pub same: bool,
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

fn pad(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut out = vec![1; rank - shape.len()];
    out.extend_from_slice(shape);
    out
}

pub(crate) fn plan(a: &[usize], b: &[usize]) -> Result<Plan> {
    if a == b {
        return Ok(Plan { out: a.to_vec(), a_strides: vec![], b_strides: vec![], same: true });
    }
    let rank = a.len().max(b.len());
    let (pa, pb) = (pad(a, rank), pad(b, rank));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        let d = if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            return Err(TensorError::Shape(format!("cannot broadcast {a:?} with {b:?}")));
        };
        out.push(d);
    }
    let mask = |shape: &[usize]| {
        let st = contiguous_strides(shape);
        shape.iter().zip(st).map(|(&d, s)| if d == 1 { 0 } else { s }).collect::<Vec<_>>()
    };
    Ok(Plan { a_strides: mask(&pa), b_strides: mask(&pb), out, same: false })
}

impl Plan {
    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let total: usize = self.out.iter().product();
        if self.same {
            for i in 0..total {
                f(i, i, i);
            }
            return;
        }
        let rank = self.out.len();
        let mut idx = vec![0usize; rank];
        let (mut ai, mut bi) = (0usize, 0usize);
        for o in 0..total {
            f(o, ai, bi);
            for d in (0..rank).rev() {
                idx[d] += 1;
                ai += self.a_strides[d];
                bi += self.b_strides[d];
                if idx[d] < self.out[d] {
                    break;
                }
                ai -= self.a_strides[d] * idx[d];
                bi -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}
