use fairtrain_tensor::{Binding, Float, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// Trainable affine map `φ(b) = W·b + c` from bias space (`D_b`) to feature space (`D`).
#[derive(Debug, Clone)]
pub struct ProjectionLayer<T: Float> {
    pub params: ParamStore<T>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<T: Float> ProjectionLayer<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        let mut params = ParamStore::new();
        params.insert("proj.weight", Tensor::zeros(&[out_dim, in_dim]), true);
        params.insert("proj.bias", Tensor::zeros(&[out_dim]), true);
        Self { params, in_dim, out_dim }
    }

    pub fn identity(dim: usize) -> Self {
        let mut p = Self::zeros(dim, dim);
        let w = p.params.get_mut("proj.weight").expect("inserted");
        for i in 0..dim {
            w.data_mut()[i * dim + i] = T::one();
        }
        p
    }

    /// Uniform `±1/√D_b` initialization.
    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(in_dim, out_dim);
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        for name in ["proj.weight", "proj.bias"] {
            for v in p.params.get_mut(name).expect("inserted").data_mut() {
                *v = T::lit(rng.random_range(-bound..=bound));
            }
        }
        p
    }

    pub fn forward(&self, g: &mut Graph<T>, bind: &mut Binding<'_, T>, b: Var) -> Result<Var> {
        let shape = g.shape(b).to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::Model(format!("projection expects (n, {}), got {shape:?}", self.in_dim)));
        }
        let w = bind.var(g, "proj.weight");
        let c = bind.var(g, "proj.bias");
        Ok(g.linear(b, w, Some(c))?)
    }

    /// Tape-free evaluation; errors on non-finite input.
    pub fn project(&self, b: &Tensor<T>) -> Result<Tensor<T>> {
        if !b.all_finite() {
            return Err(Error::Model("projection input is not finite".into()));
        }
        let mut g = Graph::no_grad();
        let mut bind = Binding::frozen(&self.params);
        let bv = g.constant(b.clone());
        let out = self.forward(&mut g, &mut bind, bv)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fairtrain_tensor::functional::finite_difference;

    #[test]
    fn zero_and_identity() {
        let b = Tensor::<f64>::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        let z = ProjectionLayer::<f64>::zeros(3, 5).project(&b).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(z.shape(), &[2, 5]);
        assert_eq!(ProjectionLayer::<f64>::identity(3).project(&b).unwrap(), b);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let b = Tensor::<f64>::zeros(&[2, 4]);
        assert!(ProjectionLayer::<f64>::zeros(3, 5).project(&b).is_err());
    }

    fn loss_value(p: &ProjectionLayer<f64>, b: &Tensor<f64>) -> f64 {
        let y = p.project(b).unwrap();
        y.data().iter().enumerate().map(|(i, v)| (v * (1.0 + i as f64 * 0.1)).powi(2)).sum()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = crate::seed::named_rng(0, "test");
        let p = ProjectionLayer::<f64>::random(3, 2, &mut rng);
        let b = Tensor::<f64>::from_f64(&[4, 3], &[0.3, -1.0, 2.0, 1.5, 0.2, -0.7, 0.0, 1.0, 1.0, -2.0, 0.4, 0.9]).unwrap();
        let mut g = Graph::new();
        let mut bind = Binding::new(&p.params);
        let bv = g.constant(b.clone());
        let y = p.forward(&mut g, &mut bind, bv).unwrap();
        let wts: Vec<f64> = (0..8).map(|i| 1.0 + i as f64 * 0.1).collect();
        let wt = g.constant(Tensor::from_f64(&[4, 2], &wts).unwrap());
        let scaled = g.mul(y, wt).unwrap();
        let sq = g.square(scaled).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        let analytic = bind.grads(&g, &grads);
        for name in ["proj.weight", "proj.bias"] {
            let numeric = finite_difference(p.params.get(name).unwrap(), 1e-3, |t| {
                let mut q = p.clone();
                *q.params.get_mut(name).unwrap() = t.clone();
                loss_value(&q, &b)
            });
            let a = &analytic[name];
            for (x, y) in a.data().iter().zip(numeric.data()) {
                assert!((x - y).abs() <= 1e-4 * (1.0 + y.abs()), "{name}: {x} vs {y}");
            }
        }
        // the input is a constant: no gradient flows back into b
        assert!(grads.get(bv).is_none());
    }
}
