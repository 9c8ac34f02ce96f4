use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoder::linear_init_bound;
use super::params::ParamSet;
use crate::rng::rng_for;
use crate::tensor::{Graph, LeafKind, Real, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden_dim: 128, out_dim: 64 }
    }
}

/// Projection head: linear, relu, linear, then unit-normalized rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T: Real = f32> {
    config: HeadConfig,
    in_dim: usize,
    params: ParamSet<T>,
}

impl<T: Real> Head<T> {
    pub fn init(config: HeadConfig, in_dim: usize, seed: u64) -> Result<Self, String> {
        if config.hidden_dim == 0 || config.out_dim == 0 || in_dim == 0 {
            return Err("projection head dimensions must be positive".into());
        }
        let mut params = ParamSet::new();
        let mut rng = rng_for(seed, &[0x4EAD]);
        let mut weight = |rows: usize, cols: usize| {
            let b = linear_init_bound(cols);
            Tensor::new([rows, cols], (0..rows * cols).map(|_| T::of_f64(rng.random_range(-b..=b))).collect()).expect("shape")
        };
        let w1 = weight(config.hidden_dim, in_dim);
        let w2 = weight(config.out_dim, config.hidden_dim);
        params.push("fc1.weight", w1);
        params.push("fc1.bias", Tensor::zeros([config.hidden_dim]));
        params.push("fc2.weight", w2);
        params.push("fc2.bias", Tensor::zeros([config.out_dim]));
        Ok(Self { config, in_dim, params })
    }

    pub fn config(&self) -> HeadConfig {
        self.config
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Head<U> {
        Head { config: self.config, in_dim: self.in_dim, params: self.params.cast() }
    }

    pub fn bind(&self, g: &mut Graph<T>, kind: LeafKind) -> Vec<Var> {
        self.params.bind(g, kind)
    }

    /// `[B, in_dim] -> [B, out_dim]` with unit-norm rows.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], v: Var) -> Result<Var, TensorError> {
        let h = g.linear(v, p[0], Some(p[1]))?;
        let h = g.relu(h)?;
        let e = g.linear(h, p[2], Some(p[3]))?;
        g.l2_normalize(e)
    }

    pub fn infer(&self, v: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, LeafKind::Constant);
        let x = g.constant(v.clone());
        let e = self.forward(&mut g, &p, x)?;
        Ok(g.value(e).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, norm};

    fn input(rows: usize, dim: usize, seed: u64) -> Tensor<f32> {
        let mut rng = rng_for(seed, &[]);
        Tensor::new([rows, dim], (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn rows_are_unit_and_deterministic() {
        let head = Head::<f32>::init(HeadConfig { hidden_dim: 16, out_dim: 8 }, 12, 3).unwrap();
        let v = input(5, 12, 1);
        let e = head.infer(&v).unwrap();
        assert_eq!(e.shape(), &[5, 8]);
        for row in e.data().chunks(8) {
            assert!((norm(row) - 1.0).abs() < 1e-6);
        }
        assert_eq!(e, head.infer(&v).unwrap());
        assert!(head.infer(&input(2, 11, 1)).is_err());
    }

    #[test]
    fn identity_weights_normalize_the_input() {
        let mut head = Head::<f64>::init(HeadConfig { hidden_dim: 3, out_dim: 3 }, 3, 0).unwrap();
        let eye = Tensor::from_f64([3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let values = vec![eye.clone(), Tensor::zeros([3]), eye, Tensor::zeros([3])];
        head.params_mut().set_values(values).unwrap();
        let v = Tensor::from_f64([1, 3], &[1.0, 2.0, 2.0]).unwrap();
        let e = head.infer(&v).unwrap();
        for (a, b) in e.data().iter().zip([1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn head_passes_grad_check() {
        let mut head = Head::<f64>::init(HeadConfig { hidden_dim: 6, out_dim: 4 }, 5, 9).unwrap();
        // Nonzero biases keep every row away from a single-active-unit plateau.
        for t in head.params_mut().tensors_mut().skip(1).step_by(2) {
            let n = t.numel();
            t.data_mut().copy_from_slice(&input(1, n, 7).cast::<f64>().into_data());
        }
        let proj = input(3, 4, 2).cast::<f64>();
        let err = grad_check(
            |g, v| {
                let p = head.bind(g, LeafKind::Constant);
                let e = head.forward(g, &p, v)?;
                let w = g.constant(proj.clone());
                let m = g.mul(e, w)?;
                g.sum(m)
            },
            &input(3, 5, 4).cast(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
