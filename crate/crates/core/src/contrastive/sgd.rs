use crate::nn::ParamSet;
use crate::tensor::{Real, Tensor, TensorError};

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T: Real = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64, params: &ParamSet<T>) -> Self {
        let velocity = params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self { momentum, weight_decay, velocity }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Tensor<T>>) -> Result<(), TensorError> {
        if velocity.len() != self.velocity.len() || velocity.iter().zip(&self.velocity).any(|(a, b)| a.shape() != b.shape()) {
            return Err(TensorError::InvalidArgument("velocity layout does not match the parameters".into()));
        }
        self.velocity = velocity;
        Ok(())
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<(), TensorError> {
        if grads.len() != self.velocity.len() || params.len() != self.velocity.len() {
            return Err(TensorError::InvalidArgument(format!("{} grads for {} params", grads.len(), params.len())));
        }
        let (mu, wd, lr) = (T::of_f64(self.momentum), T::of_f64(self.weight_decay), T::of_f64(lr));
        for ((w, v), g) in params.tensors_mut().zip(&mut self.velocity).zip(grads) {
            if w.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch { op: "sgd", detail: format!("{:?} vs {:?}", w.shape(), g.shape()) });
            }
            for ((wv, vv), &gv) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv + wd * *wv;
                *wv = *wv - lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_steps() {
        let mut p = ParamSet::<f64>::new();
        p.push("w", Tensor::from_f64([1], &[1.0]).unwrap());
        let mut sgd = Sgd::new(0.9, 0.1, &p);
        let g = [Tensor::from_f64([1], &[0.5]).unwrap()];
        sgd.step(&mut p, &g, 0.1).unwrap();
        // v = 0.5 + 0.1 = 0.6, w = 1 - 0.06
        assert!((p.get(0).item() - 0.94).abs() < 1e-15);
        sgd.step(&mut p, &g, 0.1).unwrap();
        let v = 0.9 * 0.6 + 0.5 + 0.1 * 0.94;
        assert!((p.get(0).item() - (0.94 - 0.1 * v)).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamSet::<f64>::new();
        p.push("w", Tensor::from_f64([2], &[3.0, -2.0]).unwrap());
        let mut sgd = Sgd::new(0.9, 0.0, &p);
        for _ in 0..300 {
            let g = vec![p.get(0).clone()];
            sgd.step(&mut p, &g, 0.05).unwrap();
        }
        assert!(p.get(0).data().iter().all(|v| v.abs() < 1e-6));
    }
}
