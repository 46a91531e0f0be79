//! Adam with bias correction.

use super::scalar::Scalar;
use super::tensor::Tensor;

pub struct Adam<T: Scalar> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Adam<T> {
    /// One moment pair per parameter tensor, in the order `step` will
    /// receive them.
    pub fn new(lr: f64, param_sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            _marker: std::marker::PhantomData,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Apply one update. `params` and `grads` must line up with the sizes
    /// given at construction; a missing gradient leaves that tensor alone
    /// (its moments still decay on later steps that do touch it).
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let Some(grad) = grad else { continue };
            assert_eq!(param.numel(), m.len(), "parameter size changed");
            assert_eq!(grad.numel(), m.len(), "gradient size mismatch");
            for ((p, &g), (mi, vi)) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g.as_f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p = *p - T::from_f64(self.lr * m_hat / (v_hat.sqrt() + self.eps));
            }
        }
    }
}
