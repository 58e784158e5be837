//! Adam with L2 weight decay folded into the gradient.
//! β₁ = 0.9, β₂ = 0.999, ε = 1e-8.

use crate::tensor::Tensor;

pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, params: &[&Tensor]) -> Adam {
        Adam {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One update over the same parameter list the optimizer was built
    /// with; gradients are consumed and zeroed.
    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        assert_eq!(params.len(), self.m.len(), "parameter list changed");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(grad) = p.grad.take() else { continue };
            let wd = self.weight_decay;
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad[j] + wd * data[j];
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g * g;
                let mhat = self.m[i][j] / bc1;
                let vhat = self.v[i][j] / bc2;
                data[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.grad = Some(vec![0.0; data.len()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (x-3)² from x=0
        let mut x = Tensor::scalar(0.0).with_grad();
        let mut opt = Adam::new(0.1, 0.0, &[&x]);
        for _ in 0..200 {
            let v = x.data()[0];
            x.accumulate_grad(&[2.0 * (v - 3.0)]);
            opt.step(&mut [&mut x]);
        }
        assert!((x.data()[0] - 3.0).abs() < 0.05, "got {}", x.data()[0]);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut x = Tensor::scalar(1.5).with_grad();
        let mut opt = Adam::new(0.0, 0.0, &[&x]);
        x.accumulate_grad(&[4.0]);
        opt.step(&mut [&mut x]);
        assert_eq!(x.data()[0], 1.5);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut x = Tensor::scalar(2.0).with_grad();
        let mut opt = Adam::new(0.1, 0.5, &[&x]);
        x.accumulate_grad(&[0.0]);
        opt.step(&mut [&mut x]);
        assert!(x.data()[0] < 2.0);
    }
}
