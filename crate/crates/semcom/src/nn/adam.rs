//! Adaptive-moment gradient descent.

use ndarray::{ArrayD, ArrayViewMutD};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[ndarray::IxDyn]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| ArrayD::zeros(s.clone())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all parameters; `params` and `grads` must follow the
    /// same walk order the optimizer was built with.
    pub fn step(&mut self, params: &mut [ArrayViewMutD<'_, f64>], grads: &[ArrayD<f64>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn minimizes_a_quadratic() {
        // f(x) = sum((x - 3)^2)
        let mut x = ArrayD::zeros(ndarray::IxDyn(&[4]));
        let shapes = vec![x.raw_dim()];
        let mut adam = Adam::new(0.1, &shapes);
        for _ in 0..500 {
            let g = x.mapv(|v| 2.0 * (v - 3.0));
            let mut views = vec![x.view_mut()];
            adam.step(&mut views, &[g]);
        }
        for v in x.iter() {
            assert!((v - 3.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut x = ArrayD::from_elem(ndarray::IxDyn(&[3]), 1.5);
        let shapes = vec![x.raw_dim()];
        let mut adam = Adam::new(0.0, &shapes);
        let g = ArrayD::from_elem(ndarray::IxDyn(&[3]), 7.0);
        let mut views = vec![x.view_mut()];
        adam.step(&mut views, &[g]);
        for v in x.iter() {
            assert_eq!(*v, 1.5);
        }
    }
}
