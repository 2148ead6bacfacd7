//! Fully connected layer.

use ndarray::{Array1, Array2};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[in_dim, out_dim]`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let mut w = Array2::zeros((in_dim, out_dim));
        for v in w.iter_mut() {
            *v = rng.random_range(-limit..limit);
        }
        let b_limit = (1.0 / in_dim as f64).sqrt();
        let mut b = Array1::zeros(out_dim);
        for v in b.iter_mut() {
            *v = rng.random_range(-b_limit..b_limit);
        }
        Self { w, b }
    }

    /// `x` is `[batch, in_dim]`.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        for mut row in y.rows_mut() {
            row += &self.b;
        }
        y
    }

    /// Returns `(grad_x, grad_w, grad_b)`.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        gy: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
        let gx = gy.dot(&self.w.t());
        let gw = x.t().dot(gy);
        let gb = gy.sum_axis(ndarray::Axis(0));
        (gx, gw, gb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let lin = Linear::new(5, 3, &mut rng);
        let mut x = Array2::zeros((4, 5));
        for v in x.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mut t = Array2::zeros((4, 3));
        for v in t.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        // loss = sum(y * t)
        let (gx, gw, gb) = lin.backward(&x, &t);
        let eps = 1e-6;
        for i in 0..5 {
            let mut xp = x.clone();
            xp[[1, i]] += eps;
            let mut xm = x.clone();
            xm[[1, i]] -= eps;
            let fd = ((&lin.forward(&xp) * &t).sum() - (&lin.forward(&xm) * &t).sum()) / (2.0 * eps);
            assert!((fd - gx[[1, i]]).abs() < 1e-7);
        }
        for (i, j) in [(0usize, 0usize), (4, 2), (2, 1)] {
            let mut lp = lin.clone();
            lp.w[[i, j]] += eps;
            let mut lm = lin.clone();
            lm.w[[i, j]] -= eps;
            let fd = ((&lp.forward(&x) * &t).sum() - (&lm.forward(&x) * &t).sum()) / (2.0 * eps);
            assert!((fd - gw[[i, j]]).abs() < 1e-7);
        }
        let fd_b = t.sum_axis(ndarray::Axis(0));
        for j in 0..3 {
            assert!((fd_b[j] - gb[j]).abs() < 1e-12);
        }
    }
}
